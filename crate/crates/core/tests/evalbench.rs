use proptest::prelude::*;
use vatt_core::encoder::EncoderConfig;
use vatt_core::evalbench::*;
use vatt_core::numerics::{Graph, Rng, Tensor};
use vatt_core::tokenizers::{kept_count, Modality, VideoClip};
use vatt_core::training::{ModelConfig, ShareMode, VattModel};

fn mbs() -> ModelConfig {
    ModelConfig::full_scale(ShareMode::Specific {
        video: EncoderConfig::MEDIUM,
        audio: EncoderConfig::BASE,
        text: EncoderConfig::SMALL,
    })
}

#[test]
fn attention_mix_halving_tokens_quarters_cost() {
    let cfg = EncoderConfig::BASE;
    for m in [2usize, 17, 785] {
        let full = count_flops(&cfg, 2 * m - 1);
        let half = count_flops(&cfg, m - 1);
        assert_eq!(full.attention_mix, 4 * half.attention_mix);
    }
}

#[test]
fn totals_fall_with_drop_rate() {
    for cfg in [mbs(), ModelConfig::tiny(false), ModelConfig::tiny(true)] {
        let totals: Vec<u64> = [0.0, 0.25, 0.5, 0.75]
            .iter()
            .map(|&r| triplet_flops(&cfg, r).unwrap().total().total)
            .collect();
        assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
    }
}

#[test]
fn mbs_drop_75_ratio_in_band() {
    let full = triplet_flops(&mbs(), 0.0).unwrap().total().total as f64;
    let dropped = triplet_flops(&mbs(), 0.75).unwrap().total().total as f64;
    let ratio = dropped / full;
    assert!((0.20..=0.30).contains(&ratio), "{ratio}");
}

#[test]
fn mbs_video_token_count() {
    let f = triplet_flops(&mbs(), 0.0).unwrap();
    assert_eq!(f.video.tokens, 1569);
    assert_eq!(f.audio.tokens, 1201);
}

proptest! {
    #[test]
    fn attention_mix_follows_kept_tokens(n in 1usize..2000, pct in 0u32..100) {
        let rate = pct as f64 / 100.0;
        let cfg = EncoderConfig::SMALL;
        let base = count_flops(&cfg, n).attention_mix as u128;
        let k = kept_count(n, rate);
        let dropped = count_flops(&cfg, k).attention_mix as u128;
        prop_assert_eq!(dropped * (n as u128 + 1).pow(2), base * (k as u128 + 1).pow(2));
    }

    #[test]
    fn report_total_is_component_sum(pct in 0u32..100) {
        let r = triplet_flops(&ModelConfig::tiny(false), pct as f64 / 100.0).unwrap();
        for part in [r.video, r.audio, r.text, r.total()] {
            prop_assert_eq!(part.total, part.token_projection + part.attention_projections + part.attention_mix + part.mlp + part.heads);
        }
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn brute_force_rank(query: &[f64], videos: &Tensor<f64>, target: usize) -> usize {
    let sims: Vec<f64> = videos.rows().map(|r| cosine(query, r)).collect();
    let mut rank = 1;
    for (j, &s) in sims.iter().enumerate() {
        if s > sims[target] || (s == sims[target] && j < target) {
            rank += 1;
        }
    }
    rank
}

#[test]
fn query_equal_to_target_ranks_first() {
    let d = 8;
    let pool = Tensor::from_fn(&[8, CLIPS_PER_VIDEO, d], |i| if (i % d) == i / (CLIPS_PER_VIDEO * d) { 1.0 } else { 0.0 });
    let queries = video_representation(&pool).unwrap();
    let r = retrieval_eval(&queries, &pool, &(0..8).collect::<Vec<_>>()).unwrap();
    assert_eq!(r.ranks, vec![1; 8]);
    assert_eq!(r.median_rank, 1);
    assert_eq!(r.recall_at_10, 1.0);
}

#[test]
fn adversarial_target_ranks_last() {
    let (m, d) = (12, 3);
    let pool = Tensor::from_fn(&[m, CLIPS_PER_VIDEO, d], |i| {
        let (v, c) = (i / (CLIPS_PER_VIDEO * d), i % d);
        match (v, c) {
            (0, 0) => -1.0,
            (0, _) => 0.0,
            (_, 0) => 1.0,
            (v, 1) => v as f64 * 0.01,
            _ => 0.0,
        }
    });
    let q = Tensor::from_f64(&[1, d], &[1.0, 0.0, 0.0]).unwrap();
    let r = retrieval_eval(&q, &pool, &[0]).unwrap();
    assert_eq!(r.ranks, vec![m]);
    assert_eq!(r.recall_at_10, 0.0);
}

#[test]
fn empty_pool_rejected() {
    let pool = Tensor::<f64>::zeros(&[0, CLIPS_PER_VIDEO, 3]);
    let q = Tensor::<f64>::zeros(&[0, 3]);
    assert!(retrieval_eval(&q, &pool, &[]).is_err());
}

proptest! {
    #[test]
    fn ranks_match_enumeration_oracle(seed in any::<u64>(), m in 1usize..=8, d in 2usize..6) {
        let mut rng = Rng::new(seed);
        let pool = random(&[m, CLIPS_PER_VIDEO, d], &mut rng);
        let queries = random(&[m, d], &mut rng);
        let targets: Vec<usize> = (0..m).map(|_| rng.below(m)).collect();
        let r = retrieval_eval(&queries, &pool, &targets).unwrap();
        let videos = video_representation(&pool).unwrap();
        for (q, (&t, &rank)) in queries.rows().zip(targets.iter().zip(&r.ranks)) {
            prop_assert_eq!(rank, brute_force_rank(q, &videos, t));
        }
        let hits = r.ranks.iter().filter(|&&x| x <= 10).count() as f64 / m as f64;
        prop_assert_eq!(r.recall_at_10, hits);
    }

    #[test]
    fn ranks_over_all_targets_are_a_permutation(seed in any::<u64>(), m in 1usize..20) {
        let mut rng = Rng::new(seed);
        let pool = random(&[m, CLIPS_PER_VIDEO, 4], &mut rng);
        let q = random(&[1, 4], &mut rng);
        let queries = Tensor::new(&[m, 4], q.data().repeat(m)).unwrap();
        let mut ranks = retrieval_eval(&queries, &pool, &(0..m).collect::<Vec<_>>()).unwrap().ranks;
        ranks.sort_unstable();
        prop_assert_eq!(ranks, (1..=m).collect::<Vec<_>>());
    }
}

fn auc_by_enumeration(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

#[test]
fn perfect_separation() {
    let r = similarity_separation(&[1.0; 5], &[-1.0; 7]).unwrap();
    assert_eq!(r.auc, 1.0);
    assert_eq!(r.positive.counts[HISTOGRAM_BINS - 1], 5);
    assert_eq!(r.negative.counts[0], 7);
}

#[test]
fn identical_distributions_near_half() {
    let mut rng = Rng::new(3);
    let pos: Vec<f64> = (0..10_000).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    let neg: Vec<f64> = (0..10_000).map(|_| rng.uniform() * 2.0 - 1.0).collect();
    let r = similarity_separation(&pos, &neg).unwrap();
    assert!((r.auc - 0.5).abs() <= 0.02, "{}", r.auc);
    assert_eq!(r.positive.total(), 10_000);
}

#[test]
fn separation_needs_both_kinds() {
    assert!(similarity_separation(&[], &[0.1]).is_err());
    assert!(similarity_separation(&[0.1], &[]).is_err());
}

#[test]
fn histogram_csv_layout() {
    let r = similarity_separation(&[0.0], &[0.5]).unwrap();
    let csv = r.positive.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), HISTOGRAM_BINS + 1);
    assert_eq!(lines[0], "bin_left,count");
    assert_eq!(lines[1], "-1,0");
    assert_eq!(lines[33], "0,1");
}

#[test]
fn metric_line_format() {
    assert_eq!(metric_line("auc_va", 2000, 0.5), "metric=auc_va step=2000 value=0.5");
}

proptest! {
    #[test]
    fn auc_matches_pairwise_enumeration(
        pos in prop::collection::vec(-4i32..4, 1..12),
        neg in prop::collection::vec(-4i32..4, 1..12),
    ) {
        let pos: Vec<f64> = pos.into_iter().map(|v| v as f64 / 4.0).collect();
        let neg: Vec<f64> = neg.into_iter().map(|v| v as f64 / 4.0).collect();
        prop_assert!((auc(&pos, &neg) - auc_by_enumeration(&pos, &neg)).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_monotone_maps(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pos: Vec<f64> = (0..30).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let neg: Vec<f64> = (0..40).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let a = auc(&pos, &neg);
        let f = |v: &[f64]| v.iter().map(|x| (3.0 * x).exp() + x * x * x).collect::<Vec<_>>();
        prop_assert_eq!(a, auc(&f(&pos), &f(&neg)));
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

fn micro() -> VattModel<f64> {
    VattModel::build(ModelConfig::micro(false), 5).unwrap()
}

fn clips(n: usize, seed: u64) -> Vec<VideoClip> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let mut c = VideoClip::zeros(4, 8, 8);
            c.data.iter_mut().for_each(|v| *v = rng.normal() as f32 * 0.5);
            c
        })
        .collect()
}

#[test]
fn zero_mlp_gives_zero_profile() {
    let mut model = micro();
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.contains(".mlp.")).map(|(id, _)| id).collect();
    for id in ids {
        model.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let videos = clips(3, 1);
    let refs: Vec<&VideoClip> = videos.iter().collect();
    let text: Vec<usize> = vec![3, 4, 5];
    let p = activation_profile(&model, &refs, &[], &[&text], 2).unwrap();
    assert_eq!(p.modalities.len(), 2);
    for m in &p.modalities {
        assert!(m.layers.iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn profile_is_deterministic_and_sized() {
    let model = micro();
    let videos = clips(5, 2);
    let refs: Vec<&VideoClip> = videos.iter().collect();
    let wave: Vec<f32> = (0..32).map(|i| (i as f32 * 0.3).sin()).collect();
    let texts: [&[usize]; 2] = [&[1, 2, 3], &[4, 5]];
    let a = activation_profile(&model, &refs, &[&wave], &texts, 2).unwrap();
    let b = activation_profile(&model, &refs, &[&wave], &texts, 3).unwrap();
    for (x, y) in a.modalities.iter().zip(&b.modalities) {
        assert_eq!(x.modality, y.modality);
        for (r, s) in x.layers.iter().flatten().zip(y.layers.iter().flatten()) {
            assert!((r - s).abs() < 1e-12);
        }
    }
    let video = a.get(Modality::Video).unwrap();
    assert_eq!(video.layers.len(), 2);
    assert!(video.layers.iter().all(|l| l.len() == 16));
    assert_eq!(video.tokens, 5 * 9);
    assert_eq!(a.get(Modality::Text).unwrap().tokens, 4 + 3);
    assert!(a.to_csv().starts_with("modality,layer,node,mean\nvideo,0,0,"));
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-6).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let out = w.shape()[1];
    (0..out).map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * out + j]).sum::<f64>()).collect()
}

#[test]
fn profile_matches_hand_written_forward() {
    let model = micro();
    let videos = clips(3, 9);
    let refs: Vec<&VideoClip> = videos.iter().collect();
    let profile = activation_profile(&model, &refs, &[], &[], 8).unwrap();
    let mut g = Graph::new();
    let pv = model.store.bind(&mut g);
    let seq = model.tokenize_video(&mut g, &pv, &refs, 0.0, &mut Rng::new(0)).unwrap();
    let tokens = g.value(seq.tokens).clone();
    let (b, n, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let p = |name: &str| model.store.value(model.store.find(&format!("video.backbone.{name}")).unwrap()).clone();
    let (heads, dh) = (2, d / 2);
    let mut sums = vec![vec![0.0; d]; 2];
    for s in 0..b {
        let mut x: Vec<Vec<f64>> = vec![p("agg_token").data().to_vec()];
        for t in 0..n {
            x.push(tokens.data()[(s * n + t) * d..(s * n + t + 1) * d].to_vec());
        }
        for (l, sum) in sums.iter_mut().enumerate() {
            let q = |k: &str| p(&format!("layer{l}.{k}"));
            let h: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, q("ln1.gain").data(), q("ln1.bias").data())).collect();
            let qs: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &q("attn.wq"), &q("attn.bq"))).collect();
            let ks: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &q("attn.wk"), &q("attn.bk"))).collect();
            let vs: Vec<Vec<f64>> = h.iter().map(|r| affine(r, &q("attn.wv"), &q("attn.bv"))).collect();
            let mut ctx = vec![vec![0.0; d]; x.len()];
            for hd in 0..heads {
                let r = hd * dh..(hd + 1) * dh;
                for i in 0..x.len() {
                    let scores: Vec<f64> = (0..x.len())
                        .map(|j| qs[i][r.clone()].iter().zip(&ks[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..x.len() {
                        for c in r.clone() {
                            ctx[i][c] += e[j] / z * vs[j][c];
                        }
                    }
                }
            }
            for (xi, c) in x.iter_mut().zip(&ctx) {
                let o = affine(c, &q("attn.wo"), &q("attn.bo"));
                xi.iter_mut().zip(o).for_each(|(a, b)| *a += b);
            }
            for xi in x.iter_mut() {
                let hn = layer_norm(xi, q("ln2.gain").data(), q("ln2.bias").data());
                let hid: Vec<f64> = affine(&hn, &q("mlp.w1"), &q("mlp.b1"))
                    .into_iter()
                    .map(|v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
                    .collect();
                let m = affine(&hid, &q("mlp.w2"), &q("mlp.b2"));
                sum.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
                xi.iter_mut().zip(m).for_each(|(a, b)| *a += b);
            }
        }
    }
    let count = (b * (n + 1)) as f64;
    let video = profile.get(Modality::Video).unwrap();
    for (l, sum) in sums.iter().enumerate() {
        for (k, v) in sum.iter().enumerate() {
            assert!((v / count - video.layers[l][k]).abs() <= 1e-6, "layer {l} node {k}");
        }
    }
}

use proptest::prelude::*;

use vatt_core::losses::{label_smooth, mil_nce_loss, mixup_with, nce_loss, BatchPairing, LossConfig};
use vatt_core::numerics::{Graph, Rng, Tensor};
use vatt_core::params::ParamStore;
use vatt_core::tokenizers::{
    drop_token, kept_count, pad_text, Modality, TokenSequence, VideoGeometry, VideoTokenizer,
};
use vatt_core::training::{interpolate_positional, ModelConfig, NamedTensors, Schedule, VattModel};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn contrastive_pair(b: usize, d: usize, seed: u64, cfg: &LossConfig) -> (f64, f64) {
    let mut rng = Rng::new(seed);
    let (x, y) = (random(&[b, d], &mut rng), random(&[b, d], &mut rng));
    let mut g = Graph::<f64>::new();
    let (v, a) = (g.leaf(x), g.leaf(y));
    let nce = nce_loss(&mut g, v, a, cfg).unwrap();
    let pairing = BatchPairing { text_present: vec![true; b], positives: vec![1; b], slots: 1 };
    let mil = mil_nce_loss(&mut g, v, a, &pairing, cfg).unwrap().loss;
    (g.value(nce).item(), g.value(mil).item())
}

#[test]
fn token_count_matches_bucket_product() {
    for (frames, size, tokens, rows) in [(32, 224, 1568, 36), (32, 320, 3200, 48), (4, 16, 8, 6)] {
        let patch = if size == 16 { [2, 8, 8] } else { [4, 16, 16] };
        let g = VideoGeometry { frames, height: size, width: size, patch };
        assert_eq!((g.token_count(), g.positional_rows()), (tokens, rows), "{frames}x{size}");
    }
}

#[test]
fn agnostic_model_holds_one_encoder() {
    for agnostic in [false, true] {
        let cfg = ModelConfig::micro(agnostic);
        let model = VattModel::<f32>::build(cfg.clone(), 0).unwrap();
        assert_eq!(model.census(), cfg.census());
        assert_eq!(model.encoder_weight_sets(), if agnostic { 1 } else { 3 });
    }
}

#[test]
fn tokenizer_padding_does_not_reach_the_text_encoding() {
    let model = VattModel::<f64>::build(ModelConfig::micro(false), 3).unwrap();
    let encode = |rows: &[&[usize]]| {
        let mut g = Graph::new();
        let pv = model.store.bind(&mut g);
        let seq = model.tokenize_text(&mut g, &pv, rows).unwrap();
        let enc = model.encode_text(&mut g, &pv, &seq).unwrap();
        g.value(enc.z0).clone()
    };
    let alone = encode(&[&[1, 2, 3]]);
    let padded = encode(&[&[1, 2, 3], &[4, 5, 6, 7, 8, 9]]);
    let d = alone.numel();
    for (a, b) in alone.data().iter().zip(&padded.data()[..d]) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn checkpoint_rejects_any_flipped_byte() {
    let mut t = NamedTensors::default();
    t.push("a", Tensor::new(&[2, 2], vec![1.0f32, -2.0, 3.5, 0.0]).unwrap());
    t.push("b/c", Tensor::new(&[3], vec![7.0f32, 8.0, 9.0]).unwrap());
    let bytes = t.to_bytes().unwrap();
    assert_eq!(NamedTensors::from_bytes(&bytes).unwrap(), t);
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 0x10;
        assert!(NamedTensors::from_bytes(&bad).is_err(), "byte {i}");
    }
    assert!(NamedTensors::from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kept_count_is_exact_ceiling(n in 1usize..5000, pct in 0usize..100) {
        let expect = (((100 - pct) * n).div_ceil(100)).max(1);
        prop_assert_eq!(kept_count(n, pct as f64 / 100.0), expect);
    }

    #[test]
    fn drop_token_keeps_ordered_rows(b in 1usize..4, n in 2usize..30, pct in 1usize..99, seed in 0u64..500) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::<f64>::new();
        let x = random(&[b, n, 3], &mut rng);
        let tokens = g.constant(x.clone());
        let seq = TokenSequence {
            tokens,
            modality: Modality::Video,
            original_len: n,
            positions: vec![(0..n).collect(); b],
            padding: None,
        };
        let rate = pct as f64 / 100.0;
        let out = drop_token(&mut g, &seq, rate, &mut rng).unwrap();
        let k = kept_count(n, rate);
        prop_assert_eq!(g.shape(out.tokens), &[b, k, 3][..]);
        let kept = g.value(out.tokens).clone();
        for s in 0..b {
            let p = &out.positions[s];
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
            for (j, &src) in p.iter().enumerate() {
                prop_assert_eq!(
                    &kept.data()[(s * k + j) * 3..(s * k + j + 1) * 3],
                    &x.data()[(s * n + src) * 3..(s * n + src + 1) * 3]
                );
            }
        }
    }

    #[test]
    fn pad_text_masks_exactly_the_fill(len in 0usize..30, max_len in 1usize..20) {
        let ids: Vec<usize> = (1..=len).collect();
        let (out, mask) = pad_text(&ids, max_len);
        prop_assert_eq!(out.len(), max_len);
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), max_len.saturating_sub(len));
        prop_assert!(out.iter().zip(&mask).all(|(&id, &m)| m == (id == 0)));
    }

    #[test]
    fn single_positive_mil_nce_is_nce(b in 2usize..9, d in 1usize..8, seed in 0u64..1000, bidirectional: bool) {
        let cfg = LossConfig { bidirectional, ..LossConfig::default() };
        let (nce, mil) = contrastive_pair(b, d, seed, &cfg);
        prop_assert!((nce - mil).abs() <= 1e-9, "{} vs {}", nce, mil);
    }

    #[test]
    fn nce_is_invariant_to_joint_row_permutation(b in 2usize..8, seed in 0u64..1000) {
        let cfg = LossConfig::default();
        let mut rng = Rng::new(seed);
        let (x, y) = (random(&[b, 4], &mut rng), random(&[b, 4], &mut rng));
        let mut perm: Vec<usize> = (0..b).collect();
        rng.shuffle(&mut perm);
        let loss = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let mut g = Graph::new();
            let (v, a) = (g.leaf(x.clone()), g.leaf(y.clone()));
            let l = nce_loss(&mut g, v, a, &cfg).unwrap();
            g.value(l).item()
        };
        let shuffle = |t: &Tensor<f64>| Tensor::from_fn(&[b, 4], |i| t.data()[perm[i / 4] * 4 + i % 4]);
        prop_assert!((loss(&x, &y) - loss(&shuffle(&x), &shuffle(&y))).abs() < 1e-12);
    }

    #[test]
    fn schedule_stays_in_range_and_is_unimodal(warmup in 1u64..200, extra in 1u64..400, step in 0u64..800) {
        let s = Schedule { base_lr: 1e-3, final_lr: 2e-4, warmup_steps: warmup, total_steps: warmup + extra };
        let (now, next) = (s.lr_at(step), s.lr_at(step + 1));
        prop_assert!((0.0..=s.base_lr).contains(&now));
        if step < warmup {
            prop_assert!(next > now);
        } else {
            prop_assert!(next <= now && now >= s.final_lr);
        }
    }

    #[test]
    fn interpolation_reproduces_linear_ramps(m in 2usize..16, new_m in 1usize..40, a in -3f64..3.0, c in -3f64..3.0) {
        let table = Tensor::from_fn(&[m, 1], |r| a * r as f64 + c);
        let out = interpolate_positional(&table, new_m).unwrap();
        for i in 0..new_m {
            let src = if new_m == 1 { (m - 1) as f64 / 2.0 } else { i as f64 * (m - 1) as f64 / (new_m - 1) as f64 };
            prop_assert!((out.data()[i] - (a * src + c)).abs() < 1e-9);
        }
    }

    #[test]
    fn video_positions_cover_every_bucket(t in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let geo = VideoGeometry { frames: 2 * t, height: 4 * h, width: 4 * w, patch: [2, 4, 4] };
        let mut store = ParamStore::<f64>::new();
        let tok = VideoTokenizer::new(&mut store, "v", geo, 3, &mut Rng::new(1));
        prop_assert_eq!(tok.param_count(), store.count_prefix("v."));
        let mut seen = [vec![false; t], vec![false; h], vec![false; w]];
        for n in 0..geo.token_count() {
            for (axis, &b) in geo.token_coords(n).iter().enumerate() {
                seen[axis][b] = true;
            }
        }
        prop_assert!(seen.iter().all(|s| s.iter().all(|&x| x)));
    }

    #[test]
    fn mixup_is_convex_and_smoothing_normalized(alpha in 0f64..=1.0, eps in 0f64..=1.0, c in 2usize..10, hot in 0usize..10) {
        let (x1, x2) = (vec![1.0, -4.0, 2.0], vec![-1.0, 3.0, 2.0]);
        let (x, _) = mixup_with(&x1, &[1.0, 0.0], &x2, &[0.0, 1.0], alpha).unwrap();
        for ((v, p), q) in x.iter().zip(&x1).zip(&x2) {
            prop_assert!(*v >= p.min(*q) - 1e-15 && *v <= p.max(*q) + 1e-15);
        }
        let onehot: Vec<f64> = (0..c).map(|i| if i == hot % c { 1.0 } else { 0.0 }).collect();
        let s = label_smooth(&onehot, eps).unwrap();
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

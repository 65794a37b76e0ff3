//! Acceptance criteria. Each criterion prints one PASS/FAIL line to stderr
//! (uncaptured) and the test fails if any criterion fails.

use std::io::Write;
use std::time::Instant;

use vatt_core::data::{ClipSample, Location, SyntheticSpec, SyntheticWorld, TripletBatch, MIL_POSITIVES};
use vatt_core::encoder::EncoderConfig;
use vatt_core::evalbench::{
    count_flops, embed_clips, evaluate_retrieval, retrieval_embeddings, retrieval_pool, separation_reports,
    triplet_flops, video_representation, RetrievalResult, SeparationReports,
};
use vatt_core::losses::{label_smooth, mil_nce_loss, mixup, nce_loss, BatchPairing, LossConfig};
use vatt_core::numerics::{Graph, Rng, Tensor};
use vatt_core::tokenizers::{kept_count, VideoGeometry};
use vatt_core::training::{
    gradcheck_suite, interpolate_positional, loss_and_grads, lr_at, micro_data_spec, LowRankClassifier, ModelConfig,
    NamedTensors, Schedule, ShareMode, SuiteOptions, TrainConfig, Trainer, VattModel, HELDOUT_SPLIT,
};
use vatt_core::Result;

type Outcome = Result<(bool, String)>;

fn report(id: usize, name: &str, outcome: Outcome) -> bool {
    let (pass, detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "acceptance C{id:02} {name}: {status} ({detail})");
    pass
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    ((value - target) / target).abs() <= rel
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let lines = gradcheck_suite(&SuiteOptions::default())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.name.as_str()).collect();
    let worst = lines.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    Ok((
        failed.is_empty() && secs < 300.0,
        format!("{} checks, {} failed {failed:?}, worst rel err {worst:.2e}, {secs:.1}s", lines.len(), failed.len()),
    ))
}

fn census() -> Outcome {
    let full = |c: EncoderConfig| ModelConfig::full_scale(ShareMode::Agnostic(c));
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, c, target) in [
        ("small", EncoderConfig::SMALL, 20.9e6),
        ("base", EncoderConfig::BASE, 87.9e6),
        ("medium", EncoderConfig::MEDIUM, 155.0e6),
        ("large", EncoderConfig::LARGE, 306.1e6),
    ] {
        let census = full(c).census();
        let count = (census.backbone_total() + census.video_tokenizer) as f64;
        pass &= within(count, target, 0.02);
        parts.push(format!("{name} {:.2}M", count / 1e6));
    }
    let bbs = ModelConfig::full_scale(ShareMode::Specific {
        video: EncoderConfig::BASE,
        audio: EncoderConfig::BASE,
        text: EncoderConfig::SMALL,
    })
    .census()
    .total_without_vocabulary() as f64;
    pass &= within(bbs, 197e6, 0.05);
    parts.push(format!("bbs {:.2}M", bbs / 1e6));
    Ok((pass, parts.join(", ")))
}

fn token_geometry() -> Outcome {
    let g224 = VideoGeometry { frames: 32, height: 224, width: 224, patch: [4, 16, 16] };
    let g320 = VideoGeometry { height: 320, width: 320, ..g224 };
    let mut store = vatt_core::params::ParamStore::<f32>::new();
    let tok = vatt_core::tokenizers::VideoTokenizer::new(&mut store, "v", g224, 4, &mut Rng::new(0));
    let table_rows: usize = [tok.pos_temporal, tok.pos_horizontal, tok.pos_vertical]
        .iter()
        .map(|&id| store.value(id).shape()[0])
        .sum();
    let pass = g224.token_count() == 1568
        && g224.positional_rows() == 36
        && table_rows == 36
        && g320.positional_rows() == 48;
    Ok((
        pass,
        format!(
            "224: {} tokens, {} rows ({table_rows} stored); 320: {} tokens, {} rows",
            g224.token_count(),
            g224.positional_rows(),
            g320.token_count(),
            g320.positional_rows()
        ),
    ))
}

fn flops() -> Outcome {
    let mut pass = true;
    let n = 1568;
    let base = count_flops(&EncoderConfig::MEDIUM, n).attention_mix;
    for rate in [0.25, 0.5, 0.75] {
        let kept = kept_count(n, rate);
        let mix = count_flops(&EncoderConfig::MEDIUM, kept).attention_mix;
        // exact quadratic law in the (aggregation-inclusive) token count
        pass &= mix as u128 * ((n + 1) * (n + 1)) as u128 == base as u128 * ((kept + 1) * (kept + 1)) as u128;
    }
    let mbs = ModelConfig::full_scale(ShareMode::Specific {
        video: EncoderConfig::MEDIUM,
        audio: EncoderConfig::BASE,
        text: EncoderConfig::SMALL,
    });
    let ratio = triplet_flops(&mbs, 0.75)?.total().total as f64 / triplet_flops(&mbs, 0.0)?.total().total as f64;
    pass &= (0.20..=0.30).contains(&ratio);
    Ok((pass, format!("attention mix quadratic in kept tokens, MBS total ratio at 0.75 = {ratio:.4}")))
}

fn desk_schedule() -> Schedule {
    Schedule { base_lr: 1e-3, final_lr: 5e-4, warmup_steps: 200, total_steps: 2000 }
}

struct TrainedRun {
    untrained: SeparationReports,
    trained: SeparationReports,
    retrieval: RetrievalResult,
    oracle: Outcome,
    weight_sets: usize,
    secs: f64,
}

fn heldout_clips(world: &SyntheticWorld) -> Vec<ClipSample> {
    world.generate_streams(HELDOUT_SPLIT, 32).into_iter().flat_map(|s| s.clips).take(512).collect()
}

fn separation<T: vatt_core::numerics::Scalar>(model: &VattModel<T>, clips: &[ClipSample]) -> Result<SeparationReports> {
    let refs: Vec<&ClipSample> = clips.iter().collect();
    separation_reports(&embed_clips(model, &refs, 64)?)
}

fn train_tiny(agnostic: bool) -> Result<TrainedRun> {
    let cfg = TrainConfig { schedule: desk_schedule(), ..TrainConfig::default() };
    let mut trainer = Trainer::new(ModelConfig::tiny(agnostic), cfg, SyntheticSpec::default(), 256, 0)?;
    let clips = heldout_clips(&trainer.world);
    let untrained = separation(&trainer.model, &clips)?;
    let start = Instant::now();
    trainer.run(2000, |_, _| {})?;
    let secs = start.elapsed().as_secs_f64();
    let trained = separation(&trainer.model, &clips)?;
    let pool = retrieval_pool(&trainer.world, 100, &mut Rng::new(77));
    let retrieval = evaluate_retrieval(&trainer.model, &pool, 64)?;
    let oracle = retrieval_oracle(&trainer.model, &pool);
    Ok(TrainedRun { untrained, trained, retrieval, oracle, weight_sets: trainer.model.encoder_weight_sets(), secs })
}

/// Rank of the target counted directly: one plus every video that scores
/// higher, or equal with a lower index.
fn brute_force_rank(query: &[f64], videos: &[Vec<f64>], target: usize) -> usize {
    let dot = |v: &[f64]| query.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let qn = dot(query).sqrt();
    let score = |v: &Vec<f64>| dot(v) / (qn * v.iter().map(|x| x * x).sum::<f64>().sqrt());
    let st = score(&videos[target]);
    1 + videos
        .iter()
        .enumerate()
        .filter(|&(j, v)| j != target && (score(v) > st || (score(v) == st && j < target)))
        .count()
}

fn retrieval_oracle(model: &VattModel<f32>, pool: &vatt_core::evalbench::RetrievalPool) -> Outcome {
    let (queries, clips) = retrieval_embeddings(model, pool, 64)?;
    let (k, d) = (clips.shape()[1], clips.shape()[2]);
    let mut mismatches = 0;
    for m in 1..=8 {
        let q = Tensor::new(&[m, d], queries.data()[..m * d].to_vec())?;
        let c = Tensor::new(&[m, k, d], clips.data()[..m * k * d].to_vec())?;
        let result = vatt_core::evalbench::retrieval_eval(&q, &c, &(0..m).collect::<Vec<_>>())?;
        // independent video representation: normalize, average, renormalize
        let videos: Vec<Vec<f64>> = (0..m)
            .map(|v| {
                let mut acc = vec![0.0; d];
                for j in 0..k {
                    let row = &clips.data()[(v * k + j) * d..(v * k + j + 1) * d];
                    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    acc.iter_mut().zip(row).for_each(|(a, x)| *a += x / n);
                }
                acc
            })
            .collect();
        for t in 0..m {
            if result.ranks[t] != brute_force_rank(&queries.data()[t * d..(t + 1) * d], &videos, t) {
                mismatches += 1;
            }
        }
        let reps = video_representation(&c)?;
        if reps.shape() != [m, d] {
            mismatches += 1;
        }
    }
    Ok((mismatches == 0, format!("brute-force ranks on pools of 1..=8: {mismatches} mismatches")))
}

fn in_chance_band(r: &SeparationReports) -> bool {
    let vt = r.vt.as_ref().map_or(f64::NAN, |v| v.auc);
    (0.45..=0.55).contains(&r.va.auc) && (0.45..=0.55).contains(&vt)
}

fn aucs(r: &SeparationReports) -> (f64, f64) {
    (r.va.auc, r.vt.as_ref().map_or(f64::NAN, |v| v.auc))
}

fn specific_separation(run: &Result<TrainedRun>) -> Outcome {
    let run = run.as_ref().map_err(|e| vatt_core::Error::Config(e.to_string()))?;
    let (va, vt) = aucs(&run.trained);
    let (uva, uvt) = aucs(&run.untrained);
    Ok((
        va >= 0.9 && vt >= 0.9 && in_chance_band(&run.untrained),
        format!("trained auc va {va:.4} vt {vt:.4}; untrained va {uva:.4} vt {uvt:.4}; 2000 steps in {:.0}s", run.secs),
    ))
}

fn retrieval(run: &Result<TrainedRun>) -> Outcome {
    let run = run.as_ref().map_err(|e| vatt_core::Error::Config(e.to_string()))?;
    let r = &run.retrieval;
    let (oracle_ok, oracle) = match &run.oracle {
        Ok(o) => o.clone(),
        Err(e) => (false, format!("oracle error: {e}")),
    };
    Ok((
        r.recall_at_10 >= 0.8 && r.median_rank <= 5 && oracle_ok,
        format!("pool 100: R@10 {:.2}, MedR {}; {oracle}", r.recall_at_10, r.median_rank),
    ))
}

fn agnostic_separation(run: &Result<TrainedRun>) -> Outcome {
    let run = run.as_ref().map_err(|e| vatt_core::Error::Config(e.to_string()))?;
    let (va, vt) = aucs(&run.trained);
    let (uva, uvt) = aucs(&run.untrained);
    Ok((
        va >= 0.85 && vt >= 0.85 && run.weight_sets == 1,
        format!(
            "trained auc va {va:.4} vt {vt:.4}; untrained va {uva:.4} vt {uvt:.4}; {} encoder weight set(s); {:.0}s",
            run.weight_sets, run.secs
        ),
    ))
}

fn silent_batch(seed: u64) -> Result<TripletBatch> {
    let world = SyntheticWorld::new(micro_data_spec(seed))?;
    let streams = world.generate_streams(0, 16);
    let locs: Vec<Location> = (0..streams.len())
        .filter(|&s| streams[s].clips.iter().all(|c| !c.has_text()))
        .flat_map(|s| [2, 5].map(|clip| Location { stream: s, clip }))
        .take(6)
        .collect();
    TripletBatch::assemble(&streams, &locs, MIL_POSITIVES)
}

fn losses() -> Outcome {
    let cfg = LossConfig::default();
    let mut rng = Rng::new(21);
    let (b, d) = (6, 5);
    let video = Tensor::from_fn(&[b, d], |_| rng.normal());
    let other = Tensor::from_fn(&[b, d], |_| rng.normal());

    // |P| = 1 with every sample narrated
    let mut g = Graph::<f64>::new();
    let (v, t) = (g.leaf(video.clone()), g.leaf(other.clone()));
    let nce = nce_loss(&mut g, v, t, &cfg)?;
    let pairing = BatchPairing { text_present: vec![true; b], positives: vec![1; b], slots: 1 };
    let mil = mil_nce_loss(&mut g, v, t, &pairing, &cfg)?.loss;
    let gap = (g.value(nce).item() - g.value(mil).item()).abs();

    // absent samples receive no gradient through the MIL-NCE term
    let mut g = Graph::<f64>::new();
    let v = g.leaf(video);
    let present = [true, false, true, false, true, false];
    let t = g.leaf(Tensor::from_fn(&[3 * 2, d], |_| rng.normal()));
    let pairing = BatchPairing { text_present: present.to_vec(), positives: vec![2, 1, 2], slots: 2 };
    let mil = mil_nce_loss(&mut g, v, t, &pairing, &cfg)?.loss;
    let mut grads = g.backward(mil)?;
    let gv = grads.take(v);
    let absent_rows_zero = (0..b)
        .filter(|&i| !present[i])
        .all(|i| gv.data()[i * d..(i + 1) * d].iter().all(|x| x.to_bits() == 0));

    // a batch with no text leaves every text-tower gradient at exactly zero
    let model = VattModel::<f64>::build(ModelConfig::micro(false), 7)?;
    let batch = silent_batch(7)?;
    let silent = batch.len() >= 2 && batch.text_present().iter().all(|p| !p);
    let out = loss_and_grads(&model, &batch, &TrainConfig::default(), &mut Rng::new(1))?;
    let text_params: Vec<_> = out
        .grads
        .iter()
        .filter(|(id, _)| {
            let name = &model.store.get(*id).name;
            name.starts_with("text.") || name.starts_with("heads.text_vt")
        })
        .collect();
    let tower_zero = !text_params.is_empty()
        && text_params.iter().all(|(_, gt)| gt.data().iter().all(|x| x.to_bits() == 0));
    Ok((
        gap <= 1e-6 && absent_rows_zero && silent && tower_zero,
        format!(
            "|MIL(|P|=1) - NCE| = {gap:.1e}; absent-row grads zero: {absent_rows_zero}; \
             {} text-tower tensors all zero: {tower_zero}",
            text_params.len()
        ),
    ))
}

fn schedule() -> Outcome {
    let s = Schedule::default();
    let (w, total) = (s.warmup_steps, s.total_steps);
    let at_warmup = lr_at(w, &s);
    let at_end = lr_at(total, &s);
    // one-sided linear extrapolations of each branch onto its boundary
    let gaps = [
        (2.0 * lr_at(w - 1, &s) - lr_at(w - 2, &s) - at_warmup).abs(),
        (2.0 * lr_at(w + 1, &s) - lr_at(w + 2, &s) - at_warmup).abs(),
        (2.0 * lr_at(total - 1, &s) - lr_at(total - 2, &s) - at_end).abs(),
    ];
    let worst = gaps.iter().copied().fold(0.0, f64::max);
    Ok((
        at_warmup == 1e-4 && at_end == 5e-5 && lr_at(0, &s) == 0.0 && worst <= 1e-12,
        format!("lr({w}) = {at_warmup:e}, lr({total}) = {at_end:e}, worst boundary gap {worst:.1e}"),
    ))
}

fn short_trainer(seed: u64) -> Result<Trainer> {
    let spec = SyntheticSpec { seed, ..SyntheticSpec::default() };
    Trainer::new(ModelConfig::tiny(false), TrainConfig::default(), spec, 32, seed)
}

fn losses_of(trainer: &mut Trainer, steps: u64) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    trainer.run(steps, |_, s| out.push(s.loss.to_bits()))?;
    Ok(out)
}

fn determinism() -> Outcome {
    let a = losses_of(&mut short_trainer(3)?, 10)?;
    let b = losses_of(&mut short_trainer(3)?, 10)?;

    let mut first = short_trainer(3)?;
    let head = losses_of(&mut first, 5)?;
    let snap = first.snapshot();
    let bytes = snap.to_bytes()?;
    let round_trip = NamedTensors::from_bytes(&bytes)?.to_bytes()? == bytes;

    let dir = tempfile::tempdir().map_err(vatt_core::Error::from)?;
    let path = dir.path().join("ckpt.vatt");
    first.save(&path)?;
    let mut resumed = short_trainer(3)?;
    resumed.resume(&path)?;
    let restored = resumed.snapshot().to_bytes()? == bytes;
    let tail = losses_of(&mut resumed, 5)?;

    let mut uninterrupted = short_trainer(3)?;
    losses_of(&mut uninterrupted, 10)?;
    let same_weights = uninterrupted.snapshot().to_bytes()? == resumed.snapshot().to_bytes()?;
    let continued = head == a[..5] && tail == a[5..];
    Ok((
        a == b && round_trip && restored && continued && same_weights,
        format!(
            "repeat run bit-identical: {}; checkpoint round-trip: {round_trip}; restore: {restored}; \
             resumed losses: {continued}; final weights: {same_weights}",
            a == b
        ),
    ))
}

fn separable_probe() -> Result<(f64, u64)> {
    let (classes, d, n) = (4, 16, 256);
    let mut rng = Rng::new(5);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = Tensor::from_fn(&[n, d], |i| {
        let (row, col) = (i / d, i % d);
        let centre = if col == labels[row] { 2.0 } else { 0.0 };
        centre + 0.3 * rng.normal()
    });
    let mut probe = LowRankClassifier::standard(d, classes, &mut Rng::new(6))?;
    let mut acc = 0.0;
    for step in 1..=2000 {
        probe.step(&features, &labels, &mut rng)?;
        if step % 50 == 0 {
            acc = probe.accuracy(&features, &labels)?;
            if acc >= 0.99 {
                return Ok((acc, step));
            }
        }
    }
    Ok((acc, 2000))
}

fn utilities() -> Outcome {
    let mut rng = Rng::new(11);
    let (x1, y1, x2, y2) = (vec![1.0, -2.0, 0.5], vec![1.0, 0.0], vec![-3.0, 4.0, 0.5], vec![0.0, 1.0]);
    let mut sum = 0.0;
    let mut convex = true;
    for _ in 0..10_000 {
        let (x, y, a) = mixup(&x1, &y1, &x2, &y2, &mut rng)?;
        sum += a;
        let mix = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| a * u + (1.0 - a) * v).collect::<Vec<f64>>();
        convex &= (0.0..=1.0).contains(&a) && x == mix(&x1, &x2) && y == mix(&y1, &y2);
        convex &= x.iter().zip(x1.iter().zip(&x2)).all(|(v, (p, q))| *v >= p.min(*q) && *v <= p.max(*q));
    }
    let mean = sum / 10_000.0;

    let smooth = label_smooth(&[1.0, 0.0], 0.1)?;
    let smooth_ok = (smooth[0] - 0.95).abs() <= 1e-12 && (smooth[1] - 0.05).abs() <= 1e-12;

    let table = Tensor::from_fn(&[14, 3], |i| (i % 3) as f64 - 0.5 * rng.normal());
    let identity = interpolate_positional(&table, 14)? == table;
    let ramp = Tensor::from_fn(&[8, 2], |i| {
        let (r, c) = ((i / 2) as f64, (i % 2) as f64);
        0.25 * r - 1.5 + c * (2.0 - r)
    });
    let mut ramp_err: f64 = 0.0;
    for m in [3, 11, 20] {
        let out = interpolate_positional(&ramp, m)?;
        for i in 0..m {
            let r = i as f64 * 7.0 / (m - 1) as f64;
            for c in 0..2 {
                let expect = 0.25 * r - 1.5 + c as f64 * (2.0 - r);
                ramp_err = ramp_err.max((out.data()[i * 2 + c] - expect).abs());
            }
        }
    }

    let (acc, steps) = separable_probe()?;
    Ok((
        (mean - 0.5).abs() <= 0.02 && convex && smooth_ok && identity && ramp_err <= 1e-12 && acc >= 0.99,
        format!(
            "mixup mean {mean:.4}, convex {convex}; smoothing {smooth:?}; interp identity {identity}, \
             ramp err {ramp_err:.1e}; probe {:.1}% after {steps} steps",
            100.0 * acc
        ),
    ))
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![
        report(1, "gradient checks", gradients()),
        report(2, "parameter census", census()),
        report(3, "video token geometry", token_geometry()),
        report(4, "droptoken flops", flops()),
    ];
    let specific = train_tiny(false);
    results.push(report(5, "modality-specific separation", specific_separation(&specific)));
    results.push(report(6, "zero-shot retrieval", retrieval(&specific)));
    let agnostic = train_tiny(true);
    results.push(report(7, "modality-agnostic separation", agnostic_separation(&agnostic)));
    results.push(report(8, "mil-nce and text absence", losses()));
    results.push(report(9, "learning-rate schedule", schedule()));
    results.push(report(10, "determinism and resume", determinism()));
    results.push(report(11, "mixup, smoothing, interpolation, probe", utilities()));
    let failed: Vec<usize> = (1..=results.len()).filter(|&i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

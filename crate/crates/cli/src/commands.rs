use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use vatt_core::data::{fixture, ClipSample, SyntheticWorld};
use vatt_core::evalbench::{
    activation_profile, embed_clips, embeddings_csv, evaluate_retrieval, metric_line, retrieval_pool,
    separation_reports, triplet_flops,
};
use vatt_core::numerics::{Rng, Tensor};
use vatt_core::tokenizers::VideoClip;
use vatt_core::training::{
    check_geometry, checkpoint_step, gradcheck_suite, load_model_weights, LowRankClassifier, NamedTensors,
    SuiteOptions, Trainer, VattModel, HELDOUT_SPLIT, TRAIN_SPLIT,
};

use crate::config::{ConfigError, RunConfig};

/// Process exit status of a failed command.
#[derive(Debug)]
pub enum Failure {
    Check(String),
    Config(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Check(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Check(m) | Failure::Config(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<vatt_core::Error> for Failure {
    fn from(e: vatt_core::Error) -> Self {
        match e {
            vatt_core::Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

/// Run-wide context shared by every command.
pub struct Run {
    pub command: &'static str,
    pub cfg: RunConfig,
    pub threads: usize,
}

impl Run {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    /// Writes `manifest.txt`, which parses back as a config.
    pub fn write_manifest(&self) -> Outcome {
        fs::create_dir_all(&self.cfg.out)?;
        let mut lines = vec![
            format!("run.command={}", self.command),
            format!("run.build={}", build_hash()),
            format!("run.threads={}", self.threads),
        ];
        lines.extend(self.cfg.render());
        fs::write(self.out("manifest.txt"), lines.join("\n") + "\n")?;
        Ok(())
    }
}

/// Package version and CRC-32 of the running executable.
pub fn build_hash() -> String {
    let exe = std::env::current_exe().and_then(fs::read).unwrap_or_default();
    format!("{}-{:08x}", env!("CARGO_PKG_VERSION"), crc32fast::hash(&exe))
}

/// Prints each line and appends it to `sink`.
struct Emitter {
    sink: fs::File,
}

impl Emitter {
    fn create(path: &Path) -> Result<Self, Failure> {
        Ok(Emitter { sink: fs::File::create(path)? })
    }

    fn line(&mut self, s: &str) -> Outcome {
        println!("{s}");
        writeln!(self.sink, "{s}")?;
        Ok(())
    }
}

pub fn pretrain(run: &Run, resume: Option<&Path>) -> Outcome {
    let cfg = &run.cfg;
    let mut trainer = Trainer::new(cfg.model()?, cfg.train.clone(), cfg.data.clone(), cfg.train_streams, cfg.seed()?)?;
    if let Some(p) = resume {
        trainer.resume(p)?;
    }
    let ckpt = run.out("checkpoint.vatt");
    let mut metrics = Emitter::create(&run.out("metrics.txt"))?;
    let every = cfg.metrics_every.max(1);
    while trainer.step() < cfg.steps {
        let stats = trainer.train_one()?;
        let s = trainer.step();
        if s % every == 0 {
            metrics.line(&metric_line("loss", s, stats.loss))?;
            metrics.line(&metric_line("lr", s, stats.lr))?;
        }
        if cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    trainer.save(&ckpt)?;
    Ok(())
}

pub fn gradcheck(run: &Run, inject_fault: bool) -> Outcome {
    let cfg = &run.cfg;
    let opts = SuiteOptions {
        max_coords: (cfg.gradcheck_max_coords > 0).then_some(cfg.gradcheck_max_coords),
        drop_rates: cfg.gradcheck_drop_rates.clone(),
        corrupt: inject_fault.then_some(1.01),
        seed: cfg.seed()?,
        ..Default::default()
    };
    let lines = gradcheck_suite(&opts)?;
    let mut report = Emitter::create(&run.out("gradcheck.txt"))?;
    let mut offending = Vec::new();
    for l in &lines {
        let mut s = format!(
            "check={} max_rel_err={:.3e} coords={} status={}",
            l.name,
            l.max_rel_err,
            l.coords,
            if l.pass { "pass" } else { "fail" }
        );
        if !l.pass {
            let who = l.worst.clone().unwrap_or_else(|| l.name.clone());
            s.push_str(&format!(" worst={who}"));
            offending.push(who);
        }
        report.line(&s)?;
    }
    let worst = lines.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    let status = if offending.is_empty() { "pass" } else { "fail" };
    report.line(&format!("gradcheck status={status} checks={} max_rel_err={worst:.3e}", lines.len()))?;
    if offending.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for: {}", offending.join(", "))))
    }
}

pub fn flops(run: &Run) -> Outcome {
    let model = run.cfg.model()?;
    let mut csv = String::from(
        "drop_rate,tokens,token_projection,attention_projections,attention_mix,mlp,heads,total\n",
    );
    for &r in &run.cfg.drop_rates {
        let t = triplet_flops(&model, r)?.total();
        csv.push_str(&format!(
            "{r},{},{},{},{},{},{},{}\n",
            t.tokens, t.token_projection, t.attention_projections, t.attention_mix, t.mlp, t.heads, t.total
        ));
    }
    print!("{csv}");
    fs::write(run.out("flops.csv"), csv)?;
    Ok(())
}

/// Model built from the run seed, with weights from `checkpoint` when given.
/// Returns the checkpoint's step (0 without one).
fn frozen_model(run: &Run, checkpoint: Option<&Path>) -> Result<(VattModel<f32>, u64), Failure> {
    let cfg = &run.cfg;
    let model_cfg = cfg.model()?;
    check_geometry(&model_cfg, &cfg.data)?;
    let mut model = VattModel::build(model_cfg, cfg.seed()?)?;
    let step = match checkpoint {
        Some(p) => {
            let ckpt = NamedTensors::load(p)?;
            load_model_weights(&mut model, &ckpt)?;
            checkpoint_step(&ckpt)?
        }
        None => 0,
    };
    Ok((model, step))
}

fn clips_of(world: &SyntheticWorld, split: u64, count: usize) -> Vec<ClipSample> {
    let per = world.spec.stream_len.max(1);
    world
        .generate_streams(split, count.div_ceil(per))
        .into_iter()
        .flat_map(|s| s.clips)
        .take(count)
        .collect()
}

pub fn eval(run: &Run, checkpoint: Option<&Path>) -> Outcome {
    let cfg = &run.cfg;
    let (model, step) = frozen_model(run, checkpoint)?;
    let world = SyntheticWorld::new(cfg.data.clone())?;
    let clips = clips_of(&world, HELDOUT_SPLIT, cfg.eval_pool);
    let refs: Vec<&ClipSample> = clips.iter().collect();
    let emb = embed_clips(&model, &refs, cfg.chunk)?;
    let sep = separation_reports(&emb)?;
    let mut metrics = Emitter::create(&run.out("metrics.txt"))?;
    metrics.line(&metric_line("auc_va", step, sep.va.auc))?;
    fs::write(run.out("hist_va_pos.csv"), sep.va.positive.to_csv())?;
    fs::write(run.out("hist_va_neg.csv"), sep.va.negative.to_csv())?;
    if let Some(vt) = &sep.vt {
        metrics.line(&metric_line("auc_vt", step, vt.auc))?;
        fs::write(run.out("hist_vt_pos.csv"), vt.positive.to_csv())?;
        fs::write(run.out("hist_vt_neg.csv"), vt.negative.to_csv())?;
    }
    let mut rng = Rng::stream(cfg.seed()?, 0xe7a1);
    let pool = retrieval_pool(&world, cfg.retrieval_pool, &mut rng);
    let r = evaluate_retrieval(&model, &pool, cfg.chunk)?;
    metrics.line(&metric_line("recall_at_10", step, r.recall_at_10))?;
    metrics.line(&metric_line("median_rank", step, r.median_rank as f64))?;
    let videos: Vec<&VideoClip> = clips.iter().map(|c| &c.video).collect();
    let audio: Vec<&[f32]> = clips.iter().map(|c| c.waveform.as_slice()).collect();
    let texts: Vec<&[usize]> = clips.iter().filter_map(|c| c.text.as_deref()).collect();
    let profile = activation_profile(&model, &videos, &audio, &texts, cfg.chunk)?;
    fs::write(run.out("activations.csv"), profile.to_csv())?;
    fs::write(run.out("embeddings_video.csv"), embeddings_csv(&emb.video_z0))?;
    fs::write(run.out("embeddings_audio.csv"), embeddings_csv(&emb.audio_z0))?;
    fs::write(run.out("embeddings_text.csv"), embeddings_csv(&emb.text_z0))?;
    Ok(())
}

fn video_features(model: &VattModel<f32>, clips: &[ClipSample], chunk: usize) -> Result<(Tensor<f64>, Vec<usize>), Failure> {
    let refs: Vec<&ClipSample> = clips.iter().collect();
    let emb = embed_clips(model, &refs, chunk)?;
    Ok((emb.video_z0, clips.iter().map(|c| c.concept).collect()))
}

pub fn probe(run: &Run, checkpoint: Option<&Path>) -> Outcome {
    let cfg = &run.cfg;
    let (model, step) = frozen_model(run, checkpoint)?;
    let world = SyntheticWorld::new(cfg.data.clone())?;
    let (train_x, train_y) = video_features(&model, &clips_of(&world, TRAIN_SPLIT, cfg.probe_clips), cfg.chunk)?;
    let (test_x, test_y) = video_features(&model, &clips_of(&world, HELDOUT_SPLIT, cfg.probe_clips), cfg.chunk)?;
    let mut rng = Rng::stream(cfg.seed()?, 0x9a0be);
    let d = train_x.shape()[1];
    let mut probe = LowRankClassifier::standard(d, cfg.data.concepts, &mut rng)?;
    let n = train_y.len();
    let batch = cfg.probe_batch.clamp(1, n);
    let mut loss = f64::NAN;
    for _ in 0..cfg.probe_steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
        let x = Tensor::new(&[batch, d], idx.iter().flat_map(|&i| train_x.row(i).to_vec()).collect())?;
        let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
        loss = probe.step(&x, &y, &mut rng)?;
    }
    let mut metrics = Emitter::create(&run.out("metrics.txt"))?;
    metrics.line(&metric_line("probe_loss", step, loss))?;
    metrics.line(&metric_line("probe_train_accuracy", step, probe.accuracy(&train_x, &train_y)?))?;
    metrics.line(&metric_line("probe_test_accuracy", step, probe.accuracy(&test_x, &test_y)?))?;
    Ok(())
}

pub fn gen_data(run: &Run) -> Outcome {
    let cfg = &run.cfg;
    let world = SyntheticWorld::new(cfg.data.clone())?;
    let streams = world.generate_streams(TRAIN_SPLIT, cfg.gen_streams);
    let path = run.out("synthetic.vattsyn");
    let file = std::io::BufWriter::new(fs::File::create(&path)?);
    fixture::write_streams(file, &streams)?;
    let clips: usize = streams.iter().map(|s| s.clips.len()).sum();
    println!("streams={} clips={clips} path={}", streams.len(), path.display());
    Ok(())
}

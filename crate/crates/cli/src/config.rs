use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use vatt_core::data::{AugmentConfig, SyntheticSpec};
use vatt_core::encoder::EncoderConfig;
use vatt_core::training::{micro_data_spec, ModelConfig, ShareMode, TrainConfig};

/// A config problem, located at a line of the file when it came from one.
#[derive(Debug, thiserror::Error)]
#[error("{}{field}: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(line: Option<usize>, field: &str, message: impl Into<String>) -> Self {
        ConfigError { line, field: field.to_string(), message: message.into() }
    }
}

/// Everything a command needs, fully resolved.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub share: String,
    pub video: Option<String>,
    pub audio: Option<String>,
    pub text: Option<String>,
    pub d_va: Option<usize>,
    pub d_vt: Option<usize>,
    pub train: TrainConfig,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub metrics_every: u64,
    pub train_streams: usize,
    pub data: SyntheticSpec,
    pub drop_rates: Vec<f64>,
    pub eval_pool: usize,
    pub retrieval_pool: usize,
    pub chunk: usize,
    pub probe_steps: u64,
    pub probe_batch: usize,
    pub probe_clips: usize,
    pub gradcheck_max_coords: usize,
    pub gradcheck_drop_rates: Vec<f64>,
    pub gen_streams: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl RunConfig {
    fn for_preset(preset: &str) -> Self {
        let data = if preset == "micro" { micro_data_spec(0) } else { SyntheticSpec::default() };
        RunConfig {
            preset: preset.to_string(),
            share: "specific".into(),
            video: None,
            audio: None,
            text: None,
            d_va: None,
            d_vt: None,
            train: TrainConfig::default(),
            steps: 100,
            checkpoint_every: 0,
            metrics_every: 1,
            train_streams: 256,
            data,
            drop_rates: vec![0.0, 0.25, 0.5, 0.75],
            eval_pool: 512,
            retrieval_pool: 100,
            chunk: 64,
            probe_steps: 2000,
            probe_batch: 64,
            probe_clips: 512,
            gradcheck_max_coords: 16,
            gradcheck_drop_rates: vec![0.0, 0.25, 0.5, 0.75],
            gen_streams: 16,
            seed: None,
            out: PathBuf::from("vatt-out"),
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys prefixed
    /// `run.` are written into manifests and ignored on input.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(Some(i + 1), line, "expected `key = value`"))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(ConfigError::new(Some(i + 1), "", "empty key"));
            }
            if entries.iter().any(|(_, k2, _): &(usize, String, String)| k2 == key) {
                return Err(ConfigError::new(Some(i + 1), key, "set more than once"));
            }
            entries.push((i + 1, key.to_string(), v.trim().to_string()));
        }
        let preset = match entries.iter().find(|e| e.1 == "model.preset") {
            Some((line, _, v)) => {
                let p = v.to_ascii_lowercase();
                if EncoderConfig::preset(&p).is_none() {
                    return Err(ConfigError::new(Some(*line), "model.preset", format!("unknown preset `{v}`")));
                }
                p
            }
            None => "tiny".into(),
        };
        let mut cfg = Self::for_preset(&preset);
        for (line, key, value) in &entries {
            cfg.set(key, value).map_err(|m| ConfigError::new(Some(*line), key, m))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "model.preset" => {}
            "model.share" => match v {
                "specific" | "agnostic" => self.share = v.into(),
                _ => return Err(format!("expected `specific` or `agnostic`, got `{v}`")),
            },
            "model.video" | "model.audio" | "model.text" => {
                if EncoderConfig::preset(v).is_none() {
                    return Err(format!("unknown preset `{v}`"));
                }
                let slot = match key {
                    "model.video" => &mut self.video,
                    "model.audio" => &mut self.audio,
                    _ => &mut self.text,
                };
                *slot = Some(v.to_ascii_lowercase());
            }
            "model.d_va" => self.d_va = Some(num(v)?),
            "model.d_vt" => self.d_vt = Some(num(v)?),
            "train.batch" => t.batch = num(v)?,
            "train.drop_rate" => t.drop_rate = num(v)?,
            "train.augment" => t.augment = flag(v)?.then(AugmentConfig::default),
            "train.steps" => self.steps = num(v)?,
            "train.checkpoint_every" => self.checkpoint_every = num(v)?,
            "train.metrics_every" => self.metrics_every = num(v)?,
            "train.streams" => self.train_streams = num(v)?,
            "loss.temperature" => t.loss.temperature = num(v)?,
            "loss.lambda" => t.loss.mil_weight = num(v)?,
            "loss.bidirectional" => t.loss.bidirectional = flag(v)?,
            "schedule.base_lr" => t.schedule.base_lr = num(v)?,
            "schedule.final_lr" => t.schedule.final_lr = num(v)?,
            "schedule.warmup_steps" => t.schedule.warmup_steps = num(v)?,
            "schedule.total_steps" => t.schedule.total_steps = num(v)?,
            "data.concepts" => d.concepts = num(v)?,
            "data.variants" => d.variants = num(v)?,
            "data.frames" => d.frames = num(v)?,
            "data.height" => d.height = num(v)?,
            "data.width" => d.width = num(v)?,
            "data.samples" => d.samples = num(v)?,
            "data.audio_period" => d.audio_period = num(v)?,
            "data.vocab" => d.vocab = num(v)?,
            "data.text_len" => d.text_len = num(v)?,
            "data.video_noise" => d.video_noise = num(v)?,
            "data.audio_noise" => d.audio_noise = num(v)?,
            "data.text_noise" => d.text_noise = num(v)?,
            "data.stream_len" => d.stream_len = num(v)?,
            "data.segment_len" => d.segment_len = num(v)?,
            "data.text_absent" => d.text_absent = num(v)?,
            "data.audio_only" => d.audio_only = num(v)?,
            "data.seed" => d.seed = num(v)?,
            "flops.drop_rates" => self.drop_rates = rates(v)?,
            "eval.pool" => self.eval_pool = num(v)?,
            "eval.retrieval_pool" => self.retrieval_pool = num(v)?,
            "eval.chunk" => self.chunk = num(v)?,
            "probe.steps" => self.probe_steps = num(v)?,
            "probe.batch" => self.probe_batch = num(v)?,
            "probe.clips" => self.probe_clips = num(v)?,
            "gradcheck.max_coords" => self.gradcheck_max_coords = num(v)?,
            "gradcheck.drop_rates" => self.gradcheck_drop_rates = rates(v)?,
            "gen.streams" => self.gen_streams = num(v)?,
            "seed" => self.seed = Some(num(v)?),
            "out" => self.out = PathBuf::from(v),
            k if k.starts_with("run.") => {}
            _ => return Err("unknown field".into()),
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let enc = |field: &str, o: &Option<String>| -> EncoderConfig {
            EncoderConfig::preset(o.as_deref().unwrap_or(&self.preset))
                .unwrap_or_else(|| panic!("{field} preset validated at parse time"))
        };
        let (v, a, t) = (enc("model.video", &self.video), enc("model.audio", &self.audio), enc("model.text", &self.text));
        let share = if self.share == "agnostic" {
            if v != a || a != t {
                return Err(ConfigError::new(None, "model.share", "agnostic mode needs one encoder preset"));
            }
            ShareMode::Agnostic(v)
        } else {
            ShareMode::Specific { video: v, audio: a, text: t }
        };
        let agnostic = share.is_agnostic();
        let mut m = match self.preset.as_str() {
            "tiny" => ModelConfig::tiny(agnostic),
            "micro" => ModelConfig::micro(agnostic),
            _ => ModelConfig::full_scale(share.clone()),
        };
        m.share = share;
        if let Some(x) = self.d_va {
            m.d_va = x;
        }
        if let Some(x) = self.d_vt {
            m.d_vt = x;
        }
        m.validate().map_err(|e| ConfigError::new(None, "model", e.to_string()))?;
        Ok(m)
    }

    /// The seed, from `--seed` or the file.
    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.seed.ok_or_else(|| ConfigError::new(None, "seed", "a seed is required (config `seed = N` or --seed)"))
    }

    /// `key=value` lines that parse back into this configuration.
    pub fn render(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut kv = |k: &str, v: &dyn Display| out.push(format!("{k}={v}"));
        let (t, d) = (&self.train, &self.data);
        kv("model.preset", &self.preset);
        kv("model.share", &self.share);
        for (k, o) in [("model.video", &self.video), ("model.audio", &self.audio), ("model.text", &self.text)] {
            if let Some(v) = o {
                kv(k, v);
            }
        }
        if let Some(v) = self.d_va {
            kv("model.d_va", &v);
        }
        if let Some(v) = self.d_vt {
            kv("model.d_vt", &v);
        }
        kv("loss.temperature", &t.loss.temperature);
        kv("loss.lambda", &t.loss.mil_weight);
        kv("loss.bidirectional", &t.loss.bidirectional);
        kv("train.batch", &t.batch);
        kv("train.drop_rate", &t.drop_rate);
        kv("train.augment", &t.augment.is_some());
        kv("train.steps", &self.steps);
        kv("train.checkpoint_every", &self.checkpoint_every);
        kv("train.metrics_every", &self.metrics_every);
        kv("train.streams", &self.train_streams);
        kv("schedule.base_lr", &t.schedule.base_lr);
        kv("schedule.final_lr", &t.schedule.final_lr);
        kv("schedule.warmup_steps", &t.schedule.warmup_steps);
        kv("schedule.total_steps", &t.schedule.total_steps);
        kv("data.concepts", &d.concepts);
        kv("data.variants", &d.variants);
        kv("data.frames", &d.frames);
        kv("data.height", &d.height);
        kv("data.width", &d.width);
        kv("data.samples", &d.samples);
        kv("data.audio_period", &d.audio_period);
        kv("data.vocab", &d.vocab);
        kv("data.text_len", &d.text_len);
        kv("data.video_noise", &d.video_noise);
        kv("data.audio_noise", &d.audio_noise);
        kv("data.text_noise", &d.text_noise);
        kv("data.stream_len", &d.stream_len);
        kv("data.segment_len", &d.segment_len);
        kv("data.text_absent", &d.text_absent);
        kv("data.audio_only", &d.audio_only);
        kv("data.seed", &d.seed);
        kv("flops.drop_rates", &join(&self.drop_rates));
        kv("eval.pool", &self.eval_pool);
        kv("eval.retrieval_pool", &self.retrieval_pool);
        kv("eval.chunk", &self.chunk);
        kv("probe.steps", &self.probe_steps);
        kv("probe.batch", &self.probe_batch);
        kv("probe.clips", &self.probe_clips);
        kv("gradcheck.max_coords", &self.gradcheck_max_coords);
        kv("gradcheck.drop_rates", &join(&self.gradcheck_drop_rates));
        kv("gen.streams", &self.gen_streams);
        if let Some(s) = self.seed {
            kv("seed", &s);
        }
        kv("out", &self.out.display());
        out
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

/// Comma-separated drop rates, each in `[0, 1)`.
pub fn rates(v: &str) -> Result<Vec<f64>, String> {
    let out: Vec<f64> = v.split(',').map(|s| num::<f64>(s.trim())).collect::<Result<_, _>>()?;
    if out.is_empty() {
        return Err("empty rate list".into());
    }
    if let Some(r) = out.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(format!("drop rate {r} outside [0, 1)"));
    }
    Ok(out)
}

fn join(rates: &[f64]) -> String {
    rates.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

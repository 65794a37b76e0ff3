use std::path::Path;

use super::adam::Adam;
use super::checkpoint::NamedTensors;
use super::model::{ModelConfig, VattModel};
use super::step::{train_step, StepStats, TrainConfig};
use crate::data::{Stream, SyntheticSpec, SyntheticWorld, TripletBatch, MIL_POSITIVES};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Stream splits of the synthetic world.
pub const TRAIN_SPLIT: u64 = 1;
pub const HELDOUT_SPLIT: u64 = 2;

const STEP_STREAM: u64 = 0x57e9 << 40;

/// Pre-training loop over a fixed pool of synthetic streams.
///
/// Step `k` draws its batch, augmentation and DropToken choices from RNG
/// stream `k` of the run seed, so a restored run continues exactly as an
/// uninterrupted one would.
pub struct Trainer {
    pub model: VattModel<f32>,
    pub opt: Adam<f32>,
    pub cfg: TrainConfig,
    pub world: SyntheticWorld,
    pub streams: Vec<Stream>,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, data: SyntheticSpec, train_streams: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        check_geometry(&model_cfg, &data)?;
        let model = VattModel::build(model_cfg, seed)?;
        let opt = Adam::new(&model.store);
        let world = SyntheticWorld::new(data)?;
        let streams = world.generate_streams(TRAIN_SPLIT, train_streams);
        Ok(Trainer { model, opt, cfg, world, streams, seed })
    }

    /// Updates applied so far.
    pub fn step(&self) -> u64 {
        self.opt.step
    }

    pub fn next_batch(&self, rng: &mut Rng) -> Result<TripletBatch> {
        let mut batch = TripletBatch::sample(&self.streams, self.cfg.batch, MIL_POSITIVES, rng)?;
        if let Some(aug) = &self.cfg.augment {
            batch.augment(aug, rng);
        }
        Ok(batch)
    }

    pub fn train_one(&mut self) -> Result<StepStats> {
        let mut rng = Rng::stream(self.seed, STEP_STREAM | self.opt.step);
        let batch = self.next_batch(&mut rng)?;
        train_step(&mut self.model, &mut self.opt, &batch, &self.cfg, &mut rng)
    }

    /// Runs `steps` updates, handing each step's statistics to `on_step`.
    pub fn run(&mut self, steps: u64, mut on_step: impl FnMut(u64, &StepStats)) -> Result<()> {
        for _ in 0..steps {
            let stats = self.train_one()?;
            on_step(self.opt.step, &stats);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> NamedTensors {
        let mut out = NamedTensors::default();
        for (id, p) in self.model.store.iter() {
            out.push(format!("param/{}", p.name), p.value.clone());
            if p.trainable {
                out.push(format!("adam.m/{}", p.name), self.opt.m[id.index()].clone());
                out.push(format!("adam.v/{}", p.name), self.opt.v[id.index()].clone());
            }
        }
        let step = self.opt.step;
        let parts = [(step & 0xffff) as f32, ((step >> 16) & 0xffff) as f32, (step >> 32) as f32];
        out.push("meta/step", Tensor::new(&[3], parts.to_vec()).expect("3 values"));
        out
    }

    pub fn restore(&mut self, ckpt: &NamedTensors) -> Result<()> {
        let mut store = self.model.store.clone();
        let mut opt = self.opt.clone();
        for (id, p) in self.model.store.iter() {
            let check = |name: String| -> Result<Tensor<f32>> {
                let t = ckpt.require(&name)?;
                if t.shape() != p.value.shape() {
                    return Err(Error::Incompatible(format!(
                        "{name} has shape {:?}, model expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                Ok(t.clone())
            };
            *store.value_mut(id) = check(format!("param/{}", p.name))?;
            if p.trainable {
                opt.m[id.index()] = check(format!("adam.m/{}", p.name))?;
                opt.v[id.index()] = check(format!("adam.v/{}", p.name))?;
            }
        }
        opt.step = checkpoint_step(ckpt)?;
        self.model.store = store;
        self.opt = opt;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.snapshot().save(path)
    }

    pub fn resume(&mut self, path: &Path) -> Result<()> {
        self.restore(&NamedTensors::load(path)?)
    }
}

/// Optimizer updates recorded in a training checkpoint.
pub fn checkpoint_step(ckpt: &NamedTensors) -> Result<u64> {
    let s = ckpt.require("meta/step")?.data();
    if s.len() != 3 {
        return Err(Error::Checkpoint("meta/step must hold 3 values".into()));
    }
    Ok(s[0] as u64 | (s[1] as u64) << 16 | (s[2] as u64) << 32)
}

/// Model weights only, for evaluation and probing.
pub fn load_model_weights(model: &mut VattModel<f32>, ckpt: &NamedTensors) -> Result<()> {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = format!("param/{}", model.store.get(id).name);
        let t = ckpt.require(&name)?;
        if t.shape() != model.store.value(id).shape() {
            return Err(Error::Incompatible(format!(
                "{name} has shape {:?}, model expects {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = t.clone();
    }
    Ok(())
}

pub fn check_geometry(model: &ModelConfig, data: &SyntheticSpec) -> Result<()> {
    let v = &model.video;
    if (v.frames, v.height, v.width) != (data.frames, data.height, data.width) {
        return Err(Error::Incompatible(format!(
            "model expects {}×{}×{} video, data produces {}×{}×{}",
            v.frames, v.height, v.width, data.frames, data.height, data.width
        )));
    }
    if model.audio.samples != data.samples {
        return Err(Error::Incompatible(format!(
            "model expects {} audio samples, data produces {}",
            model.audio.samples, data.samples
        )));
    }
    if model.vocab < data.vocab {
        return Err(Error::Incompatible(format!(
            "model vocabulary {} is smaller than the data vocabulary {}",
            model.vocab, data.vocab
        )));
    }
    Ok(())
}

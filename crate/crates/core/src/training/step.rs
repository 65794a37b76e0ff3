use super::adam::Adam;
use super::model::{ModelInputs, VattModel};
use super::schedule::Schedule;
use crate::data::{AugmentConfig, TripletBatch};
use crate::error::{Error, Result};
use crate::heads::Mode;
use crate::losses::{total_loss, LossConfig};
use crate::numerics::{Graph, Rng, Scalar, Tensor};
use crate::params::ParamId;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    /// DropToken rate for video and audio.
    pub drop_rate: f64,
    pub loss: LossConfig,
    pub schedule: Schedule,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            drop_rate: 0.5,
            loss: LossConfig::default(),
            schedule: Schedule::default(),
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch)));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::InvalidRate(self.drop_rate));
        }
        self.loss.validate()?;
        self.schedule.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub nce: f64,
    pub mil_nce: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Loss of `batch` and the gradient of every trainable parameter (zeros
/// where the loss does not reach), plus the batch-norm statistics to commit.
pub struct LossAndGrads<T> {
    pub stats: StepStats,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub bn_updates: crate::heads::BnUpdates<T>,
}

pub fn loss_and_grads<T: Scalar>(
    model: &VattModel<T>,
    batch: &TripletBatch,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossAndGrads<T>> {
    let mut g = Graph::new();
    let pv = model.store.bind(&mut g);
    let inputs = ModelInputs {
        videos: batch.samples.iter().map(|s| &s.video).collect(),
        audio: batch.samples.iter().map(|s| s.waveform.as_slice()).collect(),
        texts: batch.text_rows(),
    };
    let out = model.forward(&mut g, &pv, &inputs, Mode::Train, cfg.drop_rate, rng)?;
    let losses = total_loss(&mut g, &out.embeddings, &batch.pairing(), &cfg.loss)?;
    let loss = g.value(losses.total).item().as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("training loss (batch fingerprint {:08x})", batch.fingerprint()),
        });
    }
    let mut grads_all = g.backward(losses.total)?;
    let mut sq = 0.0;
    let mut grads = Vec::new();
    for (id, p) in model.store.iter() {
        if !p.trainable {
            continue;
        }
        let gt = grads_all.take(pv[id]);
        sq += gt.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        grads.push((id, gt));
    }
    Ok(LossAndGrads {
        stats: StepStats {
            loss,
            nce: g.value(losses.nce).item().as_f64(),
            mil_nce: g.value(losses.mil_nce).item().as_f64(),
            grad_norm: sq.sqrt(),
            lr: 0.0,
        },
        grads,
        bn_updates: out.bn_updates,
    })
}

/// Forward, backward and one Adam update at the learning rate of update
/// number `opt.step + 1`.
pub fn train_step<T: Scalar>(
    model: &mut VattModel<T>,
    opt: &mut Adam<T>,
    batch: &TripletBatch,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepStats> {
    let LossAndGrads { mut stats, grads, bn_updates } = loss_and_grads(model, batch, cfg, rng)?;
    let lr = cfg.schedule.lr_at(opt.step + 1);
    opt.step(&mut model.store, &grads, lr)?;
    bn_updates.apply(&mut model.store);
    stats.lr = lr;
    Ok(stats)
}

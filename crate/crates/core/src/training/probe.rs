use super::adam::Adam;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Tensor};
use crate::params::{ParamId, ParamStore};

pub const PROBE_COMPONENTS: usize = 128;
pub const PROBE_SAMPLE_RATE: f64 = 0.1;
pub const PROBE_LR: f64 = 5e-4;

/// Linear classifier on frozen features with weight `C = U·V`
/// (`U: d × n`, `V: n × c`). Each training step uses a random subset of the
/// `n` components.
#[derive(Clone, Debug)]
pub struct LowRankClassifier {
    pub store: ParamStore<f64>,
    pub u: ParamId,
    pub v: ParamId,
    pub sample_rate: f64,
    pub lr: f64,
    opt: Adam<f64>,
}

impl LowRankClassifier {
    pub fn new(d: usize, classes: usize, components: usize, sample_rate: f64, rng: &mut Rng) -> Result<Self> {
        if d == 0 || classes < 2 || components == 0 {
            return Err(Error::Config(format!(
                "probe needs d > 0, at least 2 classes and 1 component (got {d}, {classes}, {components})"
            )));
        }
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(Error::Config(format!("component sample rate must lie in (0, 1], got {sample_rate}")));
        }
        let mut store = ParamStore::new();
        let u = store.add_trunc_normal("probe.u", &[d, components], rng);
        let v = store.add_trunc_normal("probe.v", &[components, classes], rng);
        let opt = Adam::new(&store);
        Ok(LowRankClassifier { store, u, v, sample_rate, lr: PROBE_LR, opt })
    }

    /// `n = 128` components sampled at 10%.
    pub fn standard(d: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        Self::new(d, classes, PROBE_COMPONENTS, PROBE_SAMPLE_RATE, rng)
    }

    pub fn components(&self) -> usize {
        self.store.value(self.u).shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.store.value(self.v).shape()[1]
    }

    /// Each component kept with probability `sample_rate`; redrawn until at
    /// least one survives.
    pub fn sample_components(&self, rng: &mut Rng) -> Vec<usize> {
        let n = self.components();
        loop {
            let picked: Vec<usize> = (0..n).filter(|_| rng.bernoulli(self.sample_rate)).collect();
            if !picked.is_empty() {
                return picked;
            }
        }
    }

    /// Effective weight `U·V`, `d × c`.
    pub fn weight(&self) -> Tensor<f64> {
        self.store.value(self.u).matmul(self.store.value(self.v)).expect("probe factor shapes agree")
    }

    pub fn predict(&self, features: &Tensor<f64>) -> Result<Vec<usize>> {
        let logits = features.matmul(&self.weight())?;
        Ok(logits
            .rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, features: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// One cross-entropy step on `features: B × d` over a fresh component
    /// sample; returns the batch loss.
    pub fn step(&mut self, features: &Tensor<f64>, labels: &[usize], rng: &mut Rng) -> Result<f64> {
        let c = self.classes();
        if features.rank() != 2 || features.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::Shape {
                op: "probe step",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidLabels(format!("label {l} with {c} classes")));
        }
        let picked = self.sample_components(rng);
        let b = labels.len();
        let mut g = Graph::new();
        let pv = self.store.bind(&mut g);
        let x = g.constant(features.clone());
        let ut = g.transpose(pv[self.u])?;
        let us = g.gather(ut, &picked)?;
        let us = g.transpose(us)?;
        let vs = g.gather(pv[self.v], &picked)?;
        let h = g.matmul(x, us)?;
        let logits = g.matmul(h, vs)?;
        let logp = g.log_softmax(logits);
        let onehot = g.constant(Tensor::from_fn(&[b, c], |i| if labels[i / c] == i % c { 1.0 } else { 0.0 }));
        let picked_logp = g.mul(logp, onehot)?;
        let total = g.sum(picked_logp);
        let loss = g.scale(total, -1.0 / b as f64);
        let mut grads = g.backward(loss)?;
        let updates = vec![(self.u, grads.take(pv[self.u])), (self.v, grads.take(pv[self.v]))];
        let value = g.value(loss).item();
        self.opt.step(&mut self.store, &updates, self.lr)?;
        Ok(value)
    }
}

/// Mean of per-view logits.
pub fn multiview_logits(views: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = views.first().ok_or(Error::Empty("view list"))?;
    if let Some(v) = views.iter().find(|v| v.len() != first.len()) {
        return Err(Error::Shape { op: "multiview_logits", lhs: vec![first.len()], rhs: vec![v.len()] });
    }
    let n = views.len() as f64;
    Ok((0..first.len()).map(|i| views.iter().map(|v| v[i]).sum::<f64>() / n).collect())
}

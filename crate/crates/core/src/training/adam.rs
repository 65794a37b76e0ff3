use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::{ParamId, ParamStore};

/// Bias-corrected Adam with one moment pair per store entry. Buffers keep
/// empty moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = |trainable: bool, t: &Tensor<T>| {
            if trainable {
                Tensor::zeros(t.shape())
            } else {
                Tensor::zeros(&[0])
            }
        };
        let (m, v) = store
            .iter()
            .map(|(_, p)| (zeros(p.trainable, &p.value), zeros(p.trainable, &p.value)))
            .unzip();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One update of every parameter listed in `grads`. Nothing is modified
    /// when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if g.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: g.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            if let Some(i) = g.first_non_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of {} element {i}", p.name),
                });
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(lr / (1.0 - self.beta1.powf(t)));
        let corr2 = T::of(1.0 / (1.0 - self.beta2.powf(t)));
        let eps = T::of(self.eps);
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.value_mut(*id).data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + c1 * gk;
                v[k] = b2 * v[k] + c2 * gk * gk;
                w[k] = w[k] - step_size * m[k] / ((v[k] * corr2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

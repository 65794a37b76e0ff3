//! Hierarchical common-space projection.
//!
//! Video and audio meet in the video-audio space; the video-text space is
//! reached from the video-audio embedding, never straight from the backbone.

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Graph, Rng, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore, ParamVars};

pub const D_VA: usize = 512;
pub const D_VT: usize = 256;
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormParams {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Self {
        BatchNormParams {
            gain: store.add_ones(&format!("{prefix}.gain"), &[d]),
            bias: store.add_zeros(&format!("{prefix}.bias"), &[d]),
            running_mean: store.add_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[d])),
            running_var: store.add_buffer(&format!("{prefix}.running_var"), Tensor::full(&[d], T::one())),
        }
    }

    fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        x: Var,
        mode: Mode,
        updates: &mut BnUpdates<T>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, pv[self.gain], pv[self.bias], BN_EPS)?;
                updates.0.push((self.clone(), stats));
                Ok(y)
            }
            Mode::Infer => {
                let mean = g.value(pv[self.running_mean]).map(|m| -m);
                let rstd = g
                    .value(pv[self.running_var])
                    .map(|v| T::one() / (v + T::of(BN_EPS)).sqrt());
                let (mean, rstd) = (g.constant(mean), g.constant(rstd));
                let centered = g.add_bcast(x, mean)?;
                let xhat = g.mul_bcast(centered, rstd)?;
                let y = g.mul_bcast(xhat, pv[self.gain])?;
                g.add_bcast(y, pv[self.bias])
            }
        }
    }
}

/// Batch statistics gathered by train-mode batch norms, to be folded into
/// the running statistics once the step is committed.
#[derive(Debug)]
pub struct BnUpdates<T>(Vec<(BatchNormParams, BatchStats<T>)>);

impl<T: Scalar> Default for BnUpdates<T> {
    fn default() -> Self {
        BnUpdates(Vec::new())
    }
}

impl<T: Scalar> BnUpdates<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = T::of(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (bn, stats) in &self.0 {
            for (id, batch) in [(bn.running_mean, &stats.mean), (bn.running_var, &stats.var)] {
                for (r, &b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = m * *r + one_m * b;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadsConfig {
    pub d_video: usize,
    pub d_audio: usize,
    pub d_text: usize,
    pub d_va: usize,
    pub d_vt: usize,
}

impl HeadsConfig {
    /// Projection widths with the default common-space sizes.
    pub fn with_backbones(d_video: usize, d_audio: usize, d_text: usize) -> Self {
        HeadsConfig { d_video, d_audio, d_text, d_va: D_VA, d_vt: D_VT }
    }

    pub fn param_count(&self) -> usize {
        let bn = |d: usize| 2 * d;
        let HeadsConfig { d_video, d_audio, d_text, d_va, d_vt } = *self;
        d_video * d_va + bn(d_va) + d_va * d_va + bn(d_va) + d_audio * d_va + bn(d_va) + d_va * d_vt + bn(d_vt) + d_text * d_vt + bn(d_vt)
    }
}

/// `g_{v→va}`: linear → BN → ReLU → linear → BN; the other three heads are
/// linear → BN. Linear layers carry no bias since BN follows.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub cfg: HeadsConfig,
    pub video_va_1: ParamId,
    pub video_va_bn1: BatchNormParams,
    pub video_va_2: ParamId,
    pub video_va_bn2: BatchNormParams,
    pub audio_va: ParamId,
    pub audio_va_bn: BatchNormParams,
    pub video_vt: ParamId,
    pub video_vt_bn: BatchNormParams,
    pub text_vt: ParamId,
    pub text_vt_bn: BatchNormParams,
}

/// The four common-space embeddings (rows are samples). `text_vt` may cover a
/// different set of samples than the other three.
#[derive(Clone, Copy, Debug)]
pub struct CommonSpaceEmbedding {
    pub video_va: Var,
    pub audio_va: Var,
    pub video_vt: Var,
    pub text_vt: Var,
}

impl ProjectionHeads {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: HeadsConfig, rng: &mut Rng) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        ProjectionHeads {
            cfg,
            video_va_1: store.add_trunc_normal(&p("video_va.w1"), &[cfg.d_video, cfg.d_va], rng),
            video_va_bn1: BatchNormParams::new(store, &p("video_va.bn1"), cfg.d_va),
            video_va_2: store.add_trunc_normal(&p("video_va.w2"), &[cfg.d_va, cfg.d_va], rng),
            video_va_bn2: BatchNormParams::new(store, &p("video_va.bn2"), cfg.d_va),
            audio_va: store.add_trunc_normal(&p("audio_va.w"), &[cfg.d_audio, cfg.d_va], rng),
            audio_va_bn: BatchNormParams::new(store, &p("audio_va.bn"), cfg.d_va),
            video_vt: store.add_trunc_normal(&p("video_vt.w"), &[cfg.d_va, cfg.d_vt], rng),
            video_vt_bn: BatchNormParams::new(store, &p("video_vt.bn"), cfg.d_vt),
            text_vt: store.add_trunc_normal(&p("text_vt.w"), &[cfg.d_text, cfg.d_vt], rng),
            text_vt_bn: BatchNormParams::new(store, &p("text_vt.bn"), cfg.d_vt),
        }
    }

    fn check_width<T: Scalar>(g: &Graph<T>, x: Var, d: usize, what: &'static str) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != d {
            return Err(Error::Shape { op: what, lhs: s.to_vec(), rhs: vec![d] });
        }
        Ok(())
    }

    /// Video aggregation outputs `B × d_video` → `(z_{v,va}, z_{v,vt})`.
    pub fn project_video<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        z: Var,
        mode: Mode,
        updates: &mut BnUpdates<T>,
    ) -> Result<(Var, Var)> {
        Self::check_width(g, z, self.cfg.d_video, "project video")?;
        let h = g.matmul(z, pv[self.video_va_1])?;
        let h = self.video_va_bn1.apply(g, pv, h, mode, updates)?;
        let h = g.relu(h);
        let h = g.matmul(h, pv[self.video_va_2])?;
        let va = self.video_va_bn2.apply(g, pv, h, mode, updates)?;
        let vt = self.video_va_to_vt(g, pv, va, mode, updates)?;
        Ok((va, vt))
    }

    /// `g_{v→vt}` applied to a video-audio embedding.
    pub fn video_va_to_vt<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        va: Var,
        mode: Mode,
        updates: &mut BnUpdates<T>,
    ) -> Result<Var> {
        let h = g.matmul(va, pv[self.video_vt])?;
        self.video_vt_bn.apply(g, pv, h, mode, updates)
    }

    pub fn project_audio<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        z: Var,
        mode: Mode,
        updates: &mut BnUpdates<T>,
    ) -> Result<Var> {
        Self::check_width(g, z, self.cfg.d_audio, "project audio")?;
        let h = g.matmul(z, pv[self.audio_va])?;
        self.audio_va_bn.apply(g, pv, h, mode, updates)
    }

    pub fn project_text<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        z: Var,
        mode: Mode,
        updates: &mut BnUpdates<T>,
    ) -> Result<Var> {
        Self::check_width(g, z, self.cfg.d_text, "project text")?;
        let h = g.matmul(z, pv[self.text_vt])?;
        self.text_vt_bn.apply(g, pv, h, mode, updates)
    }

    /// All four embeddings from the three aggregation outputs.
    #[allow(clippy::too_many_arguments)]
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        z_video: Var,
        z_audio: Var,
        z_text: Var,
        mode: Mode,
        updates: &mut BnUpdates<T>,
    ) -> Result<CommonSpaceEmbedding> {
        let (video_va, video_vt) = self.project_video(g, pv, z_video, mode, updates)?;
        let audio_va = self.project_audio(g, pv, z_audio, mode, updates)?;
        let text_vt = self.project_text(g, pv, z_text, mode, updates)?;
        Ok(CommonSpaceEmbedding { video_va, audio_va, video_vt, text_vt })
    }
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape { op: "cosine_similarity", lhs: vec![a.len()], rhs: vec![b.len()] });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn census_matches_store() {
        let cfg = HeadsConfig { d_video: 6, d_audio: 5, d_text: 4, d_va: 3, d_vt: 2 };
        let mut store = ParamStore::<f32>::new();
        ProjectionHeads::new(&mut store, "h", cfg, &mut Rng::new(0));
        assert_eq!(store.trainable_count(), cfg.param_count());
    }
}

//! NCE and MIL-NCE over in-batch negatives, plus the fine-tuning helpers
//! (mixup, label smoothing, per-batch class balancing).

use crate::error::{Error, Result};
use crate::heads::CommonSpaceEmbedding;
use crate::numerics::{Graph, Rng, Scalar, Var};

pub const MIXUP_BETA: f64 = 5.0;
pub const LABEL_SMOOTHING: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    /// Weight of the MIL-NCE term.
    pub mil_weight: f64,
    /// Count both `(v_i, a_j)` and `(v_j, a_i)`, `j ≠ i`, as negatives of `i`.
    pub bidirectional: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            mil_weight: 1.0,
            bidirectional: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.mil_weight >= 0.0) {
            return Err(Error::Config(format!("MIL-NCE weight must be >= 0, got {}", self.mil_weight)));
        }
        Ok(())
    }
}

/// Which batch samples carry text, and how many of the `slots` positive text
/// slots each text-bearing sample fills.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPairing {
    pub text_present: Vec<bool>,
    /// One entry per text-bearing sample, in batch order; each in `1..=slots`.
    pub positives: Vec<usize>,
    pub slots: usize,
}

impl BatchPairing {
    pub fn present_indices(&self) -> Vec<usize> {
        self.text_present
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }

    /// Validity of every `(sample, slot)` text row, length `present × slots`.
    pub fn slot_mask(&self) -> Vec<bool> {
        self.positives
            .iter()
            .flat_map(|&n| (0..self.slots).map(move |s| s < n))
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let present = self.text_present.iter().filter(|&&p| p).count();
        if present != self.positives.len() {
            return Err(Error::Config(format!(
                "{present} text-bearing samples but {} positive counts",
                self.positives.len()
            )));
        }
        if let Some(&n) = self.positives.iter().find(|&&n| n == 0 || n > self.slots) {
            return Err(Error::Config(format!("positive count {n} outside 1..={}", self.slots)));
        }
        Ok(())
    }
}

/// Mean over anchors of `−log(Σ_pos exp(s/τ) / (Σ_pos exp(s/τ) + Σ_neg exp(s/τ)))`.
///
/// `anchors` is `A × d`, `candidates` is `(A·slots) × d` where rows
/// `i·slots..(i+1)·slots` belong to anchor `i`, and `valid` flags the rows in
/// use. Both are ℓ2-normalized here.
fn grouped_contrastive<T: Scalar>(
    g: &mut Graph<T>,
    anchors: Var,
    candidates: Var,
    slots: usize,
    valid: &[bool],
    cfg: &LossConfig,
) -> Result<Var> {
    let a = g.shape(anchors)[0];
    let za = g.l2_normalize(anchors);
    let zc = g.l2_normalize(candidates);
    let zc_t = g.transpose(zc)?;
    let sim = g.matmul(za, zc_t)?;
    let sim = g.scale(sim, T::of(1.0 / cfg.temperature));
    let cols = a * slots;
    let (logits, width) = if cfg.bidirectional {
        // row i, column p·A + j of the reverse block is s(anchor j, candidate i·slots + p)
        let rev = g.transpose(sim)?;
        let rev = g.reshape(rev, &[a, slots * a])?;
        (g.concat(&[sim, rev], 1)?, 2 * cols)
    } else {
        (sim, cols)
    };
    let mut pos = vec![false; a * width];
    let mut all = vec![false; a * width];
    for i in 0..a {
        let row = i * width;
        for j in 0..a {
            for p in 0..slots {
                let c = j * slots + p;
                if valid[c] {
                    all[row + c] = true;
                    if j == i {
                        pos[row + c] = true;
                    }
                }
                if cfg.bidirectional && j != i && valid[i * slots + p] {
                    all[row + cols + p * a + j] = true;
                }
            }
        }
    }
    let num = g.masked_logsumexp(logits, pos)?;
    let den = g.masked_logsumexp(logits, all)?;
    let per_anchor = g.sub(den, num)?;
    Ok(g.mean(per_anchor))
}

/// NCE between `video: B × d` and `audio: B × d` with in-batch negatives.
pub fn nce_loss<T: Scalar>(g: &mut Graph<T>, video: Var, audio: Var, cfg: &LossConfig) -> Result<Var> {
    let (sv, sa) = (g.shape(video).to_vec(), g.shape(audio).to_vec());
    if sv.len() != 2 || sv != sa {
        return Err(Error::Shape { op: "nce_loss", lhs: sv, rhs: sa });
    }
    if sv[0] < 2 {
        return Err(Error::InsufficientNegatives(sv[0]));
    }
    grouped_contrastive(g, video, audio, 1, &vec![true; sv[0]], cfg)
}

#[derive(Clone, Copy, Debug)]
pub struct MilNceOutput {
    pub loss: Var,
    /// No sample in the batch had text; `loss` is a constant 0.
    pub all_absent: bool,
}

/// MIL-NCE between `video: B × d` and the positive text sets of the
/// text-bearing samples, `texts: (present·slots) × d`.
///
/// Text-absent samples take no part at all: they are neither anchors nor
/// negatives, so nothing flows back into their text inputs.
pub fn mil_nce_loss<T: Scalar>(
    g: &mut Graph<T>,
    video: Var,
    texts: Var,
    pairing: &BatchPairing,
    cfg: &LossConfig,
) -> Result<MilNceOutput> {
    pairing.validate()?;
    let sv = g.shape(video).to_vec();
    if sv.len() != 2 || sv[0] != pairing.text_present.len() {
        return Err(Error::Shape { op: "mil_nce_loss", lhs: sv, rhs: vec![pairing.text_present.len()] });
    }
    let present = pairing.present_indices();
    if present.is_empty() {
        let zero = g.constant(crate::numerics::Tensor::scalar(T::zero()));
        return Ok(MilNceOutput { loss: zero, all_absent: true });
    }
    let st = g.shape(texts).to_vec();
    if st.len() != 2 || st[0] != present.len() * pairing.slots || st[1] != sv[1] {
        return Err(Error::Shape {
            op: "mil_nce_loss texts",
            lhs: st,
            rhs: vec![present.len() * pairing.slots, sv[1]],
        });
    }
    let anchors = g.gather(video, &present)?;
    let loss = grouped_contrastive(g, anchors, texts, pairing.slots, &pairing.slot_mask(), cfg)?;
    Ok(MilNceOutput { loss, all_absent: false })
}

#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub nce: Var,
    pub mil_nce: Var,
    pub all_text_absent: bool,
}

/// `NCE(z_{v,va}, z_{a,va}) + λ·MIL-NCE(z_{v,vt}, {z_{t,vt}})`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    emb: &CommonSpaceEmbedding,
    pairing: &BatchPairing,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let nce = nce_loss(g, emb.video_va, emb.audio_va, cfg)?;
    let mil = mil_nce_loss(g, emb.video_vt, emb.text_vt, pairing, cfg)?;
    let weighted = g.scale(mil.loss, T::of(cfg.mil_weight));
    let total = g.add(nce, weighted)?;
    Ok(TotalLoss {
        total,
        nce,
        mil_nce: mil.loss,
        all_text_absent: mil.all_absent,
    })
}

/// Convex combination `α·a + (1 − α)·b` of two input/label pairs.
pub fn mixup_with(x1: &[f64], y1: &[f64], x2: &[f64], y2: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x1.len() != x2.len() {
        return Err(Error::Shape { op: "mixup inputs", lhs: vec![x1.len()], rhs: vec![x2.len()] });
    }
    if y1.len() != y2.len() {
        return Err(Error::Shape { op: "mixup labels", lhs: vec![y1.len()], rhs: vec![y2.len()] });
    }
    let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| alpha * p + (1.0 - alpha) * q).collect();
    Ok((mix(x1, x2), mix(y1, y2)))
}

/// Mixup with `α ~ Beta(5, 5)`. Returns the mixed pair and the `α` used.
pub fn mixup(
    x1: &[f64],
    y1: &[f64],
    x2: &[f64],
    y2: &[f64],
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let alpha = rng.beta(MIXUP_BETA, MIXUP_BETA);
    let (x, y) = mixup_with(x1, y1, x2, y2, alpha)?;
    Ok((x, y, alpha))
}

/// `(1 − α)·onehot + α/c`.
pub fn label_smooth(onehot: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let ones = onehot.iter().filter(|&&v| v == 1.0).count();
    let zeros = onehot.iter().filter(|&&v| v == 0.0).count();
    if onehot.is_empty() || ones != 1 || ones + zeros != onehot.len() {
        return Err(Error::InvalidLabels(format!("not a one-hot vector: {onehot:?}")));
    }
    let c = onehot.len() as f64;
    Ok(onehot.iter().map(|&v| (1.0 - alpha) * v + alpha / c).collect())
}

/// Per-sample loss weights: the mean, over a sample's labels, of the inverse
/// number of batch samples carrying that label.
pub fn balance_weights(labels: &[Vec<bool>]) -> Result<Vec<f64>> {
    let classes = labels.first().map_or(0, Vec::len);
    if labels.iter().any(|l| l.len() != classes) {
        return Err(Error::InvalidLabels("ragged multi-hot batch".into()));
    }
    let mut counts = vec![0usize; classes];
    for l in labels {
        for (c, &on) in counts.iter_mut().zip(l) {
            *c += on as usize;
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let inv: Vec<f64> = l
                .iter()
                .zip(&counts)
                .filter(|(&on, _)| on)
                .map(|(_, &n)| 1.0 / n as f64)
                .collect();
            if inv.is_empty() {
                return Err(Error::InvalidLabels(format!("sample {i} has no label")));
            }
            Ok(inv.iter().sum::<f64>() / inv.len() as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn eval_nce(v: &[f64], a: &[f64], b: usize, d: usize, cfg: &LossConfig) -> f64 {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[b, d], v).unwrap());
        let a = g.constant(Tensor::from_f64(&[b, d], a).unwrap());
        let l = nce_loss(&mut g, v, a, cfg).unwrap();
        g.value(l).item()
    }

    #[test]
    fn two_orthogonal_pairs_at_unit_temperature() {
        let cfg = LossConfig { temperature: 1.0, ..Default::default() };
        let e = [1.0, 0.0, 0.0, 1.0];
        let got = eval_nce(&e, &e, 2, 2, &cfg);
        let expect = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn identical_vectors_give_log_of_candidate_count() {
        let cfg = LossConfig::default();
        for b in [2, 3, 7] {
            let v = vec![0.3; b * 4];
            let got = eval_nce(&v, &v, b, 4, &cfg);
            assert!((got - ((2 * b - 1) as f64).ln()).abs() < 1e-9, "b={b}");
        }
        let uni = LossConfig { bidirectional: false, ..cfg };
        let v = vec![0.3; 12];
        assert!((eval_nce(&v, &v, 3, 4, &uni) - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn small_temperature_drives_loss_to_zero() {
        let cfg = LossConfig { temperature: 1e-3, ..Default::default() };
        let v = [1.0, 0.0, 0.0, 1.0];
        assert!(eval_nce(&v, &v, 2, 2, &cfg) < 1e-12);
    }

    #[test]
    fn single_sample_has_no_negatives() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        assert!(matches!(
            nce_loss(&mut g, v, v, &LossConfig::default()),
            Err(Error::InsufficientNegatives(1))
        ));
    }

    #[test]
    fn label_smoothing() {
        let s = label_smooth(&[1.0, 0.0], 0.1).unwrap();
        assert!((s[0] - 0.95).abs() < 1e-15 && (s[1] - 0.05).abs() < 1e-15);
        assert_eq!(label_smooth(&[0.0, 1.0, 0.0], 0.0).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(label_smooth(&[1.0, 1.0], 0.1).is_err());
        assert!(label_smooth(&[0.5, 0.5], 0.1).is_err());
    }

    #[test]
    fn balance_weight_cases() {
        let shared = vec![vec![true, false]; 4];
        assert_eq!(balance_weights(&shared).unwrap(), vec![0.25; 4]);
        let unique: Vec<Vec<bool>> = (0..3).map(|i| (0..3).map(|c| c == i).collect()).collect();
        assert_eq!(balance_weights(&unique).unwrap(), vec![1.0; 3]);
        assert!(balance_weights(&[vec![false, false]]).is_err());
    }

    #[test]
    fn mixup_extremes() {
        let (x, y) = mixup_with(&[1.0, 2.0], &[1.0, 0.0], &[3.0, 4.0], &[0.0, 1.0], 1.0).unwrap();
        assert_eq!((x, y), (vec![1.0, 2.0], vec![1.0, 0.0]));
        let (x, y) = mixup_with(&[1.0, 2.0], &[1.0, 0.0], &[3.0, 4.0], &[0.0, 1.0], 0.5).unwrap();
        assert_eq!((x, y), (vec![2.0, 3.0], vec![0.5, 0.5]));
        assert!(mixup_with(&[1.0], &[1.0], &[1.0, 2.0], &[1.0], 0.5).is_err());
    }
}

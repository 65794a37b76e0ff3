use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::tokenizers::{kept_count, TEXT_MAX_LEN};
use crate::training::ModelConfig;

/// Analytical forward cost of one sample. A multiply-add counts as 2 FLOPs;
/// only matrix products are counted (normalization, softmax, activations and
/// residual adds are not).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub token_projection: u64,
    /// Q, K, V and output projections: `8·N·d²` per layer.
    pub attention_projections: u64,
    /// Scores `QKᵀ` and the weighted sum of values: `4·N²·d` per layer.
    pub attention_mix: u64,
    /// `4·N·d·mlp` per layer.
    pub mlp: u64,
    pub heads: u64,
    pub total: u64,
    /// Sequence length `N` seen by the encoder, aggregation token included.
    pub tokens: usize,
}

impl FlopReport {
    fn finish(mut self) -> Self {
        self.total = self.token_projection + self.attention_projections + self.attention_mix + self.mlp + self.heads;
        self
    }

    /// Component-wise sum.
    pub fn combine(reports: &[FlopReport]) -> FlopReport {
        let mut out = FlopReport::default();
        for r in reports {
            out.token_projection += r.token_projection;
            out.attention_projections += r.attention_projections;
            out.attention_mix += r.attention_mix;
            out.mlp += r.mlp;
            out.heads += r.heads;
            out.tokens += r.tokens;
        }
        out.finish()
    }
}

/// Encoder cost for `tokens` surviving tokens plus the aggregation token.
pub fn count_flops(cfg: &EncoderConfig, tokens: usize) -> FlopReport {
    let n = tokens as u64 + 1;
    let (d, mlp, l) = (cfg.hidden as u64, cfg.mlp as u64, cfg.layers as u64);
    FlopReport {
        attention_projections: l * 8 * n * d * d,
        attention_mix: l * 4 * n * n * d,
        mlp: l * 4 * n * d * mlp,
        tokens: tokens + 1,
        ..Default::default()
    }
    .finish()
}

fn linear(inputs: usize, outputs: usize) -> u64 {
    2 * inputs as u64 * outputs as u64
}

/// Per-modality cost of one triplet forward at `drop_rate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletFlops {
    pub video: FlopReport,
    pub audio: FlopReport,
    pub text: FlopReport,
}

impl TripletFlops {
    pub fn total(&self) -> FlopReport {
        FlopReport::combine(&[self.video, self.audio, self.text])
    }
}

/// Video and audio are tokenized in full, then DropToken shortens the
/// sequences the encoders see. Text is never dropped and is counted at its
/// maximum length. Heads are charged to the modality they project.
pub fn triplet_flops(cfg: &ModelConfig, drop_rate: f64) -> Result<TripletFlops> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::InvalidRate(drop_rate));
    }
    let (ev, ea, et) = (cfg.share.video(), cfg.share.audio(), cfg.share.text());
    let nv = cfg.video.token_count();
    let na = cfg.audio.token_count();
    let mut video = count_flops(ev, kept_count(nv, drop_rate));
    video.token_projection = nv as u64 * linear(cfg.video.patch_dim(), ev.hidden);
    video.heads = linear(ev.hidden, cfg.d_va) + linear(cfg.d_va, cfg.d_va) + linear(cfg.d_va, cfg.d_vt);
    let mut audio = count_flops(ea, kept_count(na, drop_rate));
    audio.token_projection = na as u64 * linear(cfg.audio.segment, ea.hidden);
    audio.heads = linear(ea.hidden, cfg.d_va);
    let mut text = count_flops(et, TEXT_MAX_LEN);
    text.heads = linear(et.hidden, cfg.d_vt);
    Ok(TripletFlops {
        video: video.finish(),
        audio: audio.finish(),
        text: text.finish(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_is_sum_of_components() {
        let r = count_flops(&EncoderConfig::SMALL, 100);
        assert_eq!(r.total, r.attention_projections + r.attention_mix + r.mlp);
        assert_eq!(r.tokens, 101);
    }

    #[test]
    fn drop_rate_one_rejected() {
        assert!(triplet_flops(&ModelConfig::tiny(false), 1.0).is_err());
    }
}

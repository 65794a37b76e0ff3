use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::{Error, Result};
use crate::heads::{BnUpdates, CommonSpaceEmbedding, HeadsConfig, Mode, ProjectionHeads, D_VA, D_VT};
use crate::numerics::{Graph, Rng, Scalar, Tensor};
use crate::params::{ParamStore, ParamVars};
use crate::tokenizers::{
    drop_token, trim_padding, AudioGeometry, AudioTokenizer, TextTokenizer, TokenSequence, VideoClip, VideoGeometry,
    VideoTokenizer,
};

/// Backbone layout: one encoder per modality, or a single encoder serving
/// all three. Tokenizers are always per modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ShareMode {
    Specific {
        video: EncoderConfig,
        audio: EncoderConfig,
        text: EncoderConfig,
    },
    Agnostic(EncoderConfig),
}

impl ShareMode {
    pub fn video(&self) -> &EncoderConfig {
        match self {
            ShareMode::Specific { video, .. } => video,
            ShareMode::Agnostic(c) => c,
        }
    }

    pub fn audio(&self) -> &EncoderConfig {
        match self {
            ShareMode::Specific { audio, .. } => audio,
            ShareMode::Agnostic(c) => c,
        }
    }

    pub fn text(&self) -> &EncoderConfig {
        match self {
            ShareMode::Specific { text, .. } => text,
            ShareMode::Agnostic(c) => c,
        }
    }

    pub fn is_agnostic(&self) -> bool {
        matches!(self, ShareMode::Agnostic(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub share: ShareMode,
    pub video: VideoGeometry,
    pub audio: AudioGeometry,
    pub vocab: usize,
    pub d_va: usize,
    pub d_vt: usize,
    /// Token widths `[video, audio, text]`; each must equal the hidden width
    /// of the encoder it feeds. `None` takes the encoder widths.
    pub token_dims: Option<[usize; 3]>,
}

impl ModelConfig {
    /// Full-scale geometry: 32×224×224 video with 4×16×16 patches, 153,600
    /// waveform samples in 128-sample segments, 2¹⁶ words.
    pub fn full_scale(share: ShareMode) -> Self {
        ModelConfig {
            share,
            video: VideoGeometry { frames: 32, height: 224, width: 224, patch: [4, 16, 16] },
            audio: AudioGeometry { samples: 153_600, segment: 128 },
            vocab: 1 << 16,
            d_va: D_VA,
            d_vt: D_VT,
            token_dims: None,
        }
    }

    /// Desk-scale model on the default synthetic geometry.
    pub fn tiny(agnostic: bool) -> Self {
        let c = EncoderConfig::TINY;
        ModelConfig {
            share: if agnostic {
                ShareMode::Agnostic(c)
            } else {
                ShareMode::Specific { video: c, audio: c, text: c }
            },
            video: VideoGeometry { frames: 4, height: 16, width: 16, patch: [2, 4, 4] },
            audio: AudioGeometry { samples: 256, segment: 16 },
            vocab: 256,
            d_va: D_VA,
            d_vt: D_VT,
            token_dims: None,
        }
    }

    /// Smallest configuration, for finite-difference checks: at most 8 tokens
    /// per modality.
    pub fn micro(agnostic: bool) -> Self {
        let c = EncoderConfig::MICRO;
        ModelConfig {
            share: if agnostic {
                ShareMode::Agnostic(c)
            } else {
                ShareMode::Specific { video: c, audio: c, text: c }
            },
            video: VideoGeometry { frames: 4, height: 8, width: 8, patch: [2, 4, 4] },
            audio: AudioGeometry { samples: 32, segment: 4 },
            vocab: 24,
            d_va: 8,
            d_vt: 6,
            token_dims: None,
        }
    }

    pub fn heads(&self) -> HeadsConfig {
        HeadsConfig {
            d_video: self.share.video().hidden,
            d_audio: self.share.audio().hidden,
            d_text: self.share.text().hidden,
            d_va: self.d_va,
            d_vt: self.d_vt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for c in [self.share.video(), self.share.audio(), self.share.text()] {
            c.validate()?;
        }
        if let Some(dims) = self.token_dims {
            let enc = [self.share.video().hidden, self.share.audio().hidden, self.share.text().hidden];
            for (name, (t, e)) in ["video", "audio", "text"].iter().zip(dims.iter().zip(enc)) {
                if *t != e {
                    return Err(Error::Incompatible(format!(
                        "{name} tokens are {t} wide but the encoder expects {e}"
                    )));
                }
            }
        }
        let v = &self.video;
        if v.patch.contains(&0) || v.frames == 0 || v.height == 0 || v.width == 0 {
            return Err(Error::Config("video extents and patch sizes must be positive".into()));
        }
        if self.audio.segment == 0 || self.audio.samples == 0 {
            return Err(Error::Config("audio extents must be positive".into()));
        }
        if self.vocab < 2 || self.d_va == 0 || self.d_vt == 0 {
            return Err(Error::Config("vocabulary and common-space widths must be positive".into()));
        }
        Ok(())
    }

    /// Analytic parameter census without building the model.
    pub fn census(&self) -> Census {
        let (v, a, t) = (self.share.video(), self.share.audio(), self.share.text());
        let video_tok = (self.video.patch_dim() + self.video.positional_rows()) * v.hidden;
        let audio_tok = (self.audio.segment + self.audio.token_count()) * a.hidden;
        let text_embedding = self.vocab * t.hidden;
        let text_bias = t.heads * (2 * crate::tokenizers::TEXT_MAX_LEN - 1);
        let backbones = match &self.share {
            ShareMode::Specific { .. } => vec![v.param_count(), a.param_count(), t.param_count()],
            ShareMode::Agnostic(c) => vec![c.param_count()],
        };
        Census {
            backbones,
            video_tokenizer: video_tok,
            audio_tokenizer: audio_tok,
            text_embedding,
            text_relative_bias: text_bias,
            heads: self.heads().param_count(),
        }
    }
}

/// Trainable-parameter counts by component. `backbones` holds one entry per
/// distinct encoder weight set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Census {
    pub backbones: Vec<usize>,
    pub video_tokenizer: usize,
    pub audio_tokenizer: usize,
    pub text_embedding: usize,
    pub text_relative_bias: usize,
    pub heads: usize,
}

impl Census {
    pub fn backbone_total(&self) -> usize {
        self.backbones.iter().sum()
    }

    pub fn total(&self) -> usize {
        self.backbone_total()
            + self.video_tokenizer
            + self.audio_tokenizer
            + self.text_embedding
            + self.text_relative_bias
            + self.heads
    }

    /// Everything except the text embedding table.
    pub fn total_without_vocabulary(&self) -> usize {
        self.total() - self.text_embedding
    }
}

#[derive(Clone, Debug)]
pub struct VattModel<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub video_tokenizer: VideoTokenizer,
    pub audio_tokenizer: AudioTokenizer,
    pub text_tokenizer: TextTokenizer,
    pub video_encoder: Encoder,
    pub audio_encoder: Encoder,
    pub text_encoder: Encoder,
    pub heads: ProjectionHeads,
}

/// Raw inputs of one forward pass. `texts` may hold a different number of
/// rows than `videos`/`audio` (or none).
#[derive(Clone, Debug, Default)]
pub struct ModelInputs<'a> {
    pub videos: Vec<&'a VideoClip>,
    pub audio: Vec<&'a [f32]>,
    pub texts: Vec<&'a [usize]>,
}

pub struct ForwardOutput<T> {
    pub embeddings: CommonSpaceEmbedding,
    pub bn_updates: BnUpdates<T>,
    pub video: Option<EncoderOutput>,
    pub audio: Option<EncoderOutput>,
    pub text: Option<EncoderOutput>,
}

impl<T: Scalar> VattModel<T> {
    /// Builds and initializes a model from `seed`.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::stream(seed, 0x1417);
        let mut store = ParamStore::new();
        let (dv, da, dt) = (cfg.share.video().hidden, cfg.share.audio().hidden, cfg.share.text().hidden);
        let video_tokenizer = VideoTokenizer::new(&mut store, "video.tokenizer", cfg.video, dv, &mut rng);
        let audio_tokenizer = AudioTokenizer::new(&mut store, "audio.tokenizer", cfg.audio, da, &mut rng);
        let text_tokenizer =
            TextTokenizer::new(&mut store, "text.tokenizer", cfg.vocab, dt, cfg.share.text().heads, &mut rng);
        let (video_encoder, audio_encoder, text_encoder) = match &cfg.share {
            ShareMode::Specific { video, audio, text } => (
                Encoder::new(&mut store, "video.backbone", video, &mut rng)?,
                Encoder::new(&mut store, "audio.backbone", audio, &mut rng)?,
                Encoder::new(&mut store, "text.backbone", text, &mut rng)?,
            ),
            ShareMode::Agnostic(c) => {
                let shared = Encoder::new(&mut store, "backbone", c, &mut rng)?;
                (shared.clone(), shared.clone(), shared)
            }
        };
        let heads = ProjectionHeads::new(&mut store, "heads", cfg.heads(), &mut rng);
        Ok(VattModel {
            cfg,
            store,
            video_tokenizer,
            audio_tokenizer,
            text_tokenizer,
            video_encoder,
            audio_encoder,
            text_encoder,
            heads,
        })
    }

    /// Census counted from the parameter store. Encoders sharing a prefix
    /// are one weight set and are counted once.
    pub fn census(&self) -> Census {
        let mut prefixes: Vec<&str> = Vec::new();
        for e in [&self.video_encoder, &self.audio_encoder, &self.text_encoder] {
            if !prefixes.contains(&e.prefix.as_str()) {
                prefixes.push(&e.prefix);
            }
        }
        let count = |p: &str| self.store.count_prefix(&format!("{p}."));
        let text_bias = self.store.value(self.text_tokenizer.relative_bias).numel();
        Census {
            backbones: prefixes.iter().map(|p| count(p)).collect(),
            video_tokenizer: count("video.tokenizer"),
            audio_tokenizer: count("audio.tokenizer"),
            text_embedding: count("text.tokenizer") - text_bias,
            text_relative_bias: text_bias,
            heads: count("heads"),
        }
    }

    /// Number of distinct encoder weight sets.
    pub fn encoder_weight_sets(&self) -> usize {
        self.census().backbones.len()
    }

    pub fn tokenize_video(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        videos: &[&VideoClip],
        drop_rate: f64,
        rng: &mut Rng,
    ) -> Result<TokenSequence> {
        let seq = self.video_tokenizer.tokenize(g, pv, videos)?;
        drop_token(g, &seq, drop_rate, rng)
    }

    pub fn tokenize_audio(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        audio: &[&[f32]],
        drop_rate: f64,
        rng: &mut Rng,
    ) -> Result<TokenSequence> {
        let seq = self.audio_tokenizer.tokenize(g, pv, audio)?;
        drop_token(g, &seq, drop_rate, rng)
    }

    pub fn tokenize_text(&self, g: &mut Graph<T>, pv: &ParamVars, texts: &[&[usize]]) -> Result<TokenSequence> {
        let seq = self.text_tokenizer.tokenize(g, pv, texts)?;
        trim_padding(g, &seq)
    }

    pub fn encode_video(&self, g: &mut Graph<T>, pv: &ParamVars, seq: &TokenSequence) -> Result<EncoderOutput> {
        self.video_encoder.forward(g, pv, seq, None)
    }

    pub fn encode_audio(&self, g: &mut Graph<T>, pv: &ParamVars, seq: &TokenSequence) -> Result<EncoderOutput> {
        self.audio_encoder.forward(g, pv, seq, None)
    }

    pub fn encode_text(&self, g: &mut Graph<T>, pv: &ParamVars, seq: &TokenSequence) -> Result<EncoderOutput> {
        let bias = pv[self.text_tokenizer.relative_bias];
        self.text_encoder.forward(g, pv, seq, Some(bias))
    }

    /// Tokenize (DropToken on video and audio) → encode → project.
    /// Missing modalities yield empty `0 × d` embeddings.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        inputs: &ModelInputs,
        mode: Mode,
        drop_rate: f64,
        rng: &mut Rng,
    ) -> Result<ForwardOutput<T>> {
        let mut updates = BnUpdates::default();
        let (d_va, d_vt) = (self.cfg.d_va, self.cfg.d_vt);
        let mut out = ForwardOutput {
            embeddings: CommonSpaceEmbedding {
                video_va: g.constant(Tensor::zeros(&[0, d_va])),
                audio_va: g.constant(Tensor::zeros(&[0, d_va])),
                video_vt: g.constant(Tensor::zeros(&[0, d_vt])),
                text_vt: g.constant(Tensor::zeros(&[0, d_vt])),
            },
            bn_updates: BnUpdates::default(),
            video: None,
            audio: None,
            text: None,
        };
        if !inputs.videos.is_empty() {
            let seq = self.tokenize_video(g, pv, &inputs.videos, drop_rate, rng)?;
            let enc = self.encode_video(g, pv, &seq)?;
            let (va, vt) = self.heads.project_video(g, pv, enc.z0, mode, &mut updates)?;
            out.embeddings.video_va = va;
            out.embeddings.video_vt = vt;
            out.video = Some(enc);
        }
        if !inputs.audio.is_empty() {
            let seq = self.tokenize_audio(g, pv, &inputs.audio, drop_rate, rng)?;
            let enc = self.encode_audio(g, pv, &seq)?;
            out.embeddings.audio_va = self.heads.project_audio(g, pv, enc.z0, mode, &mut updates)?;
            out.audio = Some(enc);
        }
        if !inputs.texts.is_empty() {
            let seq = self.tokenize_text(g, pv, &inputs.texts)?;
            let enc = self.encode_text(g, pv, &seq)?;
            out.embeddings.text_vt = self.heads.project_text(g, pv, enc.z0, mode, &mut updates)?;
            out.text = Some(enc);
        }
        out.bn_updates = updates;
        Ok(out)
    }

    /// Copies every tensor from `other`, which must have the same layout.
    pub fn load_weights(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.store.load_from(other)
    }
}

/// Free-function form of [`VattModel::build`].
pub fn build_model<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<VattModel<T>> {
    VattModel::build(cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_census_matches_analytic() {
        for agnostic in [false, true] {
            let cfg = ModelConfig::micro(agnostic);
            let m = VattModel::<f32>::build(cfg.clone(), 0).unwrap();
            assert_eq!(m.census(), cfg.census());
            assert_eq!(m.census().total(), m.store.trainable_count());
        }
    }

    #[test]
    fn token_width_mismatch_is_rejected() {
        let mut cfg = ModelConfig::micro(true);
        cfg.token_dims = Some([16, 16, 32]);
        assert!(matches!(VattModel::<f32>::build(cfg, 0), Err(Error::Incompatible(_))));
    }
}

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::tokenizers::{VideoClip, VIDEO_CHANNELS};

/// Parameters of the synthetic video/audio/text world.
///
/// Every clip carries a hidden `(concept, variant)` latent. Concepts set the
/// coarse appearance of all three modalities; variants add a finer pattern so
/// that individual pairs stay distinguishable within a concept.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub concepts: usize,
    pub variants: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Waveform length in samples.
    pub samples: usize,
    /// Audio period in samples; tone templates repeat with this period.
    pub audio_period: usize,
    pub vocab: usize,
    pub text_len: usize,
    pub video_noise: f64,
    pub audio_noise: f64,
    /// Probability that a text word is replaced by a random filler.
    pub text_noise: f64,
    /// Clips per stream.
    pub stream_len: usize,
    /// Consecutive clips sharing one latent.
    pub segment_len: usize,
    /// Fraction of clips in a narrated stream that carry no text.
    pub text_absent: f64,
    /// Fraction of streams with no narration at all.
    pub audio_only: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            concepts: 8,
            variants: 8,
            frames: 4,
            height: 16,
            width: 16,
            samples: 256,
            audio_period: 16,
            vocab: 256,
            text_len: 6,
            video_noise: 0.1,
            audio_noise: 0.1,
            text_noise: 0.1,
            stream_len: 24,
            segment_len: 6,
            text_absent: 0.1,
            audio_only: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.concepts < 2 {
            return bad(format!("need at least 2 concepts, got {}", self.concepts));
        }
        if self.variants < 1 {
            return bad("need at least 1 variant".into());
        }
        for (name, v) in [
            ("video noise", self.video_noise),
            ("audio noise", self.audio_noise),
            ("text noise", self.text_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        for (name, v) in [("text-absent fraction", self.text_absent), ("audio-only fraction", self.audio_only)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.text_noise > 1.0 {
            return bad(format!("text noise is a probability, got {}", self.text_noise));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.samples == 0 || self.audio_period == 0 {
            return bad("clip extents must be positive".into());
        }
        if self.stream_len == 0 || self.segment_len == 0 {
            return bad("stream and segment lengths must be positive".into());
        }
        if self.text_len < 3 || self.text_len > crate::tokenizers::TEXT_MAX_LEN {
            return bad(format!("text length must lie in 3..=16, got {}", self.text_len));
        }
        let reserved = 1 + self.concepts + self.variants;
        if self.vocab < reserved + 8 {
            return bad(format!("vocabulary of {} leaves fewer than 8 filler words", self.vocab));
        }
        Ok(())
    }

    /// First filler word id; lower ids are pad, concept and variant words.
    pub fn filler_start(&self) -> usize {
        1 + self.concepts + self.variants
    }
}

/// One clip of a stream. `concept` and `variant` are ground truth for tests
/// and evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    pub video: VideoClip,
    pub waveform: Vec<f32>,
    pub text: Option<Vec<usize>>,
    pub timestamp: f64,
    pub concept: usize,
    pub variant: usize,
}

impl ClipSample {
    pub fn has_text(&self) -> bool {
        self.text.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub id: u64,
    pub clips: Vec<ClipSample>,
}

/// Fixed per-latent templates derived from `spec.seed`.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    colors: Vec<[f64; 3]>,
    spatial_freq: Vec<f64>,
    phase: Vec<f64>,
    /// `variants × 4 × 4` signs.
    grids: Vec<[f64; 16]>,
    variant_tones: Vec<Vec<f64>>,
    phrases: Vec<Vec<usize>>,
}

const GRID: usize = 4;

impl SyntheticWorld {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::stream(spec.seed, 0x5eed);
        let colors = (0..spec.concepts)
            .map(|_| {
                let mut c = [0.0; 3];
                for v in &mut c {
                    *v = rng.uniform_in(-1.0, 1.0);
                }
                c
            })
            .collect();
        let spatial_freq = (0..spec.concepts).map(|k| 0.5 + k as f64 * 0.25).collect();
        let phase = (0..spec.concepts).map(|_| rng.uniform_in(0.0, std::f64::consts::TAU)).collect();
        let grids = (0..spec.variants)
            .map(|_| {
                let mut g = [0.0; 16];
                for v in &mut g {
                    *v = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                }
                g
            })
            .collect();
        let variant_tones = (0..spec.variants)
            .map(|_| {
                let raw: Vec<f64> = (0..spec.audio_period).map(|_| rng.normal()).collect();
                let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                raw.into_iter().map(|v| v / peak).collect()
            })
            .collect();
        let fillers = spec.vocab - spec.filler_start();
        let mut phrases = Vec::with_capacity(spec.concepts * spec.variants);
        for c in 0..spec.concepts {
            for v in 0..spec.variants {
                let mut words: Vec<usize> = (0..spec.text_len)
                    .map(|_| spec.filler_start() + rng.below(fillers))
                    .collect();
                words[0] = 1 + c;
                words[spec.text_len / 2] = 1 + spec.concepts + v;
                phrases.push(words);
            }
        }
        Ok(SyntheticWorld {
            spec,
            colors,
            spatial_freq,
            phase,
            grids,
            variant_tones,
            phrases,
        })
    }

    /// Noise-free video for a latent: a concept-colored gradient drifting
    /// across frames plus a variant-specific 4×4 block pattern.
    pub fn video_template(&self, concept: usize, variant: usize) -> VideoClip {
        let s = &self.spec;
        let mut clip = VideoClip::zeros(s.frames, s.height, s.width);
        let (f, ph, color) = (self.spatial_freq[concept], self.phase[concept], self.colors[concept]);
        let grid = &self.grids[variant];
        for t in 0..s.frames {
            for y in 0..s.height {
                for x in 0..s.width {
                    let u = (x as f64 + 0.5 * y as f64) / s.width as f64;
                    let wave = (std::f64::consts::TAU * (f * u + 0.15 * t as f64) + ph).sin();
                    let cell = grid[(y * GRID / s.height) * GRID + x * GRID / s.width];
                    for c in 0..VIDEO_CHANNELS {
                        let v = 0.35 * color[c] + 0.25 * wave * color[c] + 0.3 * cell;
                        let i = clip.index(t, y, x, c);
                        clip.data[i] = v as f32;
                    }
                }
            }
        }
        clip
    }

    /// Noise-free waveform: a concept-frequency sinusoid plus a variant tone,
    /// both periodic in `audio_period`.
    pub fn audio_template(&self, concept: usize, variant: usize) -> Vec<f32> {
        let s = &self.spec;
        let cycles = (concept % (s.audio_period / 2).max(1)) + 1;
        let tone = &self.variant_tones[variant];
        (0..s.samples)
            .map(|n| {
                let p = n % s.audio_period;
                let w = (std::f64::consts::TAU * cycles as f64 * p as f64 / s.audio_period as f64 + self.phase[concept]).cos();
                (0.5 * w + 0.3 * tone[p]) as f32
            })
            .collect()
    }

    pub fn phrase(&self, concept: usize, variant: usize) -> &[usize] {
        &self.phrases[concept * self.spec.variants + variant]
    }

    /// One clip drawn around the templates of `(concept, variant)`.
    pub fn sample_clip(&self, concept: usize, variant: usize, timestamp: f64, with_text: bool, rng: &mut Rng) -> ClipSample {
        let s = &self.spec;
        let mut video = self.video_template(concept, variant);
        for v in &mut video.data {
            *v = (*v as f64 + s.video_noise * rng.normal()).clamp(-1.0, 1.0) as f32;
        }
        let waveform = self
            .audio_template(concept, variant)
            .into_iter()
            .map(|v| (v as f64 + s.audio_noise * rng.normal()).clamp(-1.0, 1.0) as f32)
            .collect();
        let text = with_text.then(|| {
            let fillers = s.vocab - s.filler_start();
            self.phrase(concept, variant)
                .iter()
                .map(|&w| {
                    if rng.bernoulli(s.text_noise) {
                        s.filler_start() + rng.below(fillers)
                    } else {
                        w
                    }
                })
                .collect()
        });
        ClipSample {
            video,
            waveform,
            text,
            timestamp,
            concept,
            variant,
        }
    }

    /// A stream of `stream_len` clips spaced one second apart, made of
    /// segments with a constant latent. Audio-only streams carry no text.
    pub fn generate_stream(&self, id: u64, rng: &mut Rng) -> Stream {
        let s = &self.spec;
        let narrated = !rng.bernoulli(s.audio_only);
        let mut clips = Vec::with_capacity(s.stream_len);
        let mut latent = (0, 0);
        for i in 0..s.stream_len {
            if i % s.segment_len == 0 {
                latent = (rng.below(s.concepts), rng.below(s.variants));
            }
            let with_text = narrated && !rng.bernoulli(s.text_absent);
            clips.push(self.sample_clip(latent.0, latent.1, i as f64, with_text, rng));
        }
        Stream { id, clips }
    }

    /// `count` streams, stream `i` drawn from its own counter-based RNG
    /// stream so any subset can be regenerated independently.
    pub fn generate_streams(&self, split: u64, count: usize) -> Vec<Stream> {
        (0..count as u64)
            .map(|i| {
                let mut rng = Rng::stream(self.spec.seed, (split << 32) | i);
                self.generate_stream(i, &mut rng)
            })
            .collect()
    }
}

/// Indices of the `k` text-bearing clips nearest in time to
/// `stream[clip_index]`; ties go to the earlier timestamp.
pub fn nearest_text_clips(stream: &[ClipSample], clip_index: usize, k: usize) -> Result<Vec<usize>> {
    let t0 = stream
        .get(clip_index)
        .ok_or_else(|| Error::Config(format!("clip index {clip_index} outside stream of {}", stream.len())))?
        .timestamp;
    let mut text: Vec<usize> = (0..stream.len()).filter(|&i| stream[i].has_text()).collect();
    if text.is_empty() {
        return Err(Error::NoText);
    }
    text.sort_by(|&a, &b| {
        let (ta, tb) = (stream[a].timestamp, stream[b].timestamp);
        (ta - t0)
            .abs()
            .total_cmp(&(tb - t0).abs())
            .then(ta.total_cmp(&tb))
            .then(a.cmp(&b))
    });
    text.truncate(k);
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        SyntheticSpec::default().validate().unwrap();
        let bad = SyntheticSpec { concepts: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SyntheticSpec { video_noise: -0.1, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn phrases_name_their_latent() {
        let w = SyntheticWorld::new(SyntheticSpec::default()).unwrap();
        let s = &w.spec;
        let p = w.phrase(3, 5);
        assert_eq!(p[0], 4);
        assert_eq!(p[s.text_len / 2], 1 + s.concepts + 5);
        assert!(p.iter().all(|&id| id > 0 && id < s.vocab));
    }

    #[test]
    fn templates_stay_in_range() {
        let w = SyntheticWorld::new(SyntheticSpec::default()).unwrap();
        for c in 0..8 {
            for v in 0..8 {
                assert!(w.video_template(c, v).data.iter().all(|x| x.abs() <= 1.0));
                assert!(w.audio_template(c, v).iter().all(|x| x.abs() <= 1.0));
            }
        }
    }
}

//! Raw-signal tokenization: 3-D voxel patches for video, 1-D segments for
//! waveforms and an embedding lookup for text, followed by DropToken.
//!
//! Video positions use one learnable table per axis. Token `(i, j, k)` gets
//! `E_temporal[i] + E_horizontal[j] + E_vertical[k]`, so a `nt × nh × nw` grid
//! needs only `nt + nh + nw` rows.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore, ParamVars};

pub const VIDEO_CHANNELS: usize = 3;
pub const TEXT_MAX_LEN: usize = 16;
pub const PAD_ID: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Video,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Video, Modality::Audio, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// A `frames × height × width × 3` clip, row-major, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl VideoClip {
    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VideoClip {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width * VIDEO_CHANNELS],
        }
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * VIDEO_CHANNELS + c
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }
}

/// Clip extent plus patch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: [usize; 3],
}

impl VideoGeometry {
    /// Buckets per axis: `[⌈T/t⌉, ⌈H/h⌉, ⌈W/w⌉]`.
    pub fn buckets(&self) -> [usize; 3] {
        [
            ceil_div(self.frames, self.patch[0]),
            ceil_div(self.height, self.patch[1]),
            ceil_div(self.width, self.patch[2]),
        ]
    }

    pub fn token_count(&self) -> usize {
        self.buckets().iter().product()
    }

    pub fn positional_rows(&self) -> usize {
        self.buckets().iter().sum()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * VIDEO_CHANNELS
    }

    /// Axis buckets `(i, j, k)` of raster token index `n`.
    pub fn token_coords(&self, n: usize) -> [usize; 3] {
        let [_, nh, nw] = self.buckets();
        [n / (nh * nw), (n / nw) % nh, n % nw]
    }
}

/// Flattens `clip` into `token_count × patch_dim` rows in raster order,
/// zero-padding partial patches. Patch voxels are ordered `(dt, dy, dx, c)`.
pub fn patchify_video(clip: &VideoClip, geo: &VideoGeometry) -> Vec<f32> {
    let [nt, nh, nw] = geo.buckets();
    let [pt, ph, pw] = geo.patch;
    let mut out = Vec::with_capacity(geo.token_count() * geo.patch_dim());
    for i in 0..nt {
        for j in 0..nh {
            for k in 0..nw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let (t, y, x) = (i * pt + dt, j * ph + dy, k * pw + dx);
                            if t < clip.frames && y < clip.height && x < clip.width {
                                let base = clip.index(t, y, x, 0);
                                out.extend_from_slice(&clip.data[base..base + VIDEO_CHANNELS]);
                            } else {
                                out.extend_from_slice(&[0.0; VIDEO_CHANNELS]);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// A batch of embedded tokens for one modality.
///
/// `tokens` is `B × N × d`. `positions[b]` lists the raster index each
/// surviving token had before DropToken; `padding[b][n]` marks text pad slots
/// that attention must ignore.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub modality: Modality,
    pub original_len: usize,
    pub positions: Vec<Vec<usize>>,
    pub padding: Option<Vec<Vec<bool>>>,
}

impl TokenSequence {
    pub fn batch(&self) -> usize {
        self.positions.len()
    }

    pub fn len(&self) -> usize {
        self.positions.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Which original tokens of sample `b` survived.
    pub fn kept_mask(&self, b: usize) -> Vec<bool> {
        let mut mask = vec![false; self.original_len];
        for &p in &self.positions[b] {
            mask[p] = true;
        }
        mask
    }
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            context: format!("{what} element {i}"),
        }),
        None => Ok(()),
    }
}

fn to_scalar<T: Scalar>(data: &[f32]) -> Vec<T> {
    data.iter().map(|&v| T::of(v as f64)).collect()
}

#[derive(Clone, Debug)]
pub struct VideoTokenizer {
    pub geometry: VideoGeometry,
    pub d: usize,
    pub projection: ParamId,
    pub pos_temporal: ParamId,
    pub pos_horizontal: ParamId,
    pub pos_vertical: ParamId,
}

impl VideoTokenizer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        geometry: VideoGeometry,
        d: usize,
        rng: &mut Rng,
    ) -> Self {
        let [nt, nh, nw] = geometry.buckets();
        VideoTokenizer {
            geometry,
            d,
            projection: store.add_trunc_normal(&format!("{prefix}.proj"), &[geometry.patch_dim(), d], rng),
            pos_temporal: store.add_trunc_normal(&format!("{prefix}.pos_temporal"), &[nt, d], rng),
            pos_horizontal: store.add_trunc_normal(&format!("{prefix}.pos_horizontal"), &[nh, d], rng),
            pos_vertical: store.add_trunc_normal(&format!("{prefix}.pos_vertical"), &[nw, d], rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.geometry.patch_dim() * self.d + self.geometry.positional_rows() * self.d
    }

    /// Positional codes for every raster position, `N × d`.
    pub fn positional<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars) -> Result<Var> {
        let n = self.geometry.token_count();
        let coords: Vec<[usize; 3]> = (0..n).map(|i| self.geometry.token_coords(i)).collect();
        let pick = |axis: usize| coords.iter().map(|c| c[axis]).collect::<Vec<_>>();
        let et = g.gather(pv[self.pos_temporal], &pick(0))?;
        let eh = g.gather(pv[self.pos_horizontal], &pick(1))?;
        let ev = g.gather(pv[self.pos_vertical], &pick(2))?;
        let s = g.add(et, eh)?;
        g.add(s, ev)
    }

    pub fn tokenize<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, clips: &[&VideoClip]) -> Result<TokenSequence> {
        if clips.is_empty() {
            return Err(Error::Empty("video batch"));
        }
        let geo = &self.geometry;
        let w = g.value(pv[self.projection]).shape().to_vec();
        if w != [geo.patch_dim(), self.d] {
            return Err(Error::Shape {
                op: "tokenize_video",
                lhs: w,
                rhs: vec![geo.patch_dim(), self.d],
            });
        }
        let n = geo.token_count();
        let mut raw = Vec::with_capacity(clips.len() * n * geo.patch_dim());
        for clip in clips {
            if (clip.frames, clip.height, clip.width) != (geo.frames, geo.height, geo.width) {
                return Err(Error::Shape {
                    op: "tokenize_video",
                    lhs: vec![clip.frames, clip.height, clip.width],
                    rhs: vec![geo.frames, geo.height, geo.width],
                });
            }
            check_finite(&clip.data, "video clip")?;
            raw.extend(to_scalar::<T>(&patchify_video(clip, geo)));
        }
        let x = g.constant(Tensor::new(&[clips.len(), n, geo.patch_dim()], raw)?);
        let projected = g.matmul(x, pv[self.projection])?;
        let pos = self.positional(g, pv)?;
        let tokens = g.add_bcast(projected, pos)?;
        Ok(TokenSequence {
            tokens,
            modality: Modality::Video,
            original_len: n,
            positions: vec![(0..n).collect(); clips.len()],
            padding: None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AudioGeometry {
    pub samples: usize,
    pub segment: usize,
}

impl AudioGeometry {
    pub fn token_count(&self) -> usize {
        ceil_div(self.samples, self.segment)
    }
}

#[derive(Clone, Debug)]
pub struct AudioTokenizer {
    pub geometry: AudioGeometry,
    pub d: usize,
    pub projection: ParamId,
    pub pos: ParamId,
}

impl AudioTokenizer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, geometry: AudioGeometry, d: usize, rng: &mut Rng) -> Self {
        AudioTokenizer {
            geometry,
            d,
            projection: store.add_trunc_normal(&format!("{prefix}.proj"), &[geometry.segment, d], rng),
            pos: store.add_trunc_normal(&format!("{prefix}.pos"), &[geometry.token_count(), d], rng),
        }
    }

    pub fn param_count(&self) -> usize {
        (self.geometry.segment + self.geometry.token_count()) * self.d
    }

    pub fn tokenize<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, waves: &[&[f32]]) -> Result<TokenSequence> {
        if waves.is_empty() {
            return Err(Error::Empty("audio batch"));
        }
        let geo = &self.geometry;
        let n = geo.token_count();
        let mut raw = Vec::with_capacity(waves.len() * n * geo.segment);
        for w in waves {
            if w.is_empty() {
                return Err(Error::Empty("waveform"));
            }
            if w.len() != geo.samples {
                return Err(Error::Shape {
                    op: "tokenize_audio",
                    lhs: vec![w.len()],
                    rhs: vec![geo.samples],
                });
            }
            check_finite(w, "waveform")?;
            raw.extend(to_scalar::<T>(w));
            raw.resize(raw.len() + n * geo.segment - w.len(), T::zero());
        }
        let x = g.constant(Tensor::new(&[waves.len(), n, geo.segment], raw)?);
        let projected = g.matmul(x, pv[self.projection])?;
        let tokens = g.add_bcast(projected, pv[self.pos])?;
        Ok(TokenSequence {
            tokens,
            modality: Modality::Audio,
            original_len: n,
            positions: vec![(0..n).collect(); waves.len()],
            padding: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextTokenizer {
    pub vocab: usize,
    pub max_len: usize,
    pub d: usize,
    pub embedding: ParamId,
    /// First-layer relative attention bias, `heads × (2·max_len − 1)`.
    pub relative_bias: ParamId,
}

/// Clips or pads `ids` to `max_len` with [`PAD_ID`]; returns the ids and the
/// pad mask.
pub fn pad_text(ids: &[usize], max_len: usize) -> (Vec<usize>, Vec<bool>) {
    let kept = ids.len().min(max_len);
    let mut out = ids[..kept].to_vec();
    out.resize(max_len, PAD_ID);
    let mask = (0..max_len).map(|i| i >= kept).collect();
    (out, mask)
}

impl TextTokenizer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, vocab: usize, d: usize, heads: usize, rng: &mut Rng) -> Self {
        TextTokenizer {
            vocab,
            max_len: TEXT_MAX_LEN,
            d,
            embedding: store.add_trunc_normal(&format!("{prefix}.embedding"), &[vocab, d], rng),
            relative_bias: store.add_zeros(&format!("{prefix}.relative_bias"), &[heads, 2 * TEXT_MAX_LEN - 1]),
        }
    }

    pub fn tokenize<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, texts: &[&[usize]]) -> Result<TokenSequence> {
        if texts.is_empty() {
            return Err(Error::Empty("text batch"));
        }
        let mut flat = Vec::with_capacity(texts.len() * self.max_len);
        let mut padding = Vec::with_capacity(texts.len());
        for ids in texts {
            if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
                return Err(Error::OutOfVocabulary { id, vocab: self.vocab });
            }
            let (padded, mask) = pad_text(ids, self.max_len);
            flat.extend(padded);
            padding.push(mask);
        }
        let rows = g.gather(pv[self.embedding], &flat)?;
        let tokens = g.reshape(rows, &[texts.len(), self.max_len, self.d])?;
        Ok(TokenSequence {
            tokens,
            modality: Modality::Text,
            original_len: self.max_len,
            positions: vec![(0..self.max_len).collect(); texts.len()],
            padding: Some(padding),
        })
    }
}

/// Cuts trailing slots that are padding in every sample. Pad keys are masked
/// in attention, so the aggregation output is unchanged.
pub fn trim_padding<T: Scalar>(g: &mut Graph<T>, seq: &TokenSequence) -> Result<TokenSequence> {
    let Some(padding) = seq.padding.as_ref() else {
        return Ok(seq.clone());
    };
    let keep = padding
        .iter()
        .map(|row| row.iter().rposition(|&p| !p).map_or(1, |i| i + 1))
        .max()
        .unwrap_or(1);
    if keep == seq.len() {
        return Ok(seq.clone());
    }
    let tokens = g.slice(seq.tokens, 1, 0, keep)?;
    Ok(TokenSequence {
        tokens,
        modality: seq.modality,
        original_len: seq.original_len,
        positions: seq.positions.iter().map(|p| p[..keep].to_vec()).collect(),
        padding: Some(padding.iter().map(|p| p[..keep].to_vec()).collect()),
    })
}

/// Number of tokens DropToken keeps: `⌈(1 − rate)·n⌉`.
pub fn kept_count(n: usize, rate: f64) -> usize {
    // guard against 0.7·10 = 7.000000000000001 rounding up
    (((1.0 - rate) * n as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Keeps a uniformly sampled, order-preserving subset of each sample's tokens.
/// Rate 0 returns the sequence unchanged.
pub fn drop_token<T: Scalar>(g: &mut Graph<T>, seq: &TokenSequence, rate: f64, rng: &mut Rng) -> Result<TokenSequence> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidRate(rate));
    }
    if rate == 0.0 {
        return Ok(seq.clone());
    }
    let shape = g.shape(seq.tokens).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let k = kept_count(n, rate);
    let mut flat = Vec::with_capacity(b * k);
    let mut positions = Vec::with_capacity(b);
    let mut padding = seq.padding.as_ref().map(|_| Vec::with_capacity(b));
    for s in 0..b {
        let picked = rng.sample_sorted(n, k);
        flat.extend(picked.iter().map(|&i| s * n + i));
        positions.push(picked.iter().map(|&i| seq.positions[s][i]).collect());
        if let (Some(out), Some(src)) = (padding.as_mut(), seq.padding.as_ref()) {
            out.push(picked.iter().map(|&i| src[s][i]).collect());
        }
    }
    let rows = g.reshape(seq.tokens, &[b * n, d])?;
    let kept = g.gather(rows, &flat)?;
    let tokens = g.reshape(kept, &[b, k, d])?;
    Ok(TokenSequence {
        tokens,
        modality: seq.modality,
        original_len: seq.original_len,
        positions,
        padding,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video_geo(frames: usize, size: usize) -> VideoGeometry {
        VideoGeometry {
            frames,
            height: size,
            width: size,
            patch: [4, 16, 16],
        }
    }

    #[test]
    fn pretraining_geometry_token_and_bucket_counts() {
        let g = video_geo(32, 224);
        assert_eq!(g.token_count(), 1568);
        assert_eq!(g.buckets(), [8, 14, 14]);
        assert_eq!(g.positional_rows(), 36);
        let g = video_geo(32, 320);
        assert_eq!(g.buckets(), [8, 20, 20]);
        assert_eq!(g.token_count(), 3200);
        assert_eq!(g.positional_rows(), 48);
    }

    #[test]
    fn token_count_formula_exhaustive() {
        for (tt, hh, ww) in [(1, 1, 1), (2, 3, 2), (3, 2, 4)] {
            for frames in 1..=7 {
                for h in 1..=7 {
                    for w in 1..=7 {
                        let geo = VideoGeometry { frames, height: h, width: w, patch: [tt, hh, ww] };
                        let expect = frames.div_ceil(tt) * h.div_ceil(hh) * w.div_ceil(ww);
                        assert_eq!(geo.token_count(), expect);
                        let clip = VideoClip::zeros(frames, h, w);
                        assert_eq!(patchify_video(&clip, &geo).len(), expect * geo.patch_dim());
                    }
                }
            }
        }
    }

    #[test]
    fn single_patch_with_zero_projection_is_origin_position() {
        let geo = video_geo(4, 16);
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(0);
        let tok = VideoTokenizer::new(&mut store, "v", geo, 8, &mut rng);
        *store.value_mut(tok.projection) = Tensor::zeros(&[geo.patch_dim(), 8]);
        let clip = VideoClip {
            data: vec![0.5; 4 * 16 * 16 * 3],
            ..VideoClip::zeros(4, 16, 16)
        };
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let seq = tok.tokenize(&mut g, &pv, &[&clip]).unwrap();
        assert_eq!(g.shape(seq.tokens), &[1, 1, 8]);
        let e = |id| store.value(id).row(0).to_vec();
        let (t, h, v) = (e(tok.pos_temporal), e(tok.pos_horizontal), e(tok.pos_vertical));
        for (i, &got) in g.value(seq.tokens).data().iter().enumerate() {
            assert!((got - (t[i] + h[i] + v[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn audio_ceiling_and_padding() {
        assert_eq!(AudioGeometry { samples: 153_600, segment: 128 }.token_count(), 1200);
        let geo = AudioGeometry { samples: 129, segment: 128 };
        assert_eq!(geo.token_count(), 2);
        let mut store = ParamStore::<f64>::new();
        let tok = AudioTokenizer::new(&mut store, "a", geo, 4, &mut Rng::new(1));
        *store.value_mut(tok.pos) = Tensor::zeros(&[2, 4]);
        let mut wave = vec![0.0f32; 129];
        wave[128] = 1.0;
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let seq = tok.tokenize(&mut g, &pv, &[&wave]).unwrap();
        // second token sees only sample 128 at offset 0 of the segment
        let w = store.value(tok.projection);
        assert_eq!(g.value(seq.tokens).row(1), w.row(0));
        assert!(g.value(seq.tokens).row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_waveform_rejected() {
        let geo = AudioGeometry { samples: 16, segment: 4 };
        let mut store = ParamStore::<f64>::new();
        let tok = AudioTokenizer::new(&mut store, "a", geo, 4, &mut Rng::new(1));
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        assert!(matches!(tok.tokenize(&mut g, &pv, &[&[][..]]), Err(Error::Empty(_))));
    }

    #[test]
    fn text_padding_and_clipping() {
        let (ids, mask) = pad_text(&[5], TEXT_MAX_LEN);
        assert_eq!(ids[0], 5);
        assert!(ids[1..].iter().all(|&i| i == PAD_ID));
        assert_eq!(mask.iter().filter(|&&m| m).count(), 15);
        let long: Vec<usize> = (1..=20).collect();
        let (ids, mask) = pad_text(&long, TEXT_MAX_LEN);
        assert_eq!(ids, (1..=16).collect::<Vec<_>>());
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let mut store = ParamStore::<f64>::new();
        let tok = TextTokenizer::new(&mut store, "t", 10, 4, 2, &mut Rng::new(0));
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        assert!(matches!(
            tok.tokenize(&mut g, &pv, &[&[3, 10][..]]),
            Err(Error::OutOfVocabulary { id: 10, vocab: 10 })
        ));
    }

    #[test]
    fn kept_count_is_ceiling() {
        assert_eq!(kept_count(1568, 0.5), 784);
        assert_eq!(kept_count(1568, 0.75), 392);
        assert_eq!(kept_count(10, 0.3), 7);
        assert_eq!(kept_count(5, 0.5), 3);
        assert_eq!(kept_count(4, 0.99), 1);
    }

    #[test]
    fn drop_token_rejects_bad_rates() {
        let mut g = Graph::<f64>::new();
        let t = g.constant(Tensor::zeros(&[1, 4, 2]));
        let seq = TokenSequence {
            tokens: t,
            modality: Modality::Audio,
            original_len: 4,
            positions: vec![(0..4).collect()],
            padding: None,
        };
        let mut rng = Rng::new(0);
        assert!(drop_token(&mut g, &seq, 1.0, &mut rng).is_err());
        assert!(drop_token(&mut g, &seq, -0.1, &mut rng).is_err());
        let same = drop_token(&mut g, &seq, 0.0, &mut rng).unwrap();
        assert_eq!(same.tokens, seq.tokens);
    }
}

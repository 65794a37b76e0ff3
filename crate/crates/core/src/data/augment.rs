//! Video augmentation: a temporally consistent random crop resized back to
//! the target extent, horizontal flip, and color jitter.

use crate::numerics::Rng;
use crate::tokenizers::{VideoClip, VIDEO_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: bool,
    pub min_area: f64,
    pub aspect: (f64, f64),
    pub flip: bool,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub hue: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: true,
            min_area: 0.08,
            aspect: (0.5, 2.0),
            flip: true,
            brightness: 32.0 / 255.0,
            saturation: 0.4,
            contrast: 0.4,
            hue: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Every random component off; only the resize remains.
    pub fn disabled() -> Self {
        AugmentConfig {
            crop: false,
            flip: false,
            brightness: 0.0,
            saturation: 0.0,
            contrast: 0.0,
            hue: 0.0,
            ..Default::default()
        }
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

/// One draw of every random choice, shared by all frames of a clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub crop: CropBox,
    pub flip: bool,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
    pub hue: f64,
}

const CROP_ATTEMPTS: usize = 10;

fn sample_crop(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut Rng) -> CropBox {
    let full = CropBox { y: 0, x: 0, height, width };
    if !cfg.crop {
        return full;
    }
    let area = (height * width) as f64;
    let (lo, hi) = (cfg.aspect.0.ln(), cfg.aspect.1.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.uniform_in(cfg.min_area, 1.0);
        let ratio = rng.uniform_in(lo, hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let y = rng.below(height - h + 1);
            let x = rng.below(width - w + 1);
            return CropBox { y, x, height: h, width: w };
        }
    }
    full
}

pub fn sample_params(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut Rng) -> AugmentParams {
    let crop = sample_crop(height, width, cfg, rng);
    let flip = cfg.flip && rng.bernoulli(0.5);
    let sym = |rng: &mut Rng, d: f64| if d > 0.0 { rng.uniform_in(-d, d) } else { 0.0 };
    AugmentParams {
        crop,
        flip,
        brightness: sym(rng, cfg.brightness),
        saturation: 1.0 + sym(rng, cfg.saturation),
        contrast: 1.0 + sym(rng, cfg.contrast),
        hue: sym(rng, cfg.hue),
    }
}

/// Bilinear sample of frame `t` at continuous source coordinates.
fn bilinear(clip: &VideoClip, t: usize, sy: f64, sx: f64, c: usize) -> f64 {
    let y0 = sy.floor().max(0.0) as usize;
    let x0 = sx.floor().max(0.0) as usize;
    let y0 = y0.min(clip.height - 1);
    let x0 = x0.min(clip.width - 1);
    let y1 = (y0 + 1).min(clip.height - 1);
    let x1 = (x0 + 1).min(clip.width - 1);
    let fy = (sy - y0 as f64).clamp(0.0, 1.0);
    let fx = (sx - x0 as f64).clamp(0.0, 1.0);
    let v = |y, x| clip.at(t, y, x, c) as f64;
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Crops every frame with `crop` and resizes to `height × width`
/// (half-pixel-centered bilinear), optionally mirroring horizontally.
pub fn crop_resize(clip: &VideoClip, crop: CropBox, height: usize, width: usize, flip: bool) -> VideoClip {
    let mut out = VideoClip::zeros(clip.frames, height, width);
    let sy = crop.height as f64 / height as f64;
    let sx = crop.width as f64 / width as f64;
    for t in 0..clip.frames {
        for y in 0..height {
            let src_y = crop.y as f64 + (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let xx = if flip { width - 1 - x } else { x };
                let src_x = crop.x as f64 + (xx as f64 + 0.5) * sx - 0.5;
                for c in 0..VIDEO_CHANNELS {
                    let v = bilinear(clip, t, src_y.clamp(crop.y as f64, (crop.y + crop.height - 1) as f64), src_x.clamp(crop.x as f64, (crop.x + crop.width - 1) as f64), c);
                    let i = out.index(t, y, x, c);
                    out.data[i] = v as f32;
                }
            }
        }
    }
    out
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Brightness, saturation, contrast, then hue, on RGB in `[0, 1]`.
fn color_jitter(clip: &mut VideoClip, p: &AugmentParams) {
    let mut rgb: Vec<f64> = clip.data.iter().map(|&v| (v as f64 + 1.0) * 0.5).collect();
    if p.brightness != 0.0 {
        for v in &mut rgb {
            *v += p.brightness;
        }
    }
    if p.saturation != 1.0 {
        for px in rgb.chunks_exact_mut(VIDEO_CHANNELS) {
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for v in px {
                *v = gray + p.saturation * (*v - gray);
            }
        }
    }
    if p.contrast != 1.0 {
        let pixels = (rgb.len() / VIDEO_CHANNELS) as f64;
        let mut mean = [0.0; VIDEO_CHANNELS];
        for px in rgb.chunks_exact(VIDEO_CHANNELS) {
            for c in 0..VIDEO_CHANNELS {
                mean[c] += px[c] / pixels;
            }
        }
        for px in rgb.chunks_exact_mut(VIDEO_CHANNELS) {
            for c in 0..VIDEO_CHANNELS {
                px[c] = mean[c] + p.contrast * (px[c] - mean[c]);
            }
        }
    }
    if p.hue != 0.0 {
        for px in rgb.chunks_exact_mut(VIDEO_CHANNELS) {
            let clamped = [px[0].clamp(0.0, 1.0), px[1].clamp(0.0, 1.0), px[2].clamp(0.0, 1.0)];
            let [h, s, v] = rgb_to_hsv(clamped);
            px.copy_from_slice(&hsv_to_rgb([h + p.hue, s, v]));
        }
    }
    for (o, v) in clip.data.iter_mut().zip(rgb) {
        *o = (v.clamp(0.0, 1.0) * 2.0 - 1.0) as f32;
    }
}

/// Applies `params` and resizes to `height × width`.
pub fn apply(clip: &VideoClip, params: &AugmentParams, height: usize, width: usize) -> VideoClip {
    let mut out = crop_resize(clip, params.crop, height, width, params.flip);
    color_jitter(&mut out, params);
    out
}

/// Draws fresh augmentation parameters and applies them, keeping the clip's
/// own spatial extent.
pub fn augment_video(clip: &VideoClip, cfg: &AugmentConfig, rng: &mut Rng) -> VideoClip {
    let params = sample_params(clip.height, clip.width, cfg, rng);
    apply(clip, &params, clip.height, clip.width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        let mut rng = Rng::new(1);
        for _ in 0..1000 {
            let px = [rng.uniform(), rng.uniform(), rng.uniform()];
            let back = hsv_to_rgb(rgb_to_hsv(px));
            for c in 0..3 {
                assert!((back[c] - px[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let mut rng = Rng::new(2);
        let mut clip = VideoClip::zeros(2, 5, 7);
        for v in &mut clip.data {
            *v = rng.uniform_in(-1.0, 1.0) as f32;
        }
        let full = CropBox { y: 0, x: 0, height: 5, width: 7 };
        assert_eq!(crop_resize(&clip, full, 5, 7, false), clip);
    }
}

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::ParamStore;
use crate::tokenizers::{VideoGeometry, VideoTokenizer};

/// Cubic convolution kernel with `a = −1/2`.
fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Resamples an `m × d` bucket table to `new_m × d` with cubic convolution
/// along the bucket axis, end buckets mapped onto end buckets. Samples past
/// either end are extrapolated linearly, so linear ramps are reproduced
/// exactly.
pub fn interpolate_positional<T: Scalar>(table: &Tensor<T>, new_m: usize) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: table.shape().to_vec(),
            reason: "positional table must be buckets × width".into(),
        });
    }
    let (m, d) = (table.shape()[0], table.shape()[1]);
    if m < 2 {
        return Err(Error::InvalidShape {
            shape: table.shape().to_vec(),
            reason: "interpolation needs at least 2 buckets".into(),
        });
    }
    if new_m < 1 {
        return Err(Error::Config("target bucket count must be at least 1".into()));
    }
    if new_m == m {
        return Ok(table.clone());
    }
    let at = |k: isize, c: usize| -> f64 {
        let row = |r: usize| table.data()[r * d + c].as_f64();
        if k < 0 {
            2.0 * row(0) - row(1)
        } else if k as usize >= m {
            2.0 * row(m - 1) - row(m - 2)
        } else {
            row(k as usize)
        }
    };
    let mut out = Vec::with_capacity(new_m * d);
    for i in 0..new_m {
        let src = if new_m == 1 {
            (m - 1) as f64 / 2.0
        } else {
            i as f64 * (m - 1) as f64 / (new_m - 1) as f64
        };
        let k = (src.floor() as isize).min(m as isize - 2);
        let t = src - k as f64;
        let w = [keys(t + 1.0), keys(t), keys(1.0 - t), keys(2.0 - t)];
        for c in 0..d {
            let v: f64 = (0..4).map(|j| w[j] * at(k - 1 + j as isize, c)).sum();
            out.push(T::of(v));
        }
    }
    Tensor::new(&[new_m, d], out)
}

/// Moves a video tokenizer to a new clip extent with the same patch size,
/// resampling each per-axis positional table in place.
pub fn resize_video_positional<T: Scalar>(
    store: &mut ParamStore<T>,
    tokenizer: &VideoTokenizer,
    geometry: VideoGeometry,
) -> Result<VideoTokenizer> {
    if geometry.patch != tokenizer.geometry.patch {
        return Err(Error::Incompatible(format!(
            "patch size {:?} differs from the trained {:?}",
            geometry.patch, tokenizer.geometry.patch
        )));
    }
    let buckets = geometry.buckets();
    for (id, n) in [tokenizer.pos_temporal, tokenizer.pos_horizontal, tokenizer.pos_vertical]
        .into_iter()
        .zip(buckets)
    {
        let resized = interpolate_positional(store.value(id), n)?;
        *store.value_mut(id) = resized;
    }
    Ok(VideoTokenizer { geometry, ..tokenizer.clone() })
}

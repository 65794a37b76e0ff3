use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Clips averaged into one video representation.
pub const CLIPS_PER_VIDEO: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub recall_at_10: f64,
    /// Lower median of `ranks`.
    pub median_rank: usize,
    /// 1-based rank of each query's target.
    pub ranks: Vec<usize>,
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite { context: "retrieval embedding".into() });
    }
    if norm == 0.0 {
        return Err(Error::Degenerate("zero-norm retrieval embedding"));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// `M × K × d` clip embeddings → `M × d`: each clip normalized, averaged,
/// then normalized again.
pub fn video_representation(clips: &Tensor<f64>) -> Result<Tensor<f64>> {
    if clips.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: clips.shape().to_vec(),
            reason: "clip embeddings must be videos × clips × width".into(),
        });
    }
    let (m, k, d) = (clips.shape()[0], clips.shape()[1], clips.shape()[2]);
    if m == 0 {
        return Err(Error::Empty("video pool"));
    }
    if k == 0 {
        return Err(Error::Empty("clips per video"));
    }
    let mut out = Vec::with_capacity(m * d);
    for video in clips.data().chunks_exact(k * d) {
        let mut mean = vec![0.0; d];
        for clip in video.chunks_exact(d) {
            for (a, b) in mean.iter_mut().zip(normalized(clip)?) {
                *a += b / k as f64;
            }
        }
        out.extend(normalized(&mean)?);
    }
    Tensor::new(&[m, d], out)
}

/// Pool indices ordered by decreasing cosine similarity to `query`; equal
/// similarities keep pool order.
pub fn rank_pool(query: &[f64], pool: &Tensor<f64>) -> Result<Vec<usize>> {
    if pool.rank() != 2 || pool.shape()[1] != query.len() {
        return Err(shape_err("rank_pool", &[query.len()], pool.shape()));
    }
    let q = normalized(query)?;
    let sims: Vec<f64> = pool
        .rows()
        .map(|r| normalized(r).map(|r| r.iter().zip(&q).map(|(a, b)| a * b).sum()))
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Text-to-video retrieval. `queries: Q × d`, `pool: M × K × d`, and
/// `targets[q]` is the pool index of query `q`'s video.
pub fn retrieval_eval(queries: &Tensor<f64>, pool: &Tensor<f64>, targets: &[usize]) -> Result<RetrievalResult> {
    let videos = video_representation(pool)?;
    let m = videos.shape()[0];
    if queries.rank() != 2 || queries.shape()[0] != targets.len() {
        return Err(shape_err("retrieval_eval", queries.shape(), &[targets.len()]));
    }
    if targets.is_empty() {
        return Err(Error::Empty("retrieval queries"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= m) {
        return Err(Error::InvalidLabels(format!("target {t} outside pool of {m}")));
    }
    let mut ranks = Vec::with_capacity(targets.len());
    for (q, &t) in queries.rows().zip(targets) {
        let order = rank_pool(q, &videos)?;
        ranks.push(order.iter().position(|&i| i == t).expect("target is in the pool") + 1);
    }
    let hits = ranks.iter().filter(|&&r| r <= 10).count();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    Ok(RetrievalResult {
        recall_at_10: hits as f64 / ranks.len() as f64,
        median_rank: sorted[(sorted.len() - 1) / 2],
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_index() {
        let pool = Tensor::from_f64(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(rank_pool(&[1.0, 0.0], &pool).unwrap(), vec![0, 2, 1]);
    }

    #[test]
    fn representation_normalizes_before_averaging() {
        let clips = Tensor::from_f64(&[1, 2, 2], &[10.0, 0.0, 0.0, 1.0]).unwrap();
        let v = video_representation(&clips).unwrap();
        let s = 0.5f64.sqrt();
        assert!((v.data()[0] - s).abs() < 1e-15 && (v.data()[1] - s).abs() < 1e-15);
    }
}

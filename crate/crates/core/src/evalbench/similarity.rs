use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

pub const HISTOGRAM_BINS: usize = 64;

/// Equal-width bins over `[lo, hi]`; values outside are clamped into the end
/// bins and `hi` itself lands in the last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        Histogram { lo, hi, counts: vec![0; bins] }
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn bin_left(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.bin_width()
    }

    pub fn add(&mut self, v: f64) {
        let n = self.counts.len();
        let i = ((v - self.lo) / self.bin_width()).floor();
        self.counts[(i.max(0.0) as usize).min(n - 1)] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_left,count` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{}\n", self.bin_left(i), c));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub positive: Histogram,
    pub negative: Histogram,
    pub auc: f64,
}

/// Probability that a random positive outranks a random negative, ties
/// counted as one half. Computed from mid-ranks of the pooled values.
pub fn auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&v| (v, true)).chain(neg.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|x| x.1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - p * (p + 1.0) / 2.0) / (p * n)
}

/// Histograms and AUC of positive- and negative-pair similarities.
pub fn similarity_separation(pos: &[f64], neg: &[f64]) -> Result<SimilarityReport> {
    if pos.is_empty() {
        return Err(Error::Empty("positive pairs"));
    }
    if neg.is_empty() {
        return Err(Error::Empty("negative pairs"));
    }
    if pos.iter().chain(neg).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "pair similarity".into() });
    }
    let hist = |vals: &[f64]| {
        let mut h = Histogram::new(-1.0, 1.0, HISTOGRAM_BINS);
        vals.iter().for_each(|&v| h.add(v));
        h
    };
    Ok(SimilarityReport {
        positive: hist(pos),
        negative: hist(neg),
        auc: auc(pos, neg),
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Row `i` of `a` paired with row `i` of `b` is positive; every `(i, j ≠ i)`
/// pair is negative.
pub fn cross_pair_similarities(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(shape_err("cross_pair_similarities", a.shape(), b.shape()));
    }
    let n = a.shape()[0];
    let (mut pos, mut neg) = (Vec::with_capacity(n), Vec::with_capacity(n * n.saturating_sub(1)));
    for i in 0..n {
        for j in 0..n {
            let s = cosine(a.row(i), b.row(j));
            if i == j {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    Ok((pos, neg))
}

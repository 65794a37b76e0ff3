//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. [`Graph::backward`] walks the tape
//! once in reverse, so each tracked node receives its full gradient before it
//! propagates to its inputs.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
const L2_NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast { x: Var, b: Var },
    MulBcast { x: Var, b: Var },
    Scale { x: Var, c: T },
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    Gather { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MaskedLogSumExp { x: Var, mask: Vec<bool> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// The differentiation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Whether any gradient reached `v` at all.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Out-of-place axis permutation of a row-major buffer.
pub(crate) fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        out.push(data[offset]);
        let mut d = rank;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::of(0.5) * (T::one() + (x * T::of(FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Scalar>(x: T) -> T {
    (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * PI).sqrt())
}

fn is_suffix(tail: &[usize], full: &[usize]) -> bool {
    tail.len() <= full.len() && full[full.len() - tail.len()..] == *tail
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant: no gradient is propagated to it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf (parameter or input whose gradient is wanted).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// `a[.., k] · b[k, n]`, contracting the last axis of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::MatMul { a, b }, tracked))
    }

    /// Batched product of `a[b, m, k]` with `b[b, k, n]`, or with `b[b, n, k]`
    /// transposed when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[i * m * k..],
                    k as isize,
                    1,
                    &bv[i * k * n..],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            tracked,
        ))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), tracked))
    }

    fn bcast(&mut self, x: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (vx, vb) = (self.value(x), self.value(b));
        if !is_suffix(vb.shape(), vx.shape()) {
            return Err(shape_err(name, vx.shape(), vb.shape()));
        }
        let chunk = vb.numel().max(1);
        let data = vx
            .data()
            .chunks_exact(chunk)
            .flat_map(|c| c.iter().zip(vb.data()).map(|(&p, &q)| f(p, q)))
            .collect();
        Tensor::new(vx.shape(), data)
    }

    /// `x + b` where the shape of `b` is a suffix of the shape of `x`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.bcast(x, b, "add_bcast", |p, q| p + q)?;
        let tracked = self.tracked(&[x, b]);
        Ok(self.push(t, Op::AddBcast { x, b }, tracked))
    }

    /// `x * b` where the shape of `b` is a suffix of the shape of `x`.
    pub fn mul_bcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let t = self.bcast(x, b, "mul_bcast", |p, q| p * q)?;
        let tracked = self.tracked(&[x, b]);
        Ok(self.push(t, Op::MulBcast { x, b }, tracked))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Scale { x, c }, tracked)
    }

    /// Exact GeLU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * std_normal_cdf(v));
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Gelu(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(T::zero()));
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Relu(x), tracked)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let vx = self.value(x);
        let rows = vx.numel() / d;
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in vx.rows() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<T> = xhat
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let t = Tensor::new(vx.shape(), out)?;
        let tracked = self.tracked(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, tracked))
    }

    /// Train-mode batch normalization of `x[B, d]` over the batch axis.
    /// Returns the normalized output and the batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.shape(gain) != [shape[1]] || self.shape(bias) != [shape[1]] {
            return Err(shape_err("batch_norm", &shape, self.shape(gain)));
        }
        let (n, d) = (shape[0], shape[1]);
        if n == 0 {
            return Err(Error::Empty("batch_norm batch"));
        }
        let nn = T::of(n as f64);
        let vx = self.value(x).data();
        let mut mean = vec![T::zero(); d];
        let mut var = vec![T::zero(); d];
        for row in vx.chunks_exact(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nn);
        for row in vx.chunks_exact(d) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / nn);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let xhat: Vec<T> = vx
            .chunks_exact(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&rstd)
                    .map(|((&v, &m), &r)| (v - m) * r)
                    .collect::<Vec<_>>()
            })
            .collect();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let out: Vec<T> = xhat
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b))
            .collect();
        let t = Tensor::new(&shape, out)?;
        let tracked = self.tracked(&[x, gain, bias]);
        let v = self.push(t, Op::BatchNorm { x, gain, bias, xhat, rstd }, tracked);
        Ok((v, BatchStats { mean, var }))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.rows() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - mx).exp()));
            let s: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v = *v / s);
        }
        let t = Tensor::new(vx.shape(), out).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Softmax(x), tracked)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.rows() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let t = Tensor::new(vx.shape(), out).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(t, Op::LogSoftmax(x), tracked)
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let floor = T::of(L2_NORM_FLOOR);
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(vx.numel());
        for row in vx.rows() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let t = Tensor::new(vx.shape(), out).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(t, Op::L2Normalize { x, norms }, tracked)
    }

    /// Selects sub-tensors along axis 0: `out[i] = x[indices[i]]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if shape.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![],
                reason: "gather needs rank >= 1".into(),
            });
        }
        let rows = shape[0];
        let inner: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= rows {
                return Err(Error::InvalidShape {
                    shape: shape.to_vec(),
                    reason: format!("gather index {i} out of range"),
                });
            }
            out.extend_from_slice(&vx.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let t = Tensor::new(&out_shape, out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::Gather { x, indices: indices.to_vec() }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::Reshape(x), tracked))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_err("permute", &shape, axes));
        }
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let t = Tensor::new(&out_shape, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, tracked))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(Error::Empty("concat inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        let tracked = self.tracked(inputs);
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, tracked))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::Slice { x, axis, start }, tracked))
    }

    /// Row-wise `log Σ exp(x[r, c])` restricted to entries where `mask` is
    /// set. `x` must be 2-D and every row must select at least one entry.
    pub fn masked_logsumexp(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || mask.len() != shape[0] * shape[1] {
            return Err(shape_err("masked_logsumexp", &shape, &[mask.len()]));
        }
        let cols = shape[1];
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(shape[0]);
        for (row, m) in vx.chunks_exact(cols).zip(mask.chunks_exact(cols)) {
            if !m.iter().any(|&on| on) {
                return Err(Error::Empty("masked_logsumexp row selects no entries"));
            }
            let picked = || row.iter().zip(m).filter(|(_, &on)| on).map(|(&v, _)| v);
            if picked().any(|v| v.is_nan()) {
                out.push(T::nan());
                continue;
            }
            let mx = picked().fold(T::neg_infinity(), T::max);
            if mx.is_infinite() {
                out.push(mx);
                continue;
            }
            let s: T = picked().map(|v| (v - mx).exp()).sum();
            out.push(mx + s.ln());
        }
        let t = Tensor::new(&shape[..1], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(t, Op::MaskedLogSumExp { x, mask }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::of(v.numel().max(1) as f64));
        let tracked = self.tracked(&[x]);
        self.push(t, Op::Mean(x), tracked)
    }

    /// Replays the tape backwards from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let shaped = |like: Var, data: Vec<T>| {
            Tensor::new(self.shape(like), data).expect("gradient matches input shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k.max(1);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), dy.data(), n as isize, 1, vb.data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                    self.accumulate(grads, *a, shaped(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), va.data(), 1, k as isize, dy.data(), n as isize, 1, T::zero(), &mut db, n as isize, 1);
                    self.accumulate(grads, *b, shaped(*b, db));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = y.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    // dA = dC · Bᵀ
                    let (rsb, csb) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        T::gemm(m, n, k, T::one(), &dy.data()[bi * m * n..], n as isize, 1, &vb.data()[bi * k * n..], rsb, csb, T::zero(), &mut da[bi * m * k..(bi + 1) * m * k], k as isize, 1);
                    }
                    self.accumulate(grads, *a, shaped(*a, da));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        let dyb = &dy.data()[bi * m * n..];
                        let ab = &va.data()[bi * m * k..];
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = dCᵀ · A
                            T::gemm(n, m, k, T::one(), dyb, 1, n as isize, ab, k as isize, 1, T::zero(), out, k as isize, 1);
                        } else {
                            // dB[k, n] = Aᵀ · dC
                            T::gemm(k, m, n, T::one(), ab, 1, k as isize, dyb, n as isize, 1, T::zero(), out, n as isize, 1);
                        }
                    }
                    self.accumulate(grads, *b, shaped(*b, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = dy.data().iter().zip(vb.data()).map(|(&g, &q)| g * q).collect();
                    self.accumulate(grads, *a, shaped(*a, d));
                }
                if self.needs(*b) {
                    let d = dy.data().iter().zip(va.data()).map(|(&g, &p)| g * p).collect();
                    self.accumulate(grads, *b, shaped(*b, d));
                }
            }
            Op::AddBcast { x, b } => {
                self.accumulate(grads, *x, dy.clone());
                if self.needs(*b) {
                    let chunk = self.value(*b).numel().max(1);
                    let mut db = vec![T::zero(); chunk];
                    for c in dy.data().chunks_exact(chunk) {
                        for (acc, &g) in db.iter_mut().zip(c) {
                            *acc = *acc + g;
                        }
                    }
                    self.accumulate(grads, *b, shaped(*b, db));
                }
            }
            Op::MulBcast { x, b } => {
                let (vx, vb) = (self.value(*x), self.value(*b));
                let chunk = vb.numel().max(1);
                if self.needs(*x) {
                    let d = dy
                        .data()
                        .chunks_exact(chunk)
                        .flat_map(|c| c.iter().zip(vb.data()).map(|(&g, &q)| g * q))
                        .collect();
                    self.accumulate(grads, *x, shaped(*x, d));
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); chunk];
                    for (c, xc) in dy.data().chunks_exact(chunk).zip(vx.data().chunks_exact(chunk)) {
                        for ((acc, &g), &p) in db.iter_mut().zip(c).zip(xc) {
                            *acc = *acc + g * p;
                        }
                    }
                    self.accumulate(grads, *b, shaped(*b, db));
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, *x, dy.map(|v| v * *c)),
            Op::Gelu(x) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                    .collect();
                self.accumulate(grads, *x, shaped(*x, d));
            }
            Op::Relu(x) => {
                let d = dy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, shaped(*x, d));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let g = self.value(*gain).data();
                let d = g.len();
                let dn = T::of(d as f64);
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for ((dyr, hr), &r) in dy.data().chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                        let dh: Vec<T> = dyr.iter().zip(g).map(|(&a, &b)| a * b).collect();
                        let m1 = dh.iter().copied().sum::<T>() / dn;
                        let m2 = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        dx.extend(dh.iter().zip(hr).map(|(&a, &h)| r * (a - m1 - h * m2)));
                    }
                    self.accumulate(grads, *x, shaped(*x, dx));
                }
                self.affine_param_grads(grads, *gain, *bias, dy.data(), xhat, d);
            }
            Op::BatchNorm { x, gain, bias, xhat, rstd } => {
                let g = self.value(*gain).data();
                let d = g.len();
                let n = xhat.len() / d;
                let nn = T::of(n as f64);
                if self.needs(*x) {
                    let mut m1 = vec![T::zero(); d];
                    let mut m2 = vec![T::zero(); d];
                    for (dyr, hr) in dy.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            let dh = dyr[j] * g[j];
                            m1[j] = m1[j] + dh;
                            m2[j] = m2[j] + dh * hr[j];
                        }
                    }
                    let mut dx = Vec::with_capacity(xhat.len());
                    for (dyr, hr) in dy.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            let dh = dyr[j] * g[j];
                            dx.push(rstd[j] * (dh - m1[j] / nn - hr[j] * m2[j] / nn));
                        }
                    }
                    self.accumulate(grads, *x, shaped(*x, dx));
                }
                self.affine_param_grads(grads, *gain, *bias, dy.data(), xhat, d);
            }
            Op::Softmax(x) => {
                let d = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&p, &g)| p * (g - dot)));
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::LogSoftmax(x) => {
                let d = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)) {
                    let total: T = gr.iter().copied().sum();
                    dx.extend(yr.iter().zip(gr).map(|(&ly, &g)| g - ly.exp() * total));
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::L2Normalize { x, norms } => {
                let d = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for ((yr, gr), &n) in y.data().chunks_exact(d).zip(dy.data().chunks_exact(d)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&u, &g)| (g - u * dot) / n));
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::Gather { x, indices } => {
                let vx = self.value(*x);
                let inner: usize = vx.shape()[1..].iter().product();
                let mut dx = vec![T::zero(); vx.numel()];
                for (k, &src) in indices.iter().enumerate() {
                    let g = &dy.data()[k * inner..(k + 1) * inner];
                    for (acc, &v) in dx[src * inner..(src + 1) * inner].iter_mut().zip(g) {
                        *acc = *acc + v;
                    }
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, shaped(*x, dy.data().to_vec())),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let d = permute_data(dy.data(), dy.shape(), &inverse);
                self.accumulate(grads, *x, shaped(*x, d));
            }
            Op::Concat { inputs, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let width = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut d = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let base = (o * shape[*axis] + offset) * inner;
                            d.extend_from_slice(&dy.data()[base..base + width * inner]);
                        }
                        self.accumulate(grads, v, shaped(v, d));
                    }
                    offset += width;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = y.shape()[*axis];
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dy.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::MaskedLogSumExp { x, mask } => {
                let vx = self.value(*x);
                let cols = vx.shape()[1];
                let mut dx = vec![T::zero(); vx.numel()];
                for (r, ((row, m), out)) in vx
                    .data()
                    .chunks_exact(cols)
                    .zip(mask.chunks_exact(cols))
                    .zip(dx.chunks_exact_mut(cols))
                    .enumerate()
                {
                    let (lse, g) = (y.data()[r], dy.data()[r]);
                    for ((&v, &on), o) in row.iter().zip(m).zip(out.iter_mut()) {
                        if on {
                            *o = g * (v - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *x, shaped(*x, dx));
            }
            Op::Sum(x) => {
                let g = dy.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                let g = dy.item() / T::of(n as f64);
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g));
            }
        }
    }

    fn affine_param_grads(&self, grads: &mut [Option<Tensor<T>>], gain: Var, bias: Var, dy: &[T], xhat: &[T], d: usize) {
        if self.needs(gain) {
            let mut dg = vec![T::zero(); d];
            for (dyr, hr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for j in 0..d {
                    dg[j] = dg[j] + dyr[j] * hr[j];
                }
            }
            self.accumulate(grads, gain, Tensor::new(&[d], dg).expect("d"));
        }
        if self.needs(bias) {
            let mut db = vec![T::zero(); d];
            for dyr in dy.chunks_exact(d) {
                for j in 0..d {
                    db[j] = db[j] + dyr[j];
                }
            }
            self.accumulate(grads, bias, Tensor::new(&[d], db).expect("d"));
        }
    }
}

//! Pre-LN Transformer encoder with a learnable aggregation token.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tokenizers::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub const fn new(layers: usize, hidden: usize, mlp: usize, heads: usize) -> Self {
        EncoderConfig { layers, hidden, mlp, heads }
    }

    pub const SMALL: EncoderConfig = EncoderConfig::new(6, 512, 2048, 8);
    pub const BASE: EncoderConfig = EncoderConfig::new(12, 768, 3072, 12);
    pub const MEDIUM: EncoderConfig = EncoderConfig::new(12, 1024, 4096, 16);
    pub const LARGE: EncoderConfig = EncoderConfig::new(24, 1024, 4096, 16);
    /// Desk-scale model used for pre-training experiments.
    pub const TINY: EncoderConfig = EncoderConfig::new(2, 64, 256, 4);
    /// Smallest model, used for finite-difference checks.
    pub const MICRO: EncoderConfig = EncoderConfig::new(2, 16, 32, 2);

    pub fn preset(name: &str) -> Option<EncoderConfig> {
        Some(match name.to_ascii_lowercase().as_str() {
            "small" => Self::SMALL,
            "base" => Self::BASE,
            "medium" => Self::MEDIUM,
            "large" => Self::LARGE,
            "tiny" => Self::TINY,
            "micro" => Self::MICRO,
            _ => return None,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.mlp == 0 || self.heads == 0 {
            return Err(Error::Config(format!("encoder sizes must be positive: {self:?}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    /// Learnable scalars of one encoder (layers, final norm, aggregation token).
    pub fn param_count(&self) -> usize {
        let (d, m) = (self.hidden, self.mlp);
        let attention = 4 * d * d + 4 * d;
        let mlp = 2 * d * m + m + d;
        let norms = 4 * d;
        self.layers * (attention + mlp + norms) + 2 * d + d
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Parameter handles of one encoder. Cloning shares the handles, so two
/// clones address the same weights.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
    pub agg_token: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
}

pub struct AttentionOutput {
    /// `B × N × d`
    pub out: Var,
    /// `(B·heads) × N × N`
    pub weights: Var,
}

pub struct EncoderOutput {
    /// `B × (N+1) × d`, row 0 is the aggregation token.
    pub z_out: Var,
    /// `B × d`
    pub z0: Var,
    /// Per layer, the MLP output before its residual add, `B × (N+1) × d`.
    pub mlp_outputs: Vec<Var>,
}

/// `bias[h][i][j] = table[h][clamp(i − j) + max_len − 1]` for `N ≤ max_len`.
pub fn relative_bias_lookup<T: Scalar>(n: usize, table: &Tensor<T>, max_len: usize) -> Result<Tensor<T>> {
    if n > max_len {
        return Err(Error::SequenceTooLong { len: n, max_len });
    }
    let width = 2 * max_len - 1;
    if table.rank() != 2 || table.shape()[1] != width {
        return Err(Error::Shape {
            op: "relative_bias_lookup",
            lhs: table.shape().to_vec(),
            rhs: vec![table.shape().first().copied().unwrap_or(0), width],
        });
    }
    let heads = table.shape()[0];
    Ok(Tensor::from_fn(&[heads, n, n], |f| {
        let (h, i, j) = (f / (n * n), (f / n) % n, f % n);
        table.data()[h * width + (i + max_len - 1 - j)]
    }))
}

fn offset_index(i: usize, j: usize, max_len: usize) -> usize {
    let rel = i as isize - j as isize;
    let clipped = rel.clamp(-(max_len as isize - 1), max_len as isize - 1);
    (clipped + max_len as isize - 1) as usize
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, m) = (cfg.hidden, cfg.mlp);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("{prefix}.layer{l}.{s}");
            layers.push(LayerParams {
                ln1_gain: store.add_ones(&p("ln1.gain"), &[d]),
                ln1_bias: store.add_zeros(&p("ln1.bias"), &[d]),
                wq: store.add_trunc_normal(&p("attn.wq"), &[d, d], rng),
                bq: store.add_zeros(&p("attn.bq"), &[d]),
                wk: store.add_trunc_normal(&p("attn.wk"), &[d, d], rng),
                bk: store.add_zeros(&p("attn.bk"), &[d]),
                wv: store.add_trunc_normal(&p("attn.wv"), &[d, d], rng),
                bv: store.add_zeros(&p("attn.bv"), &[d]),
                wo: store.add_trunc_normal(&p("attn.wo"), &[d, d], rng),
                bo: store.add_zeros(&p("attn.bo"), &[d]),
                ln2_gain: store.add_ones(&p("ln2.gain"), &[d]),
                ln2_bias: store.add_zeros(&p("ln2.bias"), &[d]),
                w1: store.add_trunc_normal(&p("mlp.w1"), &[d, m], rng),
                b1: store.add_zeros(&p("mlp.b1"), &[m]),
                w2: store.add_trunc_normal(&p("mlp.w2"), &[m, d], rng),
                b2: store.add_zeros(&p("mlp.b2"), &[d]),
            });
        }
        Ok(Encoder {
            cfg: *cfg,
            prefix: prefix.to_string(),
            agg_token: store.add_trunc_normal(&format!("{prefix}.agg_token"), &[d], rng),
            layers,
            final_gain: store.add_ones(&format!("{prefix}.final_ln.gain"), &[d]),
            final_bias: store.add_zeros(&format!("{prefix}.final_ln.bias"), &[d]),
        })
    }

    fn linear<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let y = g.matmul(x, pv[w])?;
        g.add_bcast(y, pv[b])
    }

    /// Multi-head self-attention of layer `layer` on `x: B × N × d`.
    ///
    /// `bias` (`heads × N × N`) is added to every sample's scores; keys marked
    /// in `key_padding` receive `−∞` logits.
    pub fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        layer: usize,
        x: Var,
        bias: Option<Var>,
        key_padding: Option<&[Vec<bool>]>,
    ) -> Result<AttentionOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.hidden {
            return Err(Error::Shape {
                op: "attention",
                lhs: shape,
                rhs: vec![self.cfg.hidden],
            });
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.cfg.heads, self.cfg.head_dim());
        if n == 0 {
            return Err(Error::Empty("attention sequence"));
        }
        let lp = &self.layers[layer];
        let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, n, h, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[b * h, n, dh])
        };
        let q = Self::linear(g, pv, x, lp.wq, lp.bq)?;
        let k = Self::linear(g, pv, x, lp.wk, lp.bk)?;
        let v = Self::linear(g, pv, x, lp.wv, lp.bv)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let scores = g.batch_matmul(q, k, true)?;
        let mut scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
        if let Some(bias) = bias {
            if g.shape(bias) != [h, n, n] {
                return Err(Error::Shape {
                    op: "attention bias",
                    lhs: g.shape(bias).to_vec(),
                    rhs: vec![h, n, n],
                });
            }
            let s = g.reshape(scores, &[b, h, n, n])?;
            let s = g.add_bcast(s, bias)?;
            scores = g.reshape(s, &[b * h, n, n])?;
        }
        if let Some(pad) = key_padding {
            if pad.len() != b || pad.iter().any(|p| p.len() != n) {
                return Err(Error::Shape {
                    op: "attention key padding",
                    lhs: vec![pad.len(), pad.first().map_or(0, Vec::len)],
                    rhs: vec![b, n],
                });
            }
            let mask = Tensor::from_fn(&[b * h, n, n], |f| {
                let (s, j) = (f / (h * n * n), f % n);
                if pad[s][j] {
                    T::neg_infinity()
                } else {
                    T::zero()
                }
            });
            let mask = g.constant(mask);
            scores = g.add(scores, mask)?;
        }
        let weights = g.softmax(scores);
        let ctx = g.batch_matmul(weights, v, false)?;
        let ctx = g.reshape(ctx, &[b, h, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, d])?;
        let out = Self::linear(g, pv, ctx, lp.wo, lp.bo)?;
        Ok(AttentionOutput { out, weights })
    }

    /// GeLU MLP of layer `layer`.
    pub fn mlp<T: Scalar>(&self, g: &mut Graph<T>, pv: &ParamVars, layer: usize, x: Var) -> Result<Var> {
        let lp = &self.layers[layer];
        let hdn = Self::linear(g, pv, x, lp.w1, lp.b1)?;
        let act = g.gelu(hdn);
        Self::linear(g, pv, act, lp.w2, lp.b2)
    }

    /// Expands a text relative-bias table to `heads × (N+1) × (N+1)` over a
    /// sequence whose row/column 0 is the aggregation token (which gets no bias).
    fn first_layer_bias<T: Scalar>(&self, g: &mut Graph<T>, table: Var, n_tokens: usize) -> Result<Var> {
        let ts = g.shape(table).to_vec();
        if ts.len() != 2 || ts[0] != self.cfg.heads || ts[1].is_multiple_of(2) {
            return Err(Error::Shape {
                op: "relative bias table",
                lhs: ts,
                rhs: vec![self.cfg.heads],
            });
        }
        let width = ts[1];
        let max_len = width.div_ceil(2);
        if n_tokens > max_len {
            return Err(Error::SequenceTooLong { len: n_tokens, max_len });
        }
        let heads = self.cfg.heads;
        let n1 = n_tokens + 1;
        let zero_slot = heads * width;
        let flat = g.reshape(table, &[heads * width, 1])?;
        let zero = g.constant(Tensor::zeros(&[1, 1]));
        let padded = g.concat(&[flat, zero], 0)?;
        let mut idx = Vec::with_capacity(heads * n1 * n1);
        for h in 0..heads {
            for i in 0..n1 {
                for j in 0..n1 {
                    idx.push(if i == 0 || j == 0 {
                        zero_slot
                    } else {
                        h * width + offset_index(i - 1, j - 1, max_len)
                    });
                }
            }
        }
        let picked = g.gather(padded, &idx)?;
        g.reshape(picked, &[heads, n1, n1])
    }

    /// Prepends the aggregation token, runs every pre-LN block and the final
    /// layer norm. `relative_bias`, when given, is a `heads × (2·max_len − 1)`
    /// table applied to the first layer's attention scores.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        seq: &TokenSequence,
        relative_bias: Option<Var>,
    ) -> Result<EncoderOutput> {
        let shape = g.shape(seq.tokens).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.hidden {
            return Err(Error::Shape {
                op: "encoder_forward",
                lhs: shape,
                rhs: vec![self.cfg.hidden],
            });
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let agg = g.reshape(pv[self.agg_token], &[1, 1, d])?;
        let agg = if b > 1 {
            let rows = g.reshape(agg, &[1, d])?;
            let copies = g.gather(rows, &vec![0; b])?;
            g.reshape(copies, &[b, 1, d])?
        } else {
            agg
        };
        let mut x = g.concat(&[agg, seq.tokens], 1)?;
        let padding: Option<Vec<Vec<bool>>> = seq.padding.as_ref().map(|p| {
            p.iter()
                .map(|row| std::iter::once(false).chain(row.iter().copied()).collect())
                .collect()
        });
        let first_bias = match relative_bias {
            Some(table) => Some(self.first_layer_bias(g, table, n)?),
            None => None,
        };
        let mut mlp_outputs = Vec::with_capacity(self.cfg.layers);
        for (l, lp) in self.layers.iter().enumerate() {
            let hn = g.layer_norm(x, pv[lp.ln1_gain], pv[lp.ln1_bias])?;
            let bias = if l == 0 { first_bias } else { None };
            let att = self.attention(g, pv, l, hn, bias, padding.as_deref())?;
            x = g.add(x, att.out)?;
            let hn = g.layer_norm(x, pv[lp.ln2_gain], pv[lp.ln2_bias])?;
            let m = self.mlp(g, pv, l, hn)?;
            mlp_outputs.push(m);
            x = g.add(x, m)?;
        }
        let z_out = g.layer_norm(x, pv[self.final_gain], pv[self.final_bias])?;
        let z0 = g.slice(z_out, 1, 0, 1)?;
        let z0 = g.reshape(z0, &[b, d])?;
        Ok(EncoderOutput { z_out, z0, mlp_outputs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizers::Modality;

    #[test]
    fn base_census_arithmetic() {
        // 12 · (4·768² + 4·768 + 2·768·3072 + 3072 + 768 + 4·768) + 3·768
        assert_eq!(EncoderConfig::BASE.param_count(), 85_056_768);
    }

    #[test]
    fn constructed_store_matches_analytic_count() {
        let mut store = ParamStore::<f32>::new();
        let cfg = EncoderConfig::new(3, 8, 12, 2);
        Encoder::new(&mut store, "e", &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(store.trainable_count(), cfg.param_count());
    }

    #[test]
    fn hidden_must_divide_heads() {
        assert!(EncoderConfig::new(1, 10, 8, 3).validate().is_err());
    }

    #[test]
    fn relative_bias_offsets_for_two_tokens() {
        let max_len = 16;
        let table = Tensor::<f64>::from_fn(&[1, 31], |i| i as f64);
        let b = relative_bias_lookup(2, &table, max_len).unwrap();
        // offsets: (0,0)=0, (0,1)=-1, (1,0)=+1, (1,1)=0
        assert_eq!(b.data(), &[15.0, 14.0, 16.0, 15.0]);
        assert!(relative_bias_lookup(17, &table, max_len).is_err());
    }

    #[test]
    fn relative_bias_is_translation_invariant() {
        let mut rng = Rng::new(4);
        let table = Tensor::<f64>::from_fn(&[3, 31], |_| rng.normal());
        let n = 16;
        let b = relative_bias_lookup(n, &table, 16).unwrap();
        for h in 0..3 {
            for i in 0..n {
                for j in 0..n {
                    let v = b.data()[(h * n + i) * n + j];
                    if i + 1 < n && j + 1 < n {
                        assert_eq!(v, b.data()[(h * n + i + 1) * n + j + 1]);
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = EncoderConfig::new(1, 8, 16, 2);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "e", &cfg, &mut Rng::new(9)).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor::from_fn(&[1, 1, 8], |_| rng.normal());
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let att = enc.attention(&mut g, &pv, 0, xv, None, None).unwrap();
        let lp = &enc.layers[0];
        let expect = x
            .reshape(&[1, 8])
            .unwrap()
            .matmul(store.value(lp.wv))
            .unwrap()
            .matmul(store.value(lp.wo))
            .unwrap();
        assert!(g.value(att.out).clone().reshape(&[1, 8]).unwrap().max_abs_diff(&expect) < 1e-12);
        assert!(g.value(att.weights).data().iter().all(|&w| (w - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_output_projections_make_blocks_identity() {
        let cfg = EncoderConfig::new(2, 8, 16, 2);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, "e", &cfg, &mut Rng::new(2)).unwrap();
        for lp in &enc.layers {
            *store.value_mut(lp.wo) = Tensor::zeros(&[8, 8]);
            *store.value_mut(lp.w2) = Tensor::zeros(&[16, 8]);
        }
        let mut rng = Rng::new(3);
        let x = Tensor::from_fn(&[2, 5, 8], |_| rng.normal());
        let mut g = Graph::new();
        let pv = store.bind(&mut g);
        let tokens = g.constant(x);
        let seq = TokenSequence {
            tokens,
            modality: Modality::Audio,
            original_len: 5,
            positions: vec![(0..5).collect(); 2],
            padding: None,
        };
        let out = enc.forward(&mut g, &pv, &seq, None).unwrap();
        // expected: final layer norm of [agg; x]
        let mut g2 = Graph::new();
        let pv2 = store.bind(&mut g2);
        let agg = g2.reshape(pv2[enc.agg_token], &[1, 1, 8]).unwrap();
        let agg = g2.concat(&[agg, agg], 0).unwrap();
        let t2 = g2.constant(g.value(seq.tokens).clone());
        let cat = g2.concat(&[agg, t2], 1).unwrap();
        let ln = g2.layer_norm(cat, pv2[enc.final_gain], pv2[enc.final_bias]).unwrap();
        assert!(g.value(out.z_out).max_abs_diff(g2.value(ln)) < 1e-12);
    }
}

//! Finite-difference checks of every differentiable operation and of the
//! end-to-end pre-training loss, in 64-bit precision.

use super::model::{ModelConfig, ModelInputs, VattModel};
use crate::data::{Location, SyntheticSpec, SyntheticWorld, TripletBatch, MIL_POSITIVES};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::heads::{BnUpdates, HeadsConfig, Mode, ProjectionHeads};
use crate::losses::{mil_nce_loss, nce_loss, total_loss, BatchPairing, LossConfig};
use crate::numerics::{GradCheck, Graph, Rng, Tensor, Var};
use crate::params::{ParamStore, ParamVars};
use crate::tokenizers::{drop_token, AudioGeometry, AudioTokenizer, TextTokenizer, VideoClip, VideoGeometry, VideoTokenizer};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub pass: bool,
    /// Parameter holding the worst coordinate.
    pub worst: Option<String>,
    /// Analytic and numeric derivative there.
    pub worst_values: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates probed per tensor in the end-to-end checks; `None` probes
    /// all of them.
    pub max_coords: Option<usize>,
    /// Scales every analytic gradient (fault injection).
    pub corrupt: Option<f64>,
    pub drop_rates: Vec<f64>,
    /// Standard deviation of the noise added to the micro model before the
    /// end-to-end checks.
    pub perturb: f64,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            h: 1e-5,
            tol: 1e-4,
            max_coords: Some(16),
            corrupt: None,
            drop_rates: vec![0.0, 0.25, 0.5, 0.75],
            perturb: 0.2,
            seed: 7,
        }
    }
}

impl SuiteOptions {
    fn checker(&self, max_coords: Option<usize>) -> GradCheck {
        GradCheck {
            h: self.h,
            tol: self.tol,
            max_coords,
            seed: self.seed,
            corrupt: self.corrupt,
            ..Default::default()
        }
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Normals pushed at least `gap` away from zero, for kinked functions.
fn randn_off_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        v.signum() * (v.abs() + gap)
    })
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar with
/// a generic gradient.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = g.constant(randn(g.shape(out), &mut rng));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Handles for `store` with trainable entries taken from `leaves` in order.
pub fn bind_leaves(store: &ParamStore<f64>, g: &mut Graph<f64>, leaves: &[Var]) -> ParamVars {
    let mut next = leaves.iter();
    ParamVars::from_vars(
        store
            .iter()
            .map(|(_, p)| {
                if p.trainable {
                    *next.next().expect("one leaf per trainable parameter")
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect(),
    )
}

fn trainable(store: &ParamStore<f64>) -> (Vec<Tensor<f64>>, Vec<String>) {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| (p.value.clone(), p.name.clone()))
        .unzip()
}

struct Suite<'a> {
    opts: &'a SuiteOptions,
    lines: Vec<CheckLine>,
}

impl Suite<'_> {
    fn tensors<F>(&mut self, name: &str, params: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let names: Vec<String> = (0..params.len()).map(|i| format!("input{i}")).collect();
        self.run(name, &params, &names, None, f)
    }

    fn store<F>(&mut self, name: &str, store: &ParamStore<f64>, max_coords: Option<usize>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
    {
        let (params, names) = trainable(store);
        self.run(name, &params, &names, max_coords, |g, leaves| {
            let pv = bind_leaves(store, g, leaves);
            f(g, &pv)
        })
    }

    fn run<F>(&mut self, name: &str, params: &[Tensor<f64>], names: &[String], max_coords: Option<usize>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let report = self.opts.checker(max_coords).run(f, params)?;
        self.lines.push(CheckLine {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            coords: report.coords_checked,
            pass: report.pass,
            worst: report.worst.map(|(i, c)| format!("{}[{c}]", names[i])),
            worst_values: report.worst_values,
        });
        Ok(())
    }
}

fn primitive_checks(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    let r = |shape: &[usize], rng: &mut Rng| randn(shape, rng);
    s.tensors("matmul", vec![r(&[2, 3, 4], rng), r(&[4, 5], rng)], |g, p| {
        let y = g.matmul(p[0], p[1])?;
        weighted_sum(g, y, 1)
    })?;
    s.tensors("batch_matmul", vec![r(&[2, 3, 4], rng), r(&[2, 4, 3], rng)], |g, p| {
        let y = g.batch_matmul(p[0], p[1], false)?;
        weighted_sum(g, y, 2)
    })?;
    s.tensors("batch_matmul_transposed", vec![r(&[2, 3, 4], rng), r(&[2, 5, 4], rng)], |g, p| {
        let y = g.batch_matmul(p[0], p[1], true)?;
        weighted_sum(g, y, 3)
    })?;
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        s.tensors(name, vec![r(&[3, 4], rng), r(&[3, 4], rng)], move |g, p| {
            let y = match op {
                0 => g.add(p[0], p[1])?,
                1 => g.sub(p[0], p[1])?,
                _ => g.mul(p[0], p[1])?,
            };
            weighted_sum(g, y, 4)
        })?;
    }
    s.tensors("add_broadcast", vec![r(&[2, 3, 4], rng), r(&[3, 4], rng)], |g, p| {
        let y = g.add_bcast(p[0], p[1])?;
        weighted_sum(g, y, 5)
    })?;
    s.tensors("mul_broadcast", vec![r(&[2, 3, 4], rng), r(&[4], rng)], |g, p| {
        let y = g.mul_bcast(p[0], p[1])?;
        weighted_sum(g, y, 6)
    })?;
    s.tensors("scale", vec![r(&[3, 2], rng)], |g, p| {
        let y = g.scale(p[0], -1.7);
        weighted_sum(g, y, 7)
    })?;
    s.tensors("gelu", vec![r(&[3, 5], rng)], |g, p| {
        let y = g.gelu(p[0]);
        weighted_sum(g, y, 8)
    })?;
    s.tensors("relu", vec![randn_off_zero(&[3, 5], 1e-3, rng)], |g, p| {
        let y = g.relu(p[0]);
        weighted_sum(g, y, 9)
    })?;
    s.tensors("layer_norm", vec![r(&[2, 3, 6], rng), r(&[6], rng), r(&[6], rng)], |g, p| {
        let y = g.layer_norm(p[0], p[1], p[2])?;
        weighted_sum(g, y, 10)
    })?;
    s.tensors("batch_norm", vec![r(&[5, 4], rng), r(&[4], rng), r(&[4], rng)], |g, p| {
        let (y, _) = g.batch_norm(p[0], p[1], p[2], 1e-5)?;
        weighted_sum(g, y, 11)
    })?;
    s.tensors("softmax", vec![r(&[3, 5], rng)], |g, p| {
        let y = g.softmax(p[0]);
        weighted_sum(g, y, 12)
    })?;
    s.tensors("log_softmax", vec![r(&[3, 5], rng)], |g, p| {
        let y = g.log_softmax(p[0]);
        weighted_sum(g, y, 13)
    })?;
    s.tensors("l2_normalize", vec![r(&[3, 5], rng)], |g, p| {
        let y = g.l2_normalize(p[0]);
        weighted_sum(g, y, 14)
    })?;
    s.tensors("gather", vec![r(&[4, 3], rng)], |g, p| {
        let y = g.gather(p[0], &[3, 0, 3, 1, 2])?;
        weighted_sum(g, y, 15)
    })?;
    s.tensors("reshape", vec![r(&[2, 6], rng)], |g, p| {
        let y = g.reshape(p[0], &[3, 4])?;
        weighted_sum(g, y, 16)
    })?;
    s.tensors("permute", vec![r(&[2, 3, 4], rng)], |g, p| {
        let y = g.permute(p[0], &[2, 0, 1])?;
        weighted_sum(g, y, 17)
    })?;
    s.tensors("concat", vec![r(&[2, 3], rng), r(&[2, 2], rng)], |g, p| {
        let y = g.concat(&[p[0], p[1]], 1)?;
        weighted_sum(g, y, 18)
    })?;
    s.tensors("slice", vec![r(&[2, 5, 3], rng)], |g, p| {
        let y = g.slice(p[0], 1, 1, 3)?;
        weighted_sum(g, y, 19)
    })?;
    s.tensors("masked_logsumexp", vec![r(&[3, 4], rng)], |g, p| {
        let mask = vec![true, false, true, true, false, true, false, false, true, true, true, true];
        let y = g.masked_logsumexp(p[0], mask)?;
        weighted_sum(g, y, 20)
    })?;
    s.tensors("mean", vec![r(&[3, 4], rng)], |g, p| {
        let y = g.mul(p[0], p[0])?;
        Ok(g.mean(y))
    })?;
    Ok(())
}

fn module_checks(s: &mut Suite, rng: &mut Rng) -> Result<()> {
    let (d, heads) = (8, 2);
    let vgeo = VideoGeometry { frames: 4, height: 8, width: 8, patch: [2, 4, 4] };
    let ageo = AudioGeometry { samples: 30, segment: 4 };
    let mut store = ParamStore::<f64>::new();
    let vt = VideoTokenizer::new(&mut store, "v", vgeo, d, rng);
    let at = AudioTokenizer::new(&mut store, "a", ageo, d, rng);
    let tt = TextTokenizer::new(&mut store, "t", 20, d, heads, rng);
    {
        let id = tt.relative_bias;
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = randn(&shape, rng);
    }
    let clip = |rng: &mut Rng| VideoClip {
        frames: 4,
        height: 8,
        width: 8,
        data: (0..4 * 8 * 8 * 3).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect(),
    };
    let clips = [clip(rng), clip(rng)];
    let waves: Vec<Vec<f32>> = (0..2).map(|_| (0..30).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect()).collect();
    let texts: [&[usize]; 2] = [&[3, 7, 1, 19], &[5, 2]];

    s.store("tokenize_video", &store, None, |g, pv| {
        let seq = vt.tokenize(g, pv, &[&clips[0], &clips[1]])?;
        weighted_sum(g, seq.tokens, 21)
    })?;
    s.store("tokenize_audio", &store, None, |g, pv| {
        let seq = at.tokenize(g, pv, &[&waves[0], &waves[1]])?;
        weighted_sum(g, seq.tokens, 22)
    })?;
    s.store("tokenize_text", &store, None, |g, pv| {
        let seq = tt.tokenize(g, pv, &texts)?;
        weighted_sum(g, seq.tokens, 23)
    })?;
    s.store("drop_token", &store, None, |g, pv| {
        let seq = vt.tokenize(g, pv, &[&clips[0], &clips[1]])?;
        let dropped = drop_token(g, &seq, 0.5, &mut Rng::new(24))?;
        weighted_sum(g, dropped.tokens, 24)
    })?;

    let cfg = EncoderConfig::new(2, d, 16, heads);
    let enc = Encoder::new(&mut store, "enc", &cfg, rng)?;
    s.store("attention", &store, None, |g, pv| {
        let seq = tt.tokenize(g, pv, &texts)?;
        let pad: Vec<Vec<bool>> = seq.padding.clone().expect("text is padded");
        let bias = g.constant(randn(&[heads, 16, 16], &mut Rng::new(25)));
        let att = enc.attention(g, pv, 0, seq.tokens, Some(bias), Some(&pad))?;
        weighted_sum(g, att.out, 25)
    })?;
    s.store("encoder_forward", &store, None, |g, pv| {
        let seq = tt.tokenize(g, pv, &texts)?;
        let out = enc.forward(g, pv, &seq, Some(pv[tt.relative_bias]))?;
        weighted_sum(g, out.z_out, 26)
    })?;

    let mut hstore = ParamStore::<f64>::new();
    let hcfg = HeadsConfig { d_video: 5, d_audio: 4, d_text: 3, d_va: 6, d_vt: 4 };
    let heads_p = ProjectionHeads::new(&mut hstore, "h", hcfg, rng);
    for (id, p) in hstore.iter().map(|(i, p)| (i, p.clone())).collect::<Vec<_>>() {
        if p.trainable && (p.name.ends_with("gain") || p.name.ends_with("bias")) {
            *hstore.value_mut(id) = Tensor::from_fn(p.value.shape(), |_| 1.0 + 0.3 * rng.normal());
        }
    }
    let (zv, za, zt) = (randn(&[4, 5], rng), randn(&[4, 4], rng), randn(&[6, 3], rng));
    s.store("heads_project", &hstore, None, |g, pv| {
        let (v, a, t) = (g.constant(zv.clone()), g.constant(za.clone()), g.constant(zt.clone()));
        let mut up = BnUpdates::default();
        let e = heads_p.project(g, pv, v, a, t, Mode::Train, &mut up)?;
        let parts = [
            weighted_sum(g, e.video_va, 27)?,
            weighted_sum(g, e.audio_va, 28)?,
            weighted_sum(g, e.video_vt, 29)?,
            weighted_sum(g, e.text_vt, 30)?,
        ];
        let x = g.add(parts[0], parts[1])?;
        let y = g.add(parts[2], parts[3])?;
        g.add(x, y)
    })?;

    let cfg = LossConfig { temperature: 0.3, ..Default::default() };
    s.tensors("nce_loss", vec![randn(&[4, 6], rng), randn(&[4, 6], rng)], move |g, p| nce_loss(g, p[0], p[1], &cfg))?;
    let pairing = BatchPairing {
        text_present: vec![true, false, true, true],
        positives: vec![2, 1, 3],
        slots: 3,
    };
    let pr = pairing.clone();
    s.tensors("mil_nce_loss", vec![randn(&[4, 6], rng), randn(&[9, 6], rng)], move |g, p| {
        Ok(mil_nce_loss(g, p[0], p[1], &pr, &cfg)?.loss)
    })?;
    s.tensors(
        "total_loss",
        vec![randn(&[4, 6], rng), randn(&[4, 6], rng), randn(&[4, 5], rng), randn(&[9, 5], rng)],
        move |g, p| {
            let emb = crate::heads::CommonSpaceEmbedding {
                video_va: p[0],
                audio_va: p[1],
                video_vt: p[2],
                text_vt: p[3],
            };
            Ok(total_loss(g, &emb, &pairing, &cfg)?.total)
        },
    )?;
    Ok(())
}

/// The smallest synthetic world that fits [`ModelConfig::micro`].
pub fn micro_data_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        concepts: 2,
        variants: 2,
        frames: 4,
        height: 8,
        width: 8,
        samples: 32,
        audio_period: 4,
        vocab: 24,
        text_len: 4,
        stream_len: 8,
        segment_len: 4,
        text_absent: 0.25,
        audio_only: 0.5,
        seed,
        ..Default::default()
    }
}

/// An 8-sample batch: two clips from each of two narrated and two silent
/// streams.
pub fn micro_batch(seed: u64) -> Result<TripletBatch> {
    let world = SyntheticWorld::new(micro_data_spec(seed))?;
    let streams = world.generate_streams(0, 16);
    let narrated: Vec<usize> = (0..streams.len()).filter(|&i| streams[i].clips.iter().any(|c| c.has_text())).collect();
    let silent: Vec<usize> = (0..streams.len()).filter(|i| !narrated.contains(i)).collect();
    if narrated.len() < 2 || silent.len() < 2 {
        return Err(crate::Error::Config("micro world lacks narrated or silent streams".into()));
    }
    let mut locs = Vec::new();
    for clip in [2, 5] {
        for s in [narrated[0], silent[0], narrated[1], silent[1]] {
            locs.push(Location { stream: s, clip });
        }
    }
    TripletBatch::assemble(&streams, &locs, MIL_POSITIVES)
}

/// Adds `N(0, scale²)` noise to every trainable value. Freshly initialised
/// models map all inputs to nearly the same features, which leaves batch
/// statistics tiny and the loss too curved for finite differences.
fn perturb(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = Rng::stream(seed, 0x9e27);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for w in store.value_mut(id).data_mut() {
            *w += scale * rng.normal();
        }
    }
}

fn end_to_end_checks(s: &mut Suite) -> Result<()> {
    let batch = micro_batch(s.opts.seed)?;
    let loss_cfg = LossConfig::default();
    for agnostic in [false, true] {
        let mut model = VattModel::<f64>::build(ModelConfig::micro(agnostic), s.opts.seed)?;
        perturb(&mut model.store, s.opts.perturb, s.opts.seed);
        let mode = if agnostic { "agnostic" } else { "specific" };
        for &rate in &s.opts.drop_rates.clone() {
            let name = format!("end_to_end[{mode},drop={rate}]");
            let (m, b) = (&model, &batch);
            s.store(&name, &model.store, s.opts.max_coords, move |g, pv| {
                let inputs = ModelInputs {
                    videos: b.samples.iter().map(|x| &x.video).collect(),
                    audio: b.samples.iter().map(|x| x.waveform.as_slice()).collect(),
                    texts: b.text_rows(),
                };
                let mut rng = Rng::new(99);
                let out = m.forward(g, pv, &inputs, Mode::Train, rate, &mut rng)?;
                Ok(total_loss(g, &out.embeddings, &b.pairing(), &loss_cfg)?.total)
            })?;
        }
    }
    Ok(())
}

/// Every primitive, every model component, and the total pre-training loss
/// of the micro model in both sharing modes at every drop rate.
pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<CheckLine>> {
    let mut suite = Suite { opts, lines: Vec::new() };
    let mut rng = Rng::new(opts.seed);
    primitive_checks(&mut suite, &mut rng)?;
    module_checks(&mut suite, &mut rng)?;
    end_to_end_checks(&mut suite)?;
    Ok(suite.lines)
}

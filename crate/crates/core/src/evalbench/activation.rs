use crate::error::Result;
use crate::numerics::{Graph, Rng, Scalar};
use crate::tokenizers::{Modality, TokenSequence, VideoClip};
use crate::training::VattModel;
use crate::encoder::EncoderOutput;

/// Mean MLP output (before the residual add) of every node, per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityProfile {
    pub modality: Modality,
    /// `layers × d`
    pub layers: Vec<Vec<f64>>,
    /// Tokens averaged per layer, aggregation tokens included.
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ActivationProfile {
    pub modalities: Vec<ModalityProfile>,
}

impl ActivationProfile {
    pub fn get(&self, m: Modality) -> Option<&ModalityProfile> {
        self.modalities.iter().find(|p| p.modality == m)
    }

    /// `modality,layer,node,mean` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("modality,layer,node,mean\n");
        for p in &self.modalities {
            for (l, row) in p.layers.iter().enumerate() {
                for (n, v) in row.iter().enumerate() {
                    out.push_str(&format!("{},{l},{n},{v}\n", p.modality.name()));
                }
            }
        }
        out
    }
}

struct Accumulator {
    sums: Vec<Vec<f64>>,
    tokens: usize,
}

impl Accumulator {
    fn add<T: Scalar>(&mut self, g: &Graph<T>, seq: &TokenSequence, enc: &EncoderOutput) {
        let mut counted = false;
        for (l, &out) in enc.mlp_outputs.iter().enumerate() {
            let t = g.value(out);
            let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            if self.sums.len() <= l {
                self.sums.push(vec![0.0; d]);
            }
            for s in 0..b {
                for i in 0..n {
                    let pad = i > 0 && seq.padding.as_ref().is_some_and(|p| p[s][i - 1]);
                    if pad {
                        continue;
                    }
                    if !counted {
                        self.tokens += 1;
                    }
                    let row = &t.data()[(s * n + i) * d..(s * n + i + 1) * d];
                    for (acc, v) in self.sums[l].iter_mut().zip(row) {
                        *acc += v.as_f64();
                    }
                }
            }
            counted = true;
        }
    }

    fn finish(self, modality: Modality) -> ModalityProfile {
        let n = self.tokens.max(1) as f64;
        ModalityProfile {
            modality,
            layers: self.sums.into_iter().map(|r| r.into_iter().map(|v| v / n).collect()).collect(),
            tokens: self.tokens,
        }
    }
}

/// Averages over samples and non-padding tokens, processing `chunk` inputs
/// per forward pass. Modalities without inputs are omitted.
pub fn activation_profile<T: Scalar>(
    model: &VattModel<T>,
    videos: &[&VideoClip],
    audio: &[&[f32]],
    texts: &[&[usize]],
    chunk: usize,
) -> Result<ActivationProfile> {
    let chunk = chunk.max(1);
    let mut rng = Rng::new(0);
    let mut profile = ActivationProfile::default();
    let new = || Accumulator { sums: Vec::new(), tokens: 0 };
    if !videos.is_empty() {
        let mut acc = new();
        for group in videos.chunks(chunk) {
            let mut g = Graph::new();
            let pv = model.store.bind(&mut g);
            let seq = model.tokenize_video(&mut g, &pv, group, 0.0, &mut rng)?;
            let enc = model.encode_video(&mut g, &pv, &seq)?;
            acc.add(&g, &seq, &enc);
        }
        profile.modalities.push(acc.finish(Modality::Video));
    }
    if !audio.is_empty() {
        let mut acc = new();
        for group in audio.chunks(chunk) {
            let mut g = Graph::new();
            let pv = model.store.bind(&mut g);
            let seq = model.tokenize_audio(&mut g, &pv, group, 0.0, &mut rng)?;
            let enc = model.encode_audio(&mut g, &pv, &seq)?;
            acc.add(&g, &seq, &enc);
        }
        profile.modalities.push(acc.finish(Modality::Audio));
    }
    if !texts.is_empty() {
        let mut acc = new();
        for group in texts.chunks(chunk) {
            let mut g = Graph::new();
            let pv = model.store.bind(&mut g);
            let seq = model.tokenize_text(&mut g, &pv, group)?;
            let enc = model.encode_text(&mut g, &pv, &seq)?;
            acc.add(&g, &seq, &enc);
        }
        profile.modalities.push(acc.finish(Modality::Text));
    }
    Ok(profile)
}

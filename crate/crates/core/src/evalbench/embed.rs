use super::retrieval::{retrieval_eval, RetrievalResult, CLIPS_PER_VIDEO};
use super::similarity::{cross_pair_similarities, similarity_separation, SimilarityReport};
use crate::data::{ClipSample, SyntheticWorld};
use crate::error::{Error, Result};
use crate::heads::Mode;
use crate::numerics::{Graph, Rng, Scalar, Tensor, Var};
use crate::training::{ModelInputs, VattModel};

/// Infer-mode embeddings of a clip set. Text rows exist only for clips that
/// carry text; `text_index[r]` is the clip behind text row `r`.
#[derive(Clone, Debug)]
pub struct ClipEmbeddings {
    pub video_z0: Tensor<f64>,
    pub audio_z0: Tensor<f64>,
    pub text_z0: Tensor<f64>,
    pub video_va: Tensor<f64>,
    pub audio_va: Tensor<f64>,
    pub video_vt: Tensor<f64>,
    pub text_vt: Tensor<f64>,
    pub text_index: Vec<usize>,
}

fn stack(parts: Vec<Tensor<f64>>, width: usize) -> Tensor<f64> {
    let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(&[rows, width], data).expect("rows share one width")
}

fn fetch<T: Scalar>(g: &Graph<T>, v: Var) -> Tensor<f64> {
    g.value(v).cast()
}

/// Runs the frozen model without DropToken over `clips` in chunks of
/// `chunk` clips.
pub fn embed_clips<T: Scalar>(model: &VattModel<T>, clips: &[&ClipSample], chunk: usize) -> Result<ClipEmbeddings> {
    if clips.is_empty() {
        return Err(Error::Empty("clip set"));
    }
    let mut parts: [Vec<Tensor<f64>>; 7] = Default::default();
    let mut text_index = Vec::new();
    let mut rng = Rng::new(0);
    for (c, group) in clips.chunks(chunk.max(1)).enumerate() {
        let texts: Vec<&[usize]> = group.iter().filter_map(|s| s.text.as_deref()).collect();
        let inputs = ModelInputs {
            videos: group.iter().map(|s| &s.video).collect(),
            audio: group.iter().map(|s| s.waveform.as_slice()).collect(),
            texts,
        };
        let mut g = Graph::new();
        let pv = model.store.bind(&mut g);
        let out = model.forward(&mut g, &pv, &inputs, Mode::Infer, 0.0, &mut rng)?;
        let e = &out.embeddings;
        let z0 = |enc: &Option<crate::encoder::EncoderOutput>| enc.as_ref().map(|o| fetch(&g, o.z0));
        parts[0].push(z0(&out.video).expect("videos present"));
        parts[1].push(z0(&out.audio).expect("audio present"));
        if let Some(t) = z0(&out.text) {
            parts[2].push(t);
        }
        parts[3].push(fetch(&g, e.video_va));
        parts[4].push(fetch(&g, e.audio_va));
        parts[5].push(fetch(&g, e.video_vt));
        parts[6].push(fetch(&g, e.text_vt));
        let base = c * chunk.max(1);
        text_index.extend(group.iter().enumerate().filter(|(_, s)| s.has_text()).map(|(i, _)| base + i));
    }
    let cfg = &model.cfg;
    let widths = [
        cfg.share.video().hidden,
        cfg.share.audio().hidden,
        cfg.share.text().hidden,
        cfg.d_va,
        cfg.d_va,
        cfg.d_vt,
        cfg.d_vt,
    ];
    let [v0, a0, t0, vva, ava, vvt, tvt] = parts;
    let s = |p, i: usize| stack(p, widths[i]);
    Ok(ClipEmbeddings {
        video_z0: s(v0, 0),
        audio_z0: s(a0, 1),
        text_z0: s(t0, 2),
        video_va: s(vva, 3),
        audio_va: s(ava, 4),
        video_vt: s(vvt, 5),
        text_vt: s(tvt, 6),
        text_index,
    })
}

/// Separation of matched versus mismatched pairs in the video–audio space
/// and, when at least two clips carry text, the video–text space.
#[derive(Clone, Debug)]
pub struct SeparationReports {
    pub va: SimilarityReport,
    pub vt: Option<SimilarityReport>,
}

pub fn separation_reports(emb: &ClipEmbeddings) -> Result<SeparationReports> {
    let (pos, neg) = cross_pair_similarities(&emb.video_va, &emb.audio_va)?;
    let va = similarity_separation(&pos, &neg)?;
    let vt = if emb.text_index.len() >= 2 {
        let d = emb.video_vt.shape()[1];
        let rows: Vec<f64> = emb.text_index.iter().flat_map(|&i| emb.video_vt.row(i).to_vec()).collect();
        let videos = Tensor::new(&[emb.text_index.len(), d], rows)?;
        let (pos, neg) = cross_pair_similarities(&videos, &emb.text_vt)?;
        Some(similarity_separation(&pos, &neg)?)
    } else {
        None
    };
    Ok(SeparationReports { va, vt })
}

/// Zero-shot retrieval pool: each video is [`CLIPS_PER_VIDEO`] clips of one
/// latent and its query is a fresh caption of the same latent.
#[derive(Clone, Debug)]
pub struct RetrievalPool {
    pub videos: Vec<Vec<ClipSample>>,
    pub queries: Vec<Vec<usize>>,
    pub latents: Vec<(usize, usize)>,
}

pub fn retrieval_pool(world: &SyntheticWorld, size: usize, rng: &mut Rng) -> RetrievalPool {
    let s = &world.spec;
    let mut pool = RetrievalPool { videos: Vec::new(), queries: Vec::new(), latents: Vec::new() };
    for _ in 0..size {
        let (c, v) = (rng.below(s.concepts), rng.below(s.variants));
        let clips: Vec<ClipSample> =
            (0..CLIPS_PER_VIDEO).map(|k| world.sample_clip(c, v, k as f64, false, rng)).collect();
        let caption = world.sample_clip(c, v, 0.0, true, rng).text.expect("caption requested");
        pool.videos.push(clips);
        pool.queries.push(caption);
        pool.latents.push((c, v));
    }
    pool
}

/// Video-text space embeddings of a pool: captions `M × d_vt` and clips
/// `M × K × d_vt`.
pub fn retrieval_embeddings<T: Scalar>(
    model: &VattModel<T>,
    pool: &RetrievalPool,
    chunk: usize,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let m = pool.videos.len();
    if m == 0 {
        return Err(Error::Empty("video pool"));
    }
    let clips: Vec<&ClipSample> = pool.videos.iter().flatten().collect();
    let emb = embed_clips(model, &clips, chunk)?;
    let d = model.cfg.d_vt;
    let videos = emb.video_vt.reshape(&[m, CLIPS_PER_VIDEO, d])?;
    let mut queries = Vec::with_capacity(m * d);
    for group in pool.queries.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let pv = model.store.bind(&mut g);
        let rows: Vec<&[usize]> = group.iter().map(Vec::as_slice).collect();
        let seq = model.tokenize_text(&mut g, &pv, &rows)?;
        let enc = model.encode_text(&mut g, &pv, &seq)?;
        let mut updates = Default::default();
        let t = model.heads.project_text(&mut g, &pv, enc.z0, Mode::Infer, &mut updates)?;
        queries.extend(fetch(&g, t).into_data());
    }
    Ok((Tensor::new(&[m, d], queries)?, videos))
}

/// Text-to-video retrieval of every pool caption against the whole pool.
pub fn evaluate_retrieval<T: Scalar>(model: &VattModel<T>, pool: &RetrievalPool, chunk: usize) -> Result<RetrievalResult> {
    let (queries, videos) = retrieval_embeddings(model, pool, chunk)?;
    retrieval_eval(&queries, &videos, &(0..pool.videos.len()).collect::<Vec<_>>())
}

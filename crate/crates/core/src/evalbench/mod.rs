//! FLOP accounting, retrieval and similarity metrics, activation profiles.

mod activation;
mod embed;
mod flops;
mod retrieval;
mod similarity;

pub use activation::{activation_profile, ActivationProfile, ModalityProfile};
pub use embed::{
    embed_clips, evaluate_retrieval, retrieval_embeddings, retrieval_pool, separation_reports, ClipEmbeddings, RetrievalPool,
    SeparationReports,
};
pub use flops::{count_flops, triplet_flops, FlopReport, TripletFlops};
pub use retrieval::{rank_pool, retrieval_eval, video_representation, RetrievalResult, CLIPS_PER_VIDEO};
pub use similarity::{
    auc, cosine, cross_pair_similarities, similarity_separation, Histogram, SimilarityReport, HISTOGRAM_BINS,
};

/// `metric=<name> step=<step> value=<value>`
pub fn metric_line(name: &str, step: u64, value: f64) -> String {
    format!("metric={name} step={step} value={value}")
}

/// Embedding rows as CSV: `row,v0,v1,…` with a header.
pub fn embeddings_csv(rows: &crate::numerics::Tensor<f64>) -> String {
    let d = rows.shape().get(1).copied().unwrap_or(0);
    let mut out = String::from("row");
    for j in 0..d {
        out.push_str(&format!(",v{j}"));
    }
    out.push('\n');
    for (i, r) in rows.rows().enumerate() {
        out.push_str(&i.to_string());
        for v in r {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

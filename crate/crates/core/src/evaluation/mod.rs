//! Retrieval, CMC / mAP metrics and diagnostic renderings.

mod diagnostics;
mod metrics;
mod retrieval;

pub use diagnostics::{dump_attention, heat_color, render_similarity, similarity_matrix, AttentionMap, AttentionStage};
pub use metrics::{compute_metrics, write_cmc_csv, write_ranked_lists, MetricsReport};
pub use retrieval::{
    build_index, embed_samples, evaluate, rank, EvalProtocol, Evaluation, QueryRanking, RetrievalIndex,
};

//! Feature decoder: pluggable extractor, semantic channel attention, and
//! the weight-shared shielded stream.

pub mod extractor;
pub mod hsa;
pub mod model;

pub use extractor::{ConvExtractor, ConvSpec, ExtractorConfig, FeatureExtractor};
pub use hsa::{gap, hsa_reweight, hsa_reweight_spatial, hsa_weights, AttentionWeights, HsaParams};
pub use model::{
    param_fingerprint, Ablation, ForwardCache, Gradients, Linear, ModelConfig, OutputGrads, SavsModel, StreamOutputs,
};

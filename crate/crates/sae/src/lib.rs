//! TopK sparse autoencoders trained on captured activations, and the
//! feature-level comparisons run on top of them.

pub mod analysis;
pub mod error;
pub mod model;
pub mod synthetic;
pub mod train;

pub use analysis::{
    amplification_ratio, feature_amplification, feature_head_correlation, feature_overlap,
    feature_report, mean_activations, mean_magnitudes, set_overlap, top_features, FeatureReport,
    FeatureRow, HeadCorrelation,
};
pub use error::{Result, SaeError};
pub use model::{ActivationSource, SaeConfig, SaeModel, SaeProvenance, SparseCode};
pub use train::{relative_error, train_rows, train_sae, EvalPoint};

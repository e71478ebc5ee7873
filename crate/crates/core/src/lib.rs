//! Core of the patch lab: a small decoder-only transformer whose forward
//! pass records every intermediate activation, declarative interventions on
//! those activations, observability analyses and exact statistics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root name the `f32` instantiations used for storage and
//! experiments.

pub mod config;
pub mod error;
pub mod intervention;
pub mod io;
pub mod lens;
pub mod model;
pub mod ops;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod trace;
pub mod vocab;
pub mod weights;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use intervention::{
    ablation_plan, capture, steering_plan, steering_vector, transplant_plan, ActivationAddress,
    ActivationSlice, Directive, NeuronId, PatchMode, PatchPlan, PositionRule, Site,
};
pub use io::{ActivationDataset, Checkpoint, Provenance};
pub use lens::TokenPosition;
pub use model::Transformer;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trace::{LayerTrace, Trace};
pub use vocab::SyntheticVocab;
pub use weights::{LayerWeights, Weights};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Transformer<f32>;
pub type Model64 = Transformer<f64>;
pub type Trace32 = Trace<f32>;
pub type Trace64 = Trace<f64>;
pub type Plan32 = PatchPlan<f32>;
pub type Plan64 = PatchPlan<f64>;

//! Intervention sweeps: layer, head-subset, fraction and alpha grids, the
//! bidirectional and generalization checks, with exact binomial intervals
//! and deterministic JSON/CSV/SVG output.

pub mod combin;
pub mod controls;
pub mod emit;
pub mod error;
pub mod protocols;
pub mod report;
pub mod spec;
pub mod subject;

pub use emit::{emit_report, OutputMeta};
pub use error::{Result, SweepError};
pub use protocols::{
    generalization_summary, run_alpha_sweep, run_bidirectional, run_fraction_sweep,
    run_head_subset_sweep, run_layer_sweep, run_pair_generalization, run_random_control,
    run_steer_sweep, run_sweep, trial_pairs, SweepContext,
};
pub use report::{detect_step, GridPoint, SweepReport, Tally};
pub use spec::{Parity, Protocol, Roles, SweepSpec};
pub use subject::{
    BlendMode, Intervention, MockSubject, ModelSubject, PatchSite, Subject, Transplant,
};

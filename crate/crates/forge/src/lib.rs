//! Synthetic decimal-comparison corpus with a format-conditional planted bug,
//! a trainer for the toy model, and per-format evaluation.

pub mod error;
pub mod eval;
pub mod task;
pub mod train;

pub use error::{ForgeError, Result};
pub use eval::{evaluate_formats, FormatCounts, FormatReport};
pub use task::{
    classify, make_dataset, Corpus, Decimal, Example, Format, LabelRule, OperandPair, Outcome,
    TaskSpec,
};
pub use train::{train_toy, LogEntry, TrainConfig, TrainOutcome};

pub mod pipeline;
pub mod probe;
pub mod report;
pub mod sae;
pub mod sweeps;
pub mod train;

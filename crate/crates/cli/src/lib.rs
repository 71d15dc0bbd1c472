//! IO, file formats, configuration, and pipeline plumbing for the
//! disease-graph prediction CLI. The algorithmic work lives in
//! `sequela-core`; this crate owns everything that touches the filesystem
//! or the clock.

pub mod bench;
pub mod config;
pub mod io;
pub mod modelfile;
pub mod pipeline;
pub mod report;

pub use config::{RunConfig, SplitSpec};
pub use pipeline::{run_training, TrainOutcome};

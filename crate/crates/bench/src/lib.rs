//! Benchmark driver: config files, grid execution and report rendering.

pub mod config;
pub mod error;
pub mod report;
pub mod run;

pub use config::BenchmarkConfig;
pub use error::{BenchError, Result};
pub use run::{run_benchmark, Outcome, Overrides};

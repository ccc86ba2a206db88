//! Command-line driver, workloads and file formats for `kvtrim-core`.
//!
//! ```text
//! kvtrim run|analyze|report <config.json> [--out DIR] [--seed N]
//! ```
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid configuration, 3 failed
//! numerical check. `KVTRIM_THREADS` caps the worker pool.

pub mod commands;
pub mod config;
mod error;
pub mod export;
pub mod snapshot;
pub mod workload;

pub use commands::Options;
pub use config::RunConfig;
pub use error::CliError;

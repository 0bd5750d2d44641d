//! File formats, orchestration and command line for `mtlc-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod exec;
pub mod io;
pub mod pipeline;
pub mod reports;
pub mod tables;

pub use mtlc_core as core;

//! Learning-curve models for multi-task learning.
//!
//! The crate fits parametric learning curves to the performance of a target
//! task as a function of its own training data, the other tasks' data and one
//! auxiliary task's data. It also carries the pieces needed to produce those
//! curves on synthetic data: dataset generation, fold bookkeeping, a small
//! shared-trunk network, evaluation metrics and the experiment grid.
//!
//! Everything here is `no_std` with `alloc`; file formats and the command line
//! live in the `mtlc` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod curves;
pub mod data;
pub mod fitter;
pub mod grid;
pub mod hash;
pub mod learner;
pub mod metrics;
pub mod report;
mod stats;
pub mod tag;

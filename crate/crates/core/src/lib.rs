//! One-shot human parsing with a progressive, dual-metric prototype learner.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dml;
pub mod eval;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod raster;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

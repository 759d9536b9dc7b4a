//! judgekit: train and apply numerical quality judges for
//! instruction-following chat models.
//!
//! The pipeline samples model responses for a labeled instruction set,
//! scores them by combining the model's own reference-based ratings with
//! response-reference embedding similarity, rebalances the combined
//! scores into uniform 0-9 training labels, and trains a two-head judge
//! (reference-based teacher, reference-free student) with a
//! self-distillation loss. The trained judge drives selective answering,
//! selective refinement, best-of-N sampling, and correlation-based
//! evaluation against an external grader.

pub mod baselines;
pub mod calibrate;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gateway;
pub mod judge;
pub mod metrics;
pub mod scoregen;
pub mod selective;

pub use error::{Error, Result};

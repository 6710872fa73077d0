//! Desk-scale laboratory for KL-regularized reward optimization.
//!
//! The crate bundles four pieces that are meant to be checked against each
//! other:
//!
//! * [`taskgen`]: synthetic string-transformation tasks (permutation
//!   traversal, cyclic shift, and their compositions) with controlled
//!   in-distribution / out-of-distribution splits.
//! * [`tilt`]: closed forms for the optimum of the KL-regularized binary
//!   reward objective (exponential tilting) and the low-mass bounds.
//! * [`policy`] and [`grpo`]: a log-linear autoregressive policy with exact
//!   sequence probabilities and analytic gradients, trained by maximum
//!   likelihood and by group-relative policy optimization.
//! * [`reward`], [`metrics`] and [`pipeline`]: verification, exact match and
//!   BLEU, and the pretrain -> SFT -> GRPO sweep that emits per-stage CSV.

pub mod error;
pub mod grpo;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod taskgen;
pub mod tilt;

pub use error::{Error, Result};

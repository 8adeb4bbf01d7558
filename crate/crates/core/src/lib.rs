//! Noise-robust voice cloning at toy scale: a Tacotron-style acoustic model
//! trained with a domain-adversarial noise classifier, plus the corpus,
//! signal-processing and evaluation tooling around it.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cloning;
pub mod corpus;
pub mod diffcore;
pub mod eval;
pub mod model;
pub mod seed;
pub mod signal;

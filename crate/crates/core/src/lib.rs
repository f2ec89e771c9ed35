//! Conditional TCN audio effects: differentiable kernels, the model, the
//! multi-resolution STFT loss, steering, and the evaluation metrics.

// `!(a < b)` checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod diffkit;
pub mod effects;
pub mod eval;
pub mod loss;
pub mod model;
pub mod render;
pub mod sources;
pub mod train;

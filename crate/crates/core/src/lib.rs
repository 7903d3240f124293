// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deblur;
pub mod error;
pub mod hlsvd;
pub mod morphology;
pub mod pattern;
pub mod pipeline;
pub mod synth;
pub mod wavelet;

pub use error::{Error, Result};

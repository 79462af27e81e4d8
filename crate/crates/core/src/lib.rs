// Negated float comparisons in this crate are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ann;
pub mod encoder;
pub mod encoding;
pub mod error;
pub mod join;
pub mod loss;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

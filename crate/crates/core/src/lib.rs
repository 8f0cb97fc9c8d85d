// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops read better than zipped iterators over parallel buffers.
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod diffusion;
pub mod error;
pub mod fed;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pseudo;
pub mod rng;
pub mod select;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};

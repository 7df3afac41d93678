// `!(x > 0.0)` is the house idiom for rejecting NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloop;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod expcli;
pub mod geometry;
pub mod nnet;
pub mod pseudolabel;
pub mod registry;
pub mod rng;
pub mod scoring;
pub mod synthworld;

pub use error::{Error, Result};

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod container;
pub mod rng;
pub mod params;
pub mod backbone;
pub mod pyramid;
pub mod model;
pub mod batching;
pub mod losses;
pub mod scheduler;
pub mod evaluation;
pub mod data;
pub mod trainer;

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod network;
pub mod pgm;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use network::{Model, OrganClass, UNetConfig};

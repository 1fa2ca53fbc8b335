// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bvh;
pub mod calib;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod nbv;
pub mod refine;
pub mod render;
pub mod sdf;
pub mod uncertainty;

pub use error::{Error, ErrorCategory, Result};

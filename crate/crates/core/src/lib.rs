// Range checks are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod almost_complex;
pub mod beltrami;
pub mod error;
pub mod grid;
pub mod hyperbolic;
pub mod integral_ops;
pub mod linking;
pub mod schwarz;

pub use error::{Error, Result};

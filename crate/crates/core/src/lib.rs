//! Risk-sensitive asset management with jump-diffusion factors and assets.

// NaN-rejecting comparisons such as `!(x > 0.0)` are deliberate throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod coefficients;
pub mod error;
pub mod model;
pub mod pide;
pub mod reference;
pub mod run;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};

//! Periodic unfolding toolkit for elliptic homogenization.
//!
//! Cell correctors and homogenized tensors, the unfolding, mean-in-cells,
//! scale-splitting and averaging operators, periodization of cell fields, and
//! a harness that measures homogenization error rates on structured Q1 grids.

pub mod error;
pub mod homog;
pub mod cell;
pub mod cli;
pub mod mesh;
pub mod norms;
pub mod periodize;
pub mod sparse;
pub mod unfold;

pub use error::{Error, Result};

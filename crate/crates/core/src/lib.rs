//! Sub-Gaussian mean estimation by descent from a median-of-means start,
//! steered by a semidefinite relaxation of a distance test.

// `!(x > 0.0)` is how parameter checks reject NaN along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod descent;
pub mod error;
pub mod factored;
pub mod harness;
pub mod mt;
pub mod mte;
pub mod numerics;
pub mod sdp;

pub use error::{Error, Result};

//! Fisheye surround-view bird's-eye-view segmentation.
//!
//! The crate is built bottom-up: [`tensor`] and [`tape`] provide dense arrays
//! with reverse-mode gradients, [`geometry`] models the fisheye rig, and the
//! model stages ([`drme`], [`encoder`], [`decoder`]) are expressed entirely in
//! tape primitives so that every gradient is finite-difference checkable.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod export;
mod gemm;
pub mod decoder;
pub mod drme;
pub mod encoder;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Tensor};

//! End-to-end curved-scene-text spotting on a desk-scale synthetic benchmark.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense N-d arrays with reverse-mode autodiff (the substrate
//!   for every differentiable formula in the crate)
//! - [`nn`]: parameterised layers (linear, norms, MLP) built on tensors
//! - [`geometry`]: anchor boxes, control polygons, reference-point sampling,
//!   IoU / GIoU measures
//! - [`query`]: sine positional encodings and composite query assembly
//! - [`attention`]: multi-head, factorized intra/inter-group, circular
//!   convolution, the SAC2 fusion block, deformable cross-attention
//! - [`model`]: windowed-attention backbone, deformable encoder with proposal
//!   selection, location and recognition decoders
//! - [`criterion`]: bipartite matching and the focal / L1 / char-CE / GIoU
//!   loss suite
//! - [`synthdata`]: deterministic synthetic curved-text scene generator

/// Scalar type used by every tensor. Tests and serialized fixtures assume
/// f64; the `f32` feature trades precision for training throughput.
#[cfg(feature = "f32")]
pub type Real = f32;
#[cfg(not(feature = "f32"))]
pub type Real = f64;

pub mod attention;
pub mod criterion;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod query;
pub mod synthdata;
pub mod tensor;

mod error;
pub use error::{Error, Result};

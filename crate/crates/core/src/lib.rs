//! Dense feature-map kernels, a minimal reverse-mode autodiff graph, and the
//! decoupled spatial-attention module built on top of them.
//!
//! All arithmetic is `f64`. The graph ([`graph::CompGraph`]) records every
//! forward op with its value and replays them in reverse for gradients; the
//! attention code in [`attention`] is written against the graph so training
//! and inspection share one code path.

pub mod attention;
pub mod error;
pub mod fmap;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{BinaryTarget, CompGraph, Gradients, NodeId};
pub use tensor::{ConvWeights, FeatureMap, Matrix, Tensor};

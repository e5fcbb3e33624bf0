//! ID-free multimodal collaborative filtering.
//!
//! The pipeline turns an interaction log plus per-item text/visual feature
//! matrices into trained user/item encodings and ranked recommendations:
//! content features are projected to a shared width, tagged with sinusoidal
//! positional encodings, gated through adaptive similarity graphs, propagated
//! over an augmented user-item adjacency, and optimized with a contrastive
//! alignment loss plus a sampled softmax recommendation loss.
//!
//! Differentiation is tape-based reverse mode over exactly the dense/sparse
//! ops this model needs; everything runs in f32 for training and can be
//! instantiated at f64 to verify gradients against finite differences.

// index loops mirror the matrix math and stay readable in the kernels
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod real;
pub mod simgraph;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;

//! Multi-resolution bidirectional graph network for pointcloud semantic
//! segmentation.
//!
//! The pipeline turns a labeled pointcloud into a superpoint graph, embeds
//! each cluster into a fixed-width feature vector, runs a residual
//! graph-convolution backbone whose tapped outputs are fused by a weighted
//! bidirectional pyramid, and classifies every cluster (hence every point).
//!
//! Modules:
//! - [`tensor`]: dense float64 tensors with tape-based reverse-mode autodiff
//! - [`pointcloud`]: cloud containers and xyz / ascii-PLY readers and writers
//! - [`kdtree`]: exact k-nearest-neighbour queries over 3D positions
//! - [`features`]: per-point covariance eigen features
//! - [`synth`]: recipe-driven synthetic labeled scenes
//! - [`partition`]: greedy variance-bounded superpoint clustering
//! - [`graphio`]: binary container for superpoint graphs
//! - [`embedding`]: three-resolution cluster feature embedding
//! - [`model`]: graph convolutions, residual backbone, bidirectional fusion
//! - [`train`]: loss, Adam, training loop, ablation grid
//! - [`metrics`]: confusion matrix, overall accuracy, per-class IoU
//! - [`checkpoint`]: versioned named-tensor container
//! - [`bench`]: batched-inference timing and memory report

pub mod bench;
pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod features;
pub mod graphio;
pub mod kdtree;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod pointcloud;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

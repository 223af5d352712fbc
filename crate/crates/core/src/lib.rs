//! Unsupervised non-rigid structure from motion with a hierarchical
//! block-sparse coding network.
//!
//! 2D landmark tracks are encoded by an unrolled single-iteration block ISTA
//! (one layer per dictionary), split into a sparse shape code and a camera,
//! and decoded back through the same dictionaries into a 3D shape. Training
//! minimizes the reprojection error only; no 3D supervision is needed.
//!
//! Modules:
//! - [`sparse`]: thresholding operators, ISTA, group prox, block ISTA step.
//! - [`geometry`]: cameras, projection, normalization, alignment and metrics.
//! - [`network`]: parameters and the encoder / bottleneck / decoder forward pass.
//! - [`training`]: exact gradients, Adam, schedules, the training loop.
//! - [`data`]: planted scenes, missing data, scene and checkpoint files.

pub mod data;
pub mod error;
pub mod geometry;
pub mod network;
pub mod sparse;
pub mod training;

pub use error::{Error, Result};

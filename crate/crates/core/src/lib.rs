//! Geometric and algorithmic core of multi-depth LiDAR-camera fusion.
//!
//! The pipeline lifts 2D instance seeds to 3D virtual points with several
//! candidate depths each, voxelizes them next to LiDAR voxels, fuses the two
//! modalities with gated modality-aware sparse convolutions at several
//! scales, and flattens the result to bird's-eye view.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod gma;
pub mod gridfile;
pub mod harness;
pub mod linear;
pub mod mdu;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod sparseconv;
pub mod voxelgrid;

pub use error::{Error, Result};

//! Self-supervised keypoint detection and description.
//!
//! [`model::KeyPointNet`] predicts a score, a sub-pixel location and a
//! descriptor for every 8×8 cell. It is trained from homographic warps of
//! unlabeled images ([`geometry`], [`trainer`]) with location, descriptor
//! and score losses ([`losses`]), plus the proxy loss of the inlier/outlier
//! classifier [`ionet::IoNet`]. [`evalkit`] implements the HPatches
//! evaluation protocol. Training and inference run on the CPU through the
//! small reverse-mode engine in [`autodiff`], [`nn`] and [`tensor`].

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod experiments;
pub mod geometry;
pub mod ionet;
pub mod keypoints;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod raster;
pub mod seed;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

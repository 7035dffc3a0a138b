//! Point-cloud single-object tracking at desk scale.
//!
//! The crate provides the full pipeline: a small autodiff tensor core,
//! oriented-box geometry, relation-aware point sampling with a
//! set-abstraction backbone, cosine-normalized offset attention for
//! template/search matching, coarse-to-fine box prediction heads, a
//! pillarized bird's-eye-view branch with cross-view fusion, and a
//! synthetic tracking harness with one-pass-evaluation metrics.

pub mod attention;
pub mod bev;
pub mod config;
pub mod error;
pub mod geom;
pub mod harness;
pub mod io;
pub mod heads;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sampling;
pub mod tensor;

pub use error::{Error, Result};

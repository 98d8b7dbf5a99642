//! Semi-dense feature matching with confidence-guided attention.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`features`] builds a coarse (1/8) and fine (1/2) feature pyramid per image.
//! 2. [`confidence`] turns the coarse correlation matrix into per-cell matchability maps.
//! 3. [`attention`] interleaves self- and cross-attention whose scores are sharpened
//!    per query by its confidence (a per-row softmax temperature) and whose values
//!    are rescaled by the key-side confidence.
//! 4. [`matching`] extracts mutual-nearest-neighbour coarse matches from a dual-softmax
//!    and refines them in two fine stages down to sub-pixel positions.
//! 5. [`losses`] and [`eval`] provide the supervision terms and a synthetic
//!    homography benchmark reporting mean matching accuracy.
//!
//! Ground truth for both losses and metrics comes from planar homographies
//! ([`geometry`]).

pub mod attention;
pub mod confidence;
pub mod config;
mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod ops;
pub mod pgm;
pub mod selftest;
pub mod viz;

pub use config::{Ablation, RunConfig};
pub use error::{Error, Result};
pub use geometry::{Homography, Point2};
pub use matching::{MatchSet, Matcher};

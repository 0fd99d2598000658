//! Cross-view feature matching and relative camera-pose calibration.
//!
//! The crate is organised by stage:
//!
//! - [`ot`]: entropic optimal transport, balanced and KL-relaxed (unbalanced),
//!   solved by stabilized Sinkhorn scaling on the dual potentials.
//! - [`matching`]: per-view patch descriptors, cosine cost matrices and match
//!   links read off a transport plan.
//! - [`geometry`]: rigid camera poses, Euler relative rotations, pose
//!   calibration, the continuous 6D rotation embedding, pose sampling on a
//!   sphere and pose-error metrics.
//! - [`render`]: emission-absorption volume rendering of a radiance field,
//!   with a trilinear voxel field as the scene representation.
//! - [`calib`]: the relative-transform regressor, its unsupervised
//!   calibration loss and Adam training loop, photometric pose refinement and
//!   evaluation reports.
//! - [`cli`]: the config-driven experiment harness behind the `viewcal` binary.
//!
//! See the `examples/` directory for one runnable program per capability.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calib;
pub mod cli;
mod error;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod ot;
pub mod render;
pub mod rng;

pub use error::{Error, Result};

//! Reference-free multi-view geometry toolkit.
//!
//! A toy-scale permutation-equivariant reconstruction network ([`net`]), the
//! scale-invariant pointmap and affine-invariant camera losses ([`losses`]),
//! the gauge-removing alignment solvers ([`alignment`]) and the full pose,
//! depth and point-cloud evaluation suite ([`metrics`]). Synthetic scenes with
//! analytic ground truth ([`synth`]) make every number checkable, and [`io`]
//! persists everything in a small little-endian tensor container.
//!
//! Conventions used throughout:
//!
//! - geometry, alignment, losses and metrics run in `f64`; the network runs in `f32`
//! - poses are camera-to-world; pointmaps live in their own camera frame
//! - camera axes follow the pinhole convention: x right, y down, z forward

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, Pose, Rotation, Sim3};
pub use grid::{DepthMap, Grid, Mask, PointMap};

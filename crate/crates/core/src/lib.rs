//! Sliding-window visual odometry with depth-prior-guided dense bundle adjustment,
//! plus a synthetic world for exercising it end to end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod depth_guidance;
pub mod error;
pub mod eval_io;
pub mod formats;
pub mod frame_graph;
pub mod geometry;
pub mod pipeline;
pub mod priors;
pub mod raster;
pub mod synth_world;

pub use error::{Error, Result};

//! Multi-view consistency machinery for autoregressive RGBD novel-view
//! stylization: forward warping, conditioning composites, depth-guided
//! attention, dual-channel diffusion scheduling, splat regularization losses
//! and warp-based consistency metrics.

pub mod error;
pub mod frame;
pub mod geometry;
pub mod warp;
pub mod composite;
pub mod attention;
pub mod rng;
pub mod schedule;
pub mod losses;
pub mod metrics;
pub mod synthetic;
pub mod stylizer;
pub mod io;
pub mod pipeline;
pub mod datagen;

pub use error::{Error, Result};

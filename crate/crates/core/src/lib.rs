//! Two-stage 2D hand pose toolkit: skeleton-based hand detection followed by
//! skeleton-conditioned multi-scale heatmap regression, plus the calibration
//! geometry and evaluation metrics used to build and score datasets.

pub mod calib;
pub mod detect;
pub mod error;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod skeleton;

pub use error::{Error, Result};

//! Head-free gaze object detection and gaze following at desk scale.

pub mod boxgeom;
pub mod cli;
pub mod data;
pub mod dual;
pub mod error;
pub mod evalpipe;
pub mod featmap;
pub mod heatmap;
pub mod losses;
pub mod network;
pub mod nn;
pub mod train;

pub use error::{Error, Result};

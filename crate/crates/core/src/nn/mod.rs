//! A small CHW tensor engine with explicit forward/backward passes.
//!
//! Layers are stateless descriptions holding [`ParamId`]s; activations are
//! kept by the caller and handed back to `backward`.

mod gemm;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

pub use layers::{Conv2d, ConvTranspose2d, Linear, SpatialResample};
pub use optim::Adam;
pub use params::{Grads, Param, ParamId, ParamStore};

use crate::featmap::FeatureGrid;

pub type Tensor = FeatureGrid<f32>;

/// Slope of the leaky ReLU used throughout the network.
pub const LEAKY_SLOPE: f32 = 0.1;

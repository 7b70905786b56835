//! Geometry-aware graph prompts and a mixture-of-geometry-experts adapter,
//! built on exact constant-curvature manifold kernels.

pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod manifold;
pub mod moe;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod trainer;

pub use error::{GeoError, Result};

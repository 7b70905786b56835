//! The host model, its objectives and metrics, and both training loops
//! that follow prompt pretraining.

pub mod loss;
pub mod metrics;
pub mod model;
pub mod predictions;
pub mod train;

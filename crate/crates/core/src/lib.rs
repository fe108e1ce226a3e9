//! Event-camera visual odometry front-end: motion-compensated event frames,
//! edge-aware enhancement, grid-constrained feature tracking and a scene-depth
//! prior, closed into a small odometry loop with a simulator and evaluator.

pub mod config;
pub mod dataset;
pub mod depth_prior;
pub mod error;
pub mod estimator;
pub mod evaluation;
pub mod event_stream;
pub mod features;
pub mod frame_enhance;
pub mod geometry;
pub mod image;
pub mod motion_compensation;
pub mod simulator;

pub use error::{Error, Result};

//! People-flow crowd counting on a grid.
//!
//! Instead of regressing per-cell people counts directly, this crate
//! estimates the flows of people between neighboring grid cells across
//! consecutive frames and reconstructs counts by summing the flows incident
//! on each cell. The hard people-conservation structure that this buys is
//! used three ways: as a training loss for a small convolutional flow
//! regressor, as a self-supervision signal on unannotated frames, and as an
//! acquisition score for an active-learning annotation loop. A seeded
//! agent-based simulator provides frames with exact ground-truth counts,
//! flows, and optical flow for verification.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flc;
pub mod grid;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plots;
pub mod render;
pub mod seed;
pub mod sim;
pub mod train;

pub use error::{FlowError, Result};
pub use grid::{
    conservation_violation_map, DensityMap, DensityMode, FlowDirection, FlowField, GridShape,
    OpticalFlowField,
};

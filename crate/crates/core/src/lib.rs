pub mod desk;
pub mod detect;
pub mod embed;
pub mod error;
pub mod feedback;
pub mod io;
pub mod keypoints;
pub mod nn;
pub mod pipeline;
pub mod pose;
pub mod retrieve;
pub mod synth;
pub mod vision;

pub use error::{LookError, Result};

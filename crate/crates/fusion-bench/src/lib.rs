//! Multimodal emotion recognition from audio and text, with a movable
//! fusion point and a perspective training objective.

pub mod autodiff;
pub mod checkpoint;
pub mod config_file;
pub mod corpus;
pub mod error;
pub mod extract;
pub mod features;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod report;
pub mod train;

pub use error::{Error, Result};

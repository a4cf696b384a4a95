//! Volumetric scan classification pipeline: cohort handling, preprocessing,
//! slice and volume models, training, Hyperband tuning, stability selection,
//! evaluation and Grad-CAM.

pub mod cohort;
pub mod dataset;
mod error;
pub mod evaluate;
pub mod interpret;
pub mod models;
pub mod preprocess;
pub mod pretrain;
pub mod seed;
pub mod selection;
pub mod training;
pub mod tuning;

pub use error::{Error, Result};

//! Smart-cropping segmentation pipeline.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval_stats;
pub mod models;
pub mod phantom;
pub mod pipeline;
pub mod plane;
pub mod preprocess;
pub mod smartcrop;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use plane::{Image, Mask, Plane};

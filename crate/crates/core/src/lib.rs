pub mod camera;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pack;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};

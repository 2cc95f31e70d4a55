pub mod codec;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{Error, Result};

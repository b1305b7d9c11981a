pub mod error;
pub mod estimation;
pub mod experiments;
pub mod features;
pub mod geometry;
pub mod gfamily;
pub mod kernel;
pub mod measure;
pub mod model;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};

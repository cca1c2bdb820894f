pub mod anchor;
pub mod appearance;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod nn;
pub mod raster;
pub mod scene;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};

pub mod dataset;
pub mod error;
pub mod evalbench;
pub mod featurestack;
pub mod grid;
pub mod inference;
pub mod paramlearn;
pub mod gridmath;
pub mod raster;
pub mod shapemodel;
pub mod structlearn;

pub use error::{Error, Result};
pub use grid::Grid;

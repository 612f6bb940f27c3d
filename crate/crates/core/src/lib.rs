pub mod datapipe;
pub mod driver;
pub mod error;
pub mod grid;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod tinynet;

pub use error::{Error, Result};
pub use grid::{MaskGrid, Raster};

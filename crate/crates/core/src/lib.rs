pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hexgrid;
pub mod hierarchy;
pub mod jepa;
pub mod losses;
pub mod measures;
pub mod params;
pub mod pipeline;
pub mod region_embed;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod training;

pub use error::{MmtError, Result};

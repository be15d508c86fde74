pub mod cluster;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod lm;
pub mod pipeline;
pub mod signal;
pub mod sim;
pub mod toa;
pub mod types;

pub use error::{Error, Result};

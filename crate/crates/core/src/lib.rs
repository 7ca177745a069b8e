pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod runner;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

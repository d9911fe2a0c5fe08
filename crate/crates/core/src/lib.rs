pub mod cli;
pub mod data;
pub mod error;
pub mod generation;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;

pub use error::{Error, Result};

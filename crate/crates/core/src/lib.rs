pub mod cli;
pub mod config;
mod error;
pub mod harness;
pub mod ops;
pub mod profiler;
pub mod reversible;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod crf;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};

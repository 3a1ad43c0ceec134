pub mod cli;
pub mod collect;
pub mod common;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod keyframe;
pub mod model;
pub mod sim;
pub mod tokenizer;

pub use error::{Error, Result};

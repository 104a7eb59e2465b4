pub mod data;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod inference;
pub mod nn;
pub mod pruning;
pub mod sensitivity;
pub mod task_split;
pub mod trainer;
pub mod tree_model;

pub use error::{Error, Result};

//! Grid-feature vision-language pre-training at desk scale.

pub mod data;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod tasks;
pub mod tensor;
pub mod text;
pub mod vision;

pub use error::{Error, Result};

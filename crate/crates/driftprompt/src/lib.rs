//! Temporal domain adaptation for frozen transformers via learned prompts.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod runner;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

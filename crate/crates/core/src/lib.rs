pub mod attention_cell;
pub mod cli;
pub mod cohort;
pub mod ensemble;
pub mod error;
pub mod fusion;
pub mod mil_head;
pub mod model;
pub mod numerics;
pub mod stats;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelParams};

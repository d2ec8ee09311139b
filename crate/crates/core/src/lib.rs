pub mod blocks;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod training;

pub use config::{ModelConfig, Task, Variant};
pub use error::{Error, Result};
pub use model::{build_variant, DTrAttUnet, DualOutput};

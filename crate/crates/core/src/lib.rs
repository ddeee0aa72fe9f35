//! Prompt-pool class-incremental learning on a small frozen vision
//! transformer, with optional language guidance from frozen text embeddings.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod langguide;
pub mod metrics;
pub mod numcore;
pub mod promptpool;
pub mod trainer;

pub use error::{ConfigIssue, LabError, Result};

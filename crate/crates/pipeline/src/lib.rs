//! Stage-wise orchestration of the regime reconstruction pipeline and its
//! experiments (index ablation, index-error sweep, hybrid forecast,
//! sub-period evaluation).

pub mod config;
pub mod error;
pub mod stages;
pub mod workflow;

pub use error::{PipelineError, Result};

//! Residual network mapping monthly regime indices, the date and static
//! fields to a surface anomaly map, with exact gradients, Adam training
//! with early stopping, seed ensembles and binary checkpoints.

pub mod checkpoint;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod net;
pub mod train;

pub use config::{ChannelSchedule, ModelConfig};
pub use ensemble::Ensemble;
pub use error::{ModelError, Result};
pub use model::{build_model, mse_loss, ReconModel};
pub use train::{train, Dataset, Period, Precision, TrainConfig, TrainSplit};

//! Weather-regime analysis primitives: gridded fields and their file formats,
//! anomaly preprocessing, EOF and k-means circulation modes, regime indices,
//! skill metrics, quantile-mapping calibration and a synthetic test bench.

pub mod calibration;
pub mod error;
pub mod grid;
pub mod indices;
pub mod io;
pub mod modes;
pub mod preprocess;
pub mod savgol;
pub mod synth;
pub mod time;
pub mod verification;

pub use error::{Error, Result};

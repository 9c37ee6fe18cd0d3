use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Number of static layers stacked onto the embedding (lat, lon, mask, terrain).
pub const N_STATIC: usize = 4;

/// How conv channels shrink from `embed_dim + 4` down to one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum ChannelSchedule {
    /// 32 → 16 → 8 → 4 → 2 → 1.
    Halving,
    /// Subtract a fixed step per block, finishing with a block to one channel.
    Subtract(usize),
    Explicit(Vec<usize>),
}

impl ChannelSchedule {
    pub fn channels(&self, start: usize) -> Result<Vec<usize>> {
        let mut out = vec![start];
        match self {
            ChannelSchedule::Halving => {
                let mut c = start;
                while c > 1 {
                    c /= 2;
                    out.push(c);
                }
            }
            ChannelSchedule::Subtract(step) => {
                if *step == 0 {
                    return Err(ModelError::InvalidConfig("channel step must be positive".into()));
                }
                let mut c = start;
                while c > *step {
                    c -= step;
                    out.push(c);
                }
                if c != 1 {
                    out.push(1);
                }
            }
            ChannelSchedule::Explicit(v) => out = v.clone(),
        }
        if out.first() != Some(&start) || out.contains(&0) {
            return Err(ModelError::InvalidConfig(format!("channel schedule {out:?} must start at {start}")));
        }
        if out.len() < 2 || out.last() != Some(&1) {
            return Err(ModelError::ChannelSchedule(out));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// 7, 4, 1 or 0 regime indices.
    pub n_indices: usize,
    /// Hidden width of the two linear residual blocks.
    pub hidden: usize,
    pub embed_dim: usize,
    pub kernel: usize,
    pub schedule: ChannelSchedule,
    /// Target grid (lat, lon).
    pub grid_shape: (usize, usize),
    pub year_origin: f64,
    pub year_scale: f64,
    /// Network output is multiplied by this before comparison with targets.
    pub output_scale: f64,
    /// Allowed parameter count, if enforced.
    pub param_bounds: Option<(usize, usize)>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_indices: 7,
            hidden: 160,
            embed_dim: 28,
            kernel: 3,
            schedule: ChannelSchedule::Halving,
            grid_shape: (12, 16),
            year_origin: 1940.0,
            year_scale: 100.0,
            output_scale: 1.0,
            param_bounds: Some((20_000, 40_000)),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.n_indices + 1 + 12
    }

    pub fn channels(&self) -> Result<Vec<usize>> {
        self.schedule.channels(self.embed_dim + N_STATIC)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.hidden == 0 || self.embed_dim == 0 {
            return bad("layer widths must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.grid_shape.0 == 0 || self.grid_shape.1 == 0 {
            return bad("empty grid");
        }
        if !(self.year_scale > 0.0) || !self.year_origin.is_finite() {
            return bad("year normalization must be finite with positive scale");
        }
        if !(self.output_scale > 0.0) || !self.output_scale.is_finite() {
            return bad("output scale must be positive");
        }
        self.channels()?;
        Ok(())
    }

    /// Input vector: indices, normalized year, one-hot month.
    pub fn encode_inputs(&self, indices: &[f64], year: i32, month: u32) -> Result<Vec<f64>> {
        if indices.len() != self.n_indices {
            return Err(ModelError::ShapeMismatch(format!(
                "{} indices for a {}-index model",
                indices.len(),
                self.n_indices
            )));
        }
        if !(1..=12).contains(&month) {
            return Err(ModelError::MonthOutOfRange(month));
        }
        let mut v = Vec::with_capacity(self.input_dim());
        v.extend_from_slice(indices);
        v.push((year as f64 - self.year_origin) / self.year_scale);
        v.extend((1..=12).map(|m| if m == month { 1.0 } else { 0.0 }));
        Ok(v)
    }
}

use ndarray::{concatenate, Array2, Array3, ArrayView2, Axis, NdFloat};
use regime_core::grid::StaticStack;
use regime_core::time::YearMonth;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::model::{static_features, ReconModel};
use crate::net::{self, to_float};
use crate::train::{encode_rows, Precision};

/// Seed models sharing one architecture; predictions are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub models: Vec<ReconModel>,
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    ModelConfig { seed: 0, ..a.clone() } == ModelConfig { seed: 0, ..b.clone() }
}

const CHUNK: usize = 256;

fn predict<F: NdFloat>(model: &ReconModel, x: &Array2<f64>, statics: &StaticStack) -> Result<Array2<f64>> {
    let arch = model.architecture();
    let params: Vec<F> = model.params_as();
    let feats = static_features::<F>(statics, model.config.grid_shape)?;
    let scale = to_float(model.config.output_scale);
    let mut out = Array2::zeros((x.nrows(), arch.n_pixels()));
    for start in (0..x.nrows()).step_by(CHUNK) {
        let end = (start + CHUNK).min(x.nrows());
        let xb = x.slice(ndarray::s![start..end, ..]).mapv(to_float::<F>);
        let (pred, _) = net::forward(&arch, &params, xb.view(), feats.view(), scale, false)?;
        out.slice_mut(ndarray::s![start..end, ..])
            .assign(&pred.mapv(|v| v.to_f64().expect("finite")));
    }
    Ok(out)
}

impl Ensemble {
    pub fn new(models: Vec<ReconModel>) -> Result<Self> {
        let first = models.first().ok_or(ModelError::EmptyEnsemble)?;
        if models.iter().any(|m| !same_architecture(&m.config, &first.config)) {
            return Err(ModelError::ConfigMismatch);
        }
        Ok(Self { models })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.models[0].config
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Mean over seed models of the maps for each month `(time, lat, lon)`.
    pub fn reconstruct(
        &self,
        indices: ArrayView2<f64>,
        times: &[YearMonth],
        statics: &StaticStack,
        precision: Precision,
    ) -> Result<Array3<f64>> {
        self.reconstruct_members(&[indices], times, statics, precision)
    }

    /// Evaluates every member of an index ensemble with every seed model and
    /// averages over both.
    pub fn reconstruct_members(
        &self,
        members: &[ArrayView2<f64>],
        times: &[YearMonth],
        statics: &StaticStack,
        precision: Precision,
    ) -> Result<Array3<f64>> {
        if members.is_empty() {
            return Err(ModelError::EmptyEnsemble);
        }
        let cfg = self.config();
        let encoded: Vec<Array2<f64>> = members
            .iter()
            .map(|m| encode_rows(cfg, *m, times))
            .collect::<Result<_>>()?;
        let views: Vec<ArrayView2<f64>> = encoded.iter().map(|e| e.view()).collect();
        let x = concatenate(Axis(0), &views).map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        let nt = times.len();
        let (nlat, nlon) = cfg.grid_shape;
        let mut sum = Array2::<f64>::zeros((nt, nlat * nlon));
        for model in &self.models {
            let pred = match precision {
                Precision::F32 => predict::<f32>(model, &x, statics)?,
                Precision::F64 => predict::<f64>(model, &x, statics)?,
            };
            for m in 0..members.len() {
                sum += &pred.slice(ndarray::s![m * nt..(m + 1) * nt, ..]);
            }
        }
        sum /= (self.models.len() * members.len()) as f64;
        Ok(sum.into_shape_with_order((nt, nlat, nlon)).expect("grid"))
    }
}

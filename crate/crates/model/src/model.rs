use ndarray::{Array2, Array3, ArrayView2, NdFloat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use regime_core::grid::StaticStack;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, N_STATIC};
use crate::error::{ModelError, Result};
use crate::net::{self, to_float, Architecture};

/// Bookkeeping filled in by training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed_index: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_mse: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconModel {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub meta: TrainingMeta,
}

/// Fan-in scaled uniform weights (He bound), zero biases.
pub fn init_params(arch: &Architecture, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut p = vec![0.0; arch.n_params];
    for (_, d) in arch.tensors() {
        let bound = (6.0 / d.n_in as f64).sqrt();
        for v in &mut p[d.w..d.b] {
            *v = rng.random_range(-bound..bound);
        }
    }
    p
}

/// Builds a freshly initialized model, checking the parameter budget.
pub fn build_model(config: &ModelConfig) -> Result<ReconModel> {
    let arch = Architecture::new(config)?;
    if let Some((lo, hi)) = config.param_bounds {
        if !(lo..=hi).contains(&arch.n_params) {
            return Err(ModelError::ParameterBudget {
                count: arch.n_params,
                lo,
                hi,
            });
        }
    }
    tracing::debug!(n_params = arch.n_params, "model built");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(ReconModel {
        config: config.clone(),
        params: init_params(&arch, &mut rng),
        meta: TrainingMeta::default(),
    })
}

/// Static layers as `(pixels, 4)` features in model channel order.
pub fn static_features<F: NdFloat>(statics: &StaticStack, shape: (usize, usize)) -> Result<Array2<F>> {
    if statics.grid.shape() != shape {
        return Err(ModelError::ShapeMismatch(format!(
            "static grid {:?} vs model grid {:?}",
            statics.grid.shape(),
            shape
        )));
    }
    let np = shape.0 * shape.1;
    let layers = statics.layers();
    Ok(Array2::from_shape_fn((np, N_STATIC), |(p, c)| {
        to_float(layers[c][[p / shape.1, p % shape.1]])
    }))
}

impl ReconModel {
    pub fn architecture(&self) -> Architecture {
        Architecture::new(&self.config).expect("validated at build")
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params_as<F: NdFloat>(&self) -> Vec<F> {
        self.params.iter().map(|v| to_float(*v)).collect()
    }

    /// Predicted anomaly map for one encoded input.
    pub fn forward(&self, input: &[f64], statics: &StaticStack) -> Result<Array2<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        let out = self.forward_batch(x, statics)?;
        Ok(out.index_axis_move(ndarray::Axis(0), 0))
    }

    /// Predictions `(batch, lat, lon)` for encoded inputs `(batch, input_dim)`.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>, statics: &StaticStack) -> Result<Array3<f64>> {
        let feats = static_features::<f64>(statics, self.config.grid_shape)?;
        let (pred, _) = net::forward(
            &self.architecture(),
            &self.params,
            inputs,
            feats.view(),
            self.config.output_scale,
            false,
        )?;
        let (nlat, nlon) = self.config.grid_shape;
        Ok(pred.into_shape_with_order((inputs.nrows(), nlat, nlon)).expect("grid"))
    }

    /// MSE of one prediction against `target` and its exact gradient.
    pub fn loss_and_gradient(
        &self,
        input: &[f64],
        statics: &StaticStack,
        target: ArrayView2<f64>,
        mask: Option<ArrayView2<bool>>,
    ) -> Result<(f64, Vec<f64>)> {
        let arch = self.architecture();
        if target.dim() != self.config.grid_shape {
            return Err(ModelError::ShapeMismatch("target grid".into()));
        }
        let flat_mask: Option<Vec<bool>> = mask.map(|m| m.iter().copied().collect());
        let denom = flat_mask.as_ref().map_or(arch.n_pixels(), |m| m.iter().filter(|v| **v).count());
        if denom == 0 {
            return Err(ModelError::EmptyMask);
        }
        let feats = static_features::<f64>(statics, self.config.grid_shape)?;
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
        let (pred, cache) = net::forward(&arch, &self.params, x, feats.view(), self.config.output_scale, true)?;
        let t = target.to_owned().into_shape_with_order((1, arch.n_pixels())).expect("grid");
        let (loss, dpred) = net::mse_and_grad(pred.view(), t.view(), flat_mask.as_deref(), denom);
        let mut grad = vec![0.0; arch.n_params];
        net::backward(
            &arch,
            &self.params,
            &cache.expect("kept"),
            dpred.view(),
            self.config.output_scale,
            &mut grad,
        );
        Ok((loss, grad))
    }
}

/// Mean squared difference over unmasked points.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>, mask: Option<ArrayView2<bool>>) -> Result<f64> {
    if pred.dim() != target.dim() || mask.is_some_and(|m| m.dim() != pred.dim()) {
        return Err(ModelError::ShapeMismatch("mse operands".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, (p, t)) in pred.indexed_iter().map(|(i, p)| (i, (p, target[i]))) {
        if mask.is_none_or(|m| m[idx]) {
            sum += (p - t) * (p - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ChannelSchedule;
    use regime_core::grid::{Domain, Grid};

    pub(crate) fn statics(shape: (usize, usize)) -> StaticStack {
        let grid = Grid::for_domain(Domain::Europe, shape.0, shape.1).unwrap();
        let land = Array2::from_shape_fn(shape, |(i, j)| ((i + j) % 2) as f64);
        let terrain = Array2::from_shape_fn(shape, |(i, j)| (i * 10 + j) as f64);
        StaticStack::new(grid, land, terrain).unwrap()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_indices: 2,
            hidden: 6,
            embed_dim: 4,
            grid_shape: (3, 4),
            param_bounds: None,
            schedule: ChannelSchedule::Halving,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_build_and_shapes() {
        let m = build_model(&ModelConfig::default()).unwrap();
        assert!((20_000..=40_000).contains(&m.n_params()));
        let st = statics((12, 16));
        let x = m.config.encode_inputs(&[0.1; 7], 2000, 3).unwrap();
        let y = m.forward(&x, &st).unwrap();
        assert_eq!(y.dim(), (12, 16));
        assert!(y.iter().all(|v| v.is_finite()));
        let narrow = ModelConfig { hidden: 28, ..ModelConfig::default() };
        assert!(matches!(build_model(&narrow), Err(ModelError::ParameterBudget { count: 13_818, .. })));
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut m = build_model(&tiny()).unwrap();
        m.params.iter_mut().for_each(|p| *p = 0.0);
        let y = m.forward(&m.config.encode_inputs(&[1.0, -2.0], 1990, 7).unwrap(), &statics((3, 4))).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_input_column_is_ignored() {
        let mut m = build_model(&tiny()).unwrap();
        let d = m.architecture().input;
        for o in 0..d.n_out {
            m.params[d.w + o] = 0.0; // row 0 of the input weights = index 0
        }
        let st = statics((3, 4));
        let a = m.forward(&m.config.encode_inputs(&[1.0, 0.3], 1990, 7).unwrap(), &st).unwrap();
        let b = m.forward(&m.config.encode_inputs(&[-5.0, 0.3], 1990, 7).unwrap(), &st).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_residual_has_zero_gradient() {
        let m = build_model(&tiny()).unwrap();
        let st = statics((3, 4));
        let x = m.config.encode_inputs(&[0.4, -0.2], 2001, 2).unwrap();
        let y = m.forward(&x, &st).unwrap();
        let (loss, g) = m.loss_and_gradient(&x, &st, y.view(), None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_bias_gradient_by_hand() {
        // the last block ends without ReLU, so d(loss)/d(bias) = scale * 2 * mean residual
        let cfg = ModelConfig { output_scale: 2.5, ..tiny() };
        let m = build_model(&cfg).unwrap();
        let st = statics((3, 4));
        let x = cfg.encode_inputs(&[0.4, -0.2], 2001, 2).unwrap();
        let y = m.forward(&x, &st).unwrap();
        let target = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) - 0.5 * j as f64);
        let (_, g) = m.loss_and_gradient(&x, &st, target.view(), None).unwrap();
        let expected = 2.5 * 2.0 * (&y - &target).mean().unwrap();
        let last = m.architecture().convs.last().unwrap().clone();
        assert!((g[last.conv2.b] - expected).abs() < 1e-12);
        assert!((g[last.skip.unwrap().b] - expected).abs() < 1e-12);
    }

    #[test]
    fn mse_loss_cases() {
        let t = Array2::<f64>::zeros((2, 2));
        let p = Array2::from_elem((2, 2), 2.0);
        assert_eq!(mse_loss(t.view(), t.view(), None).unwrap(), 0.0);
        assert_eq!(mse_loss(p.view(), t.view(), None).unwrap(), 4.0);
        let half = Array2::from_shape_vec((2, 2), vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(mse_loss(half.view(), t.view(), None).unwrap(), 2.0);
        let none = Array2::from_elem((2, 2), false);
        assert!(matches!(mse_loss(p.view(), t.view(), Some(none.view())), Err(ModelError::EmptyMask)));
    }
}

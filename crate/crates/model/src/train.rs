use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis, NdFloat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regime_core::grid::{GridField, StaticStack};
use regime_core::indices::IndexSeries;
use regime_core::time::YearMonth;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::model::{build_model, static_features, ReconModel};
use crate::net::{self, to_float, Architecture};

/// Inclusive range of months.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: YearMonth,
    pub end: YearMonth,
}

impl Period {
    pub fn new(start: YearMonth, end: YearMonth) -> Self {
        Self { start, end }
    }

    pub fn years(y0: i32, y1: i32) -> Self {
        Self::new(YearMonth { year: y0, month: 1 }, YearMonth { year: y1, month: 12 })
    }

    pub fn contains(&self, ym: YearMonth) -> bool {
        self.start <= ym && ym <= self.end
    }

    fn overlaps(&self, other: &Period) -> bool {
        self.start <= other.end && other.start <= self.end
    }

    fn within(&self, other: &Period) -> bool {
        other.start <= self.start && self.end <= other.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSplit {
    pub train: Period,
    pub validation: Period,
    pub test: Period,
}

impl Default for TrainSplit {
    fn default() -> Self {
        Self {
            train: Period::years(1940, 2010),
            validation: Period::years(2011, 2018),
            test: Period::years(2011, 2024),
        }
    }
}

impl TrainSplit {
    /// Test period that excludes the validation years.
    pub fn independent_test() -> Self {
        Self {
            test: Period::years(2019, 2024),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("train", self.train), ("validation", self.validation), ("test", self.test)] {
            if p.start > p.end {
                return Err(ModelError::InvalidSplit(format!("{name} period is empty")));
            }
        }
        if self.train.overlaps(&self.validation) {
            return Err(ModelError::InvalidSplit("train and validation overlap".into()));
        }
        Ok(())
    }

    /// True when validation months also count as test months.
    pub fn validation_in_test(&self) -> bool {
        self.validation.within(&self.test) || self.validation.overlaps(&self.test)
    }
}

/// Monthly model inputs aligned with monthly target anomalies.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<YearMonth>,
    /// `(time, n_indices)`; zero columns for the index-free baseline.
    pub indices: Array2<f64>,
    /// `(time, lat, lon)`.
    pub targets: Array3<f64>,
}

impl Dataset {
    pub fn new(times: Vec<YearMonth>, indices: Array2<f64>, targets: Array3<f64>) -> Result<Self> {
        if indices.nrows() != times.len() || targets.shape()[0] != times.len() {
            return Err(ModelError::ShapeMismatch("dataset rows differ".into()));
        }
        if indices.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::ShapeMismatch("dataset contains non-finite values".into()));
        }
        Ok(Self { times, indices, targets })
    }

    /// Months present in both the index series and the monthly target field.
    pub fn align(indices: &IndexSeries, targets: &GridField) -> Result<Self> {
        let it = indices
            .times
            .monthly()
            .ok_or_else(|| ModelError::ShapeMismatch("indices must be monthly".into()))?;
        let tt = targets
            .times
            .monthly()
            .ok_or_else(|| ModelError::ShapeMismatch("targets must be monthly".into()))?;
        let mut rows = Vec::new();
        for (i, ym) in it.iter().enumerate() {
            if let Ok(j) = tt.binary_search(ym) {
                rows.push((i, j));
            }
        }
        let times = rows.iter().map(|(i, _)| it[*i]).collect();
        let idx: Vec<usize> = rows.iter().map(|(i, _)| *i).collect();
        let tgt: Vec<usize> = rows.iter().map(|(_, j)| *j).collect();
        Self::new(times, indices.values.select(Axis(0), &idx), targets.values.select(Axis(0), &tgt))
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_indices(&self) -> usize {
        self.indices.ncols()
    }

    /// Same data restricted to the given index columns.
    pub fn with_indices(&self, cols: &[usize]) -> Result<Self> {
        if cols.iter().any(|c| *c >= self.n_indices()) {
            return Err(ModelError::ShapeMismatch("index column out of range".into()));
        }
        Ok(Self {
            times: self.times.clone(),
            indices: self.indices.select(Axis(1), cols),
            targets: self.targets.clone(),
        })
    }

    pub fn rows_in(&self, period: &Period) -> Vec<usize> {
        (0..self.len()).filter(|t| period.contains(self.times[*t])).collect()
    }

    /// Encoded inputs `(rows, input_dim)`.
    pub fn encode(&self, cfg: &ModelConfig, rows: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((rows.len(), cfg.input_dim()));
        for (r, t) in rows.iter().enumerate() {
            let ym = self.times[*t];
            let v = cfg.encode_inputs(&self.indices.row(*t).to_vec(), ym.year, ym.month)?;
            out.row_mut(r).assign(&ndarray::Array1::from(v));
        }
        Ok(out)
    }

    fn flat_targets(&self, rows: &[usize]) -> Array2<f64> {
        let (nlat, nlon) = (self.targets.shape()[1], self.targets.shape()[2]);
        self.targets
            .select(Axis(0), rows)
            .into_shape_with_order((rows.len(), nlat * nlon))
            .expect("contiguous")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub patience: usize,
    pub max_epochs: usize,
    pub n_seeds: usize,
    /// Restrict the loss to land points.
    pub land_only: bool,
    /// Scale network outputs by the training-target std.
    pub scale_output: bool,
    pub precision: Precision,
    /// Master seed; per-seed initialization and shuffling derive from it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: Some(32),
            patience: 50,
            max_epochs: 2000,
            n_seeds: 6,
            land_only: false,
            scale_output: true,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam moments need beta in [0, 1) and eps > 0");
        }
        if self.batch_size == Some(0) || self.max_epochs == 0 || self.n_seeds == 0 {
            return bad("batch size, epochs and seeds must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub model: ReconModel,
    pub history: Vec<EpochRecord>,
    /// Sample order of the first epoch.
    pub first_order: Vec<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub runs: Vec<SeedRun>,
    /// Seeds that diverged, with diagnostics.
    pub failures: Vec<(usize, ModelError)>,
}

impl TrainOutcome {
    pub fn models(&self) -> Vec<ReconModel> {
        self.runs.iter().map(|r| r.model.clone()).collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: F,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: to_float(cfg.eps),
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [F], grad: &[F]) {
        self.t += 1;
        let step: F = to_float(
            self.lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t)),
        );
        let (b1, b2): (F, F) = (to_float(self.beta1), to_float(self.beta2));
        let one = F::one();
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}

/// Per-seed RNG seed derived from the master seed.
pub fn derive_seed(master: u64, index: usize) -> u64 {
    let mut z = master ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CHUNK: usize = 64;

struct Prepared<F> {
    arch: Architecture,
    statics: Array2<F>,
    mask: Option<Vec<bool>>,
    n_valid: usize,
    x_train: Array2<F>,
    y_train: Array2<F>,
    x_val: Array2<F>,
    y_val: Array2<F>,
    scale: F,
}

fn cast2<F: NdFloat>(a: &Array2<f64>) -> Array2<F> {
    a.mapv(to_float)
}

/// Loss over `rows` of `(x, y)` and its gradient, evaluated in chunks.
fn batch_loss_grad<F: NdFloat>(
    p: &Prepared<F>,
    params: &[F],
    x: &Array2<F>,
    y: &Array2<F>,
    rows: &[usize],
    grad: Option<&mut [F]>,
) -> Result<F> {
    let denom = rows.len() * p.n_valid;
    let mut total = F::zero();
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = F::zero());
    }
    for chunk in rows.chunks(CHUNK) {
        let xb = x.select(Axis(0), chunk);
        let yb = y.select(Axis(0), chunk);
        let keep = grad.is_some();
        let (pred, cache) = net::forward(&p.arch, params, xb.view(), p.statics.view(), p.scale, keep)?;
        let (loss, dpred) = net::mse_and_grad(pred.view(), yb.view(), p.mask.as_deref(), denom);
        total += loss;
        if let (Some(g), Some(c)) = (grad.as_deref_mut(), cache) {
            net::backward(&p.arch, params, &c, dpred.view(), p.scale, g);
        }
    }
    Ok(total)
}

fn train_seed<F: NdFloat>(
    p: &Prepared<F>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    index: usize,
) -> Result<SeedRun> {
    let seed = derive_seed(cfg.seed, index);
    let mut model = build_model(&ModelConfig {
        seed,
        ..model_cfg.clone()
    })?;
    let mut params: Vec<F> = model.params_as();
    let mut best = params.clone();
    let mut adam = Adam::<F>::new(params.len(), cfg);
    let mut grad = vec![F::zero(); params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let n = p.x_train.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let val_rows: Vec<usize> = (0..p.x_val.nrows()).collect();
    let batch = cfg.batch_size.unwrap_or(n).max(1);
    let mut history = Vec::new();
    let mut first_order = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let diverged = |epoch: usize, reason: String| ModelError::Diverged {
        seed: index,
        epoch,
        reason,
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        if epoch == 1 {
            first_order = order.clone();
        }
        let mut sum = 0.0;
        for rows in order.chunks(batch) {
            let loss = batch_loss_grad(p, &params, &p.x_train, &p.y_train, rows, Some(&mut grad))
                .map_err(|e| diverged(epoch, e.to_string()))?;
            let loss = loss.to_f64().unwrap_or(f64::NAN);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, "non-finite training loss".into()));
            }
            sum += loss * rows.len() as f64;
            adam.step(&mut params, &grad);
        }
        let val = batch_loss_grad(p, &params, &p.x_val, &p.y_val, &val_rows, None)
            .map_err(|e| diverged(epoch, e.to_string()))?
            .to_f64()
            .unwrap_or(f64::NAN);
        if !val.is_finite() {
            return Err(diverged(epoch, "non-finite validation loss".into()));
        }
        history.push(EpochRecord {
            epoch,
            train_mse: sum / n as f64,
            val_mse: val,
        });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best.copy_from_slice(&params);
        } else if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    tracing::info!(seed = index, best_epoch, best_val, epochs = history.len(), "seed trained");
    model.params = best.iter().map(|v| v.to_f64().expect("finite")).collect();
    model.meta.seed_index = index;
    model.meta.epochs_run = history.len();
    model.meta.best_epoch = best_epoch;
    model.meta.best_val_mse = Some(best_val);
    model.meta.stopped_early = stopped_early;
    Ok(SeedRun {
        model,
        history,
        first_order,
    })
}

fn run_seeds<F: NdFloat>(p: &Prepared<F>, model_cfg: &ModelConfig, cfg: &TrainConfig) -> TrainOutcome {
    let results: Vec<Result<SeedRun>> = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| train_seed(p, model_cfg, cfg, s))
        .collect();
    let mut out = TrainOutcome {
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for (s, r) in results.into_iter().enumerate() {
        match r {
            Ok(run) => out.runs.push(run),
            Err(e) => {
                tracing::warn!(seed = s, error = %e, "seed aborted");
                out.failures.push((s, e));
            }
        }
    }
    out
}

fn prepare<F: NdFloat>(
    data: &Dataset,
    statics: &StaticStack,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_rows: &[usize],
    val_rows: &[usize],
) -> Result<Prepared<F>> {
    let arch = Architecture::new(model_cfg)?;
    let mask: Option<Vec<bool>> = cfg.land_only.then(|| statics.land().iter().copied().collect());
    let n_valid = mask.as_ref().map_or(arch.n_pixels(), |m| m.iter().filter(|v| **v).count());
    if n_valid == 0 {
        return Err(ModelError::EmptyMask);
    }
    Ok(Prepared {
        statics: static_features(statics, model_cfg.grid_shape)?,
        mask,
        n_valid,
        x_train: cast2(&data.encode(model_cfg, train_rows)?),
        y_train: cast2(&data.flat_targets(train_rows)),
        x_val: cast2(&data.encode(model_cfg, val_rows)?),
        y_val: cast2(&data.flat_targets(val_rows)),
        scale: to_float(model_cfg.output_scale),
        arch,
    })
}

/// Trains `cfg.n_seeds` independently initialized and shuffled models with
/// early stopping on the validation MSE. Seeds that diverge are reported in
/// `failures`; the call fails only if every seed does.
pub fn train(
    data: &Dataset,
    statics: &StaticStack,
    split: &TrainSplit,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    split.validate()?;
    cfg.validate()?;
    if model_cfg.n_indices != data.n_indices() {
        return Err(ModelError::ShapeMismatch(format!(
            "model expects {} indices, dataset has {}",
            model_cfg.n_indices,
            data.n_indices()
        )));
    }
    if data.targets.shape()[1..] != [model_cfg.grid_shape.0, model_cfg.grid_shape.1] {
        return Err(ModelError::ShapeMismatch("target grid differs from model grid".into()));
    }
    let train_rows = data.rows_in(&split.train);
    let val_rows = data.rows_in(&split.validation);
    if train_rows.is_empty() || val_rows.is_empty() {
        return Err(ModelError::InvalidSplit("dataset does not cover the train and validation periods".into()));
    }
    if split.validation_in_test() {
        tracing::warn!("validation months are part of the test period");
    }
    let mut model_cfg = model_cfg.clone();
    if cfg.scale_output {
        let y = data.flat_targets(&train_rows);
        let m = y.mean().unwrap_or(0.0);
        let sd = y.mapv(|v| (v - m) * (v - m)).mean().unwrap_or(0.0).sqrt();
        model_cfg.output_scale = if sd > 0.0 { sd } else { 1.0 };
    }
    let out = match cfg.precision {
        Precision::F32 => run_seeds(&prepare::<f32>(data, statics, &model_cfg, cfg, &train_rows, &val_rows)?, &model_cfg, cfg),
        Precision::F64 => run_seeds(&prepare::<f64>(data, statics, &model_cfg, cfg, &train_rows, &val_rows)?, &model_cfg, cfg),
    };
    if out.runs.is_empty() {
        let (_, e) = out.failures.into_iter().next().expect("at least one seed");
        return Err(e);
    }
    Ok(out)
}

/// `epoch,train_mse,val_mse` per line.
pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch,train_mse,val_mse\n");
    for r in history {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.train_mse, r.val_mse));
    }
    let mut f = std::fs::File::create(path).map_err(|e| ModelError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| ModelError::io(path, e))
}

/// Encodes one monthly index matrix for the model.
pub fn encode_rows(cfg: &ModelConfig, indices: ArrayView2<f64>, times: &[YearMonth]) -> Result<Array2<f64>> {
    if indices.nrows() != times.len() {
        return Err(ModelError::ShapeMismatch("index rows vs times".into()));
    }
    let mut out = Array2::zeros((times.len(), cfg.input_dim()));
    for (t, ym) in times.iter().enumerate() {
        let v = cfg.encode_inputs(&indices.row(t).to_vec(), ym.year, ym.month)?;
        out.row_mut(t).assign(&ndarray::Array1::from(v));
    }
    Ok(out)
}

//! Synthetic regime world with known ground truth, plus small oracles used
//! to check the analysis chain against it.
//!
//! Daily circulation is a Markov chain over `k` regimes whose centres live
//! in a latent space spanned by orthonormal smooth patterns, with AR(1)
//! latent noise on top. Surface variables respond to the monthly regime
//! indices through a linear or tanh-mixture map.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use ndarray::{s, Array1, Array2, Array3, Array5, ArrayView2, ArrayView3, Axis as NdAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calibration::EnsembleForecast;
use crate::error::{Error, Result};
use crate::grid::{area_weights, Domain, Grid, GridField, StaticStack, Variable};
use crate::indices::{index_normalize, monthly_index, IndexSeries};
use crate::io::write_grid_file;
use crate::preprocess::{monthly_aggregate, Aggregation, ClimatologyPeriod};
use crate::time::{TimeAxis, YearMonth};

/// How surface anomalies depend on the standardized monthly indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Response {
    Linear,
    /// `h_r = (1 − α) I_r + α tanh(γ (I_r + I_{r+1}))`.
    TanhMixture { alpha: f64, gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// (lat, lon) cells of the Euro-Atlantic source grid.
    pub source_shape: (usize, usize),
    /// (lat, lon) cells of the European target grid.
    pub target_shape: (usize, usize),
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub climatology: ClimatologyPeriod,
    pub k_true: usize,
    /// Probability that tomorrow stays in today's regime.
    pub persistence: f64,
    /// AR(1) coefficient of the latent noise.
    pub ar_coef: f64,
    pub regime_amplitude: f64,
    pub latent_noise: f64,
    /// Gridpoint noise std relative to the circulation signal std.
    pub circulation_noise: f64,
    /// Monthly surface noise std relative to the surface signal std.
    pub surface_noise: f64,
    pub response: Response,
    /// Temperature trend per year.
    pub trend_per_year: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            source_shape: (16, 24),
            target_shape: (12, 16),
            start: NaiveDate::from_ymd_opt(1940, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2024, 12, 31).unwrap(),
            climatology: ClimatologyPeriod::default(),
            k_true: 7,
            persistence: 0.9,
            ar_coef: 0.8,
            regime_amplitude: 3.0,
            latent_noise: 0.6,
            circulation_noise: 0.2,
            surface_noise: 0.0,
            response: Response::TanhMixture { alpha: 0.5, gamma: 1.0 },
            trend_per_year: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.k_true == 0 {
            return bad("k_true must be at least 1");
        }
        if !(0.0..1.0).contains(&self.ar_coef) {
            return bad("ar_coef must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return bad("persistence must lie in [0, 1]");
        }
        if self.circulation_noise < 0.0 || self.surface_noise < 0.0 || self.latent_noise < 0.0 {
            return bad("noise levels must be non-negative");
        }
        if self.source_shape.0 < 2 || self.source_shape.1 < 2 || self.target_shape.0 < 2 || self.target_shape.1 < 2 {
            return bad("grids need at least 2x2 cells");
        }
        if self.start.day() != 1 || (self.end + chrono::Days::new(1)).day() != 1 {
            return bad("date range must consist of whole months");
        }
        if self.start > self.climatology.start || self.end < self.climatology.end {
            return bad("date range must cover the climatology period");
        }
        Ok(())
    }

    pub fn source_grid(&self) -> Result<Grid> {
        Grid::for_domain(Domain::EuroAtlantic, self.source_shape.0, self.source_shape.1)
    }

    pub fn target_grid(&self) -> Result<Grid> {
        Grid::for_domain(Domain::Europe, self.target_shape.0, self.target_shape.1)
    }
}

/// Surface variables produced by the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceVar {
    T2m,
    Tp,
}

impl SurfaceVar {
    pub const ALL: [SurfaceVar; 2] = [SurfaceVar::T2m, SurfaceVar::Tp];

    pub fn variable(self) -> Variable {
        match self {
            SurfaceVar::T2m => Variable::T2m,
            SurfaceVar::Tp => Variable::Tp,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Everything the generator knows that an analysis must recover.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub config: SynthConfig,
    /// Orthonormal (area-weighted) latent patterns on the source grid.
    pub latent_patterns: Array3<f64>,
    /// Regime patterns `Σ_j c_rj p_j`.
    pub patterns: Array3<f64>,
    /// Regime centres in latent space, `(k, k)`.
    pub centres: Array2<f64>,
    pub regimes: Vec<usize>,
    /// Daily latent state `(time, k)`.
    pub latent: Array2<f64>,
    pub daily_indices: IndexSeries,
    pub monthly_indices: IndexSeries,
    /// Monthly indices re-standardized over the climatology months; the
    /// surface response is a function of these.
    pub response_inputs: IndexSeries,
    /// Moments used to build `response_inputs` from `monthly_indices`.
    pub response_moments: (Vec<f64>, Vec<f64>),
    /// Response maps `(variable, k, lat, lon)`.
    pub response_maps: Vec<Array3<f64>>,
    /// Std of the noiseless monthly response per variable.
    pub signal_std: [f64; 2],
    /// Circulation anomaly scale in metres.
    pub z_scale: f64,
}

impl SynthTruth {
    /// Noiseless monthly anomaly of `var` for standardized indices `x` in
    /// calendar month `month` (trend excluded).
    pub fn response(&self, var: SurfaceVar, x: &[f64], month: u32) -> Array2<f64> {
        let maps = &self.response_maps[var.slot()];
        let h = nonlinearity(self.config.response, x);
        let mut out = Array2::zeros((maps.shape()[1], maps.shape()[2]));
        for (r, hr) in h.iter().enumerate() {
            out.scaled_add(*hr, &maps.index_axis(NdAxis(0), r));
        }
        out * seasonal_gain(month)
    }

    /// Seasonal amplitude of the circulation anomalies on `date`.
    pub fn modulation(&self, date: NaiveDate) -> f64 {
        circulation_modulation(date)
    }

    /// Standardized index inputs matching an arbitrary monthly regime-index
    /// vector (same transform as `response_inputs`).
    pub fn standardize_monthly(&self, raw: &[f64]) -> Vec<f64> {
        let (m, s) = &self.response_moments;
        raw.iter().enumerate().map(|(r, v)| (v - m[r]) / s[r]).collect()
    }
}

fn nonlinearity(response: Response, x: &[f64]) -> Vec<f64> {
    let k = x.len();
    match response {
        Response::Linear => x.to_vec(),
        Response::TanhMixture { alpha, gamma } => (0..k)
            .map(|r| (1.0 - alpha) * x[r] + alpha * (gamma * (x[r] + x[(r + 1) % k])).tanh())
            .collect(),
    }
}

fn seasonal_gain(month: u32) -> f64 {
    1.0 + 0.3 * (2.0 * PI * (month as f64 - 1.0) / 12.0).cos()
}

fn circulation_modulation(date: NaiveDate) -> f64 {
    1.0 + 0.25 * (2.0 * PI * (date.ordinal0() as f64) / 365.25).cos()
}

/// Generated fields together with their ground truth.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub z500: GridField,
    pub t2m: GridField,
    pub tp: GridField,
    pub statics: StaticStack,
    pub truth: SynthTruth,
}

impl SynthData {
    pub fn surface(&self, var: SurfaceVar) -> &GridField {
        match var {
            SurfaceVar::T2m => &self.t2m,
            SurfaceVar::Tp => &self.tp,
        }
    }

    /// GRD1 fields plus a truth sidecar (patterns and monthly indices).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_grid_file(&self.z500, dir.join("z500.grd"))?;
        write_grid_file(&self.t2m, dir.join("t2m.grd"))?;
        write_grid_file(&self.tp, dir.join("tp.grd"))?;
        write_grid_file(&self.statics.to_field(), dir.join("static.grd"))?;
        let k = self.truth.patterns.shape()[0];
        let patterns = GridField::new(
            self.z500.grid.clone(),
            TimeAxis::Index(k),
            self.truth.patterns.clone(),
            Variable::Other("truth-patterns".into()),
            "1",
        )?;
        write_grid_file(&patterns, dir.join("truth_patterns.grd"))?;
        self.truth.monthly_indices.write_csv(dir.join("truth_monthly_indices.csv"))?;
        let path = dir.join("truth.json");
        let text = serde_json::to_string_pretty(&self.truth.config).expect("serializable");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Smooth random field from low-order 2-D cosines with decaying amplitudes.
pub fn smooth_field(grid: &Grid, rng: &mut ChaCha8Rng, order: usize) -> Array2<f64> {
    let (nlat, nlon) = grid.shape();
    let mut out = Array2::<f64>::zeros((nlat, nlon));
    for a in 0..=order {
        for b in 0..=order {
            let c: f64 = rng.sample::<f64, _>(StandardNormal) / (1.0 + (a + b) as f64);
            let pa = rng.random::<f64>() * 2.0 * PI;
            let pb = rng.random::<f64>() * 2.0 * PI;
            for i in 0..nlat {
                let y = (i as f64 + 0.5) / nlat as f64;
                let fy = (a as f64 * PI * y + pa).cos();
                for j in 0..nlon {
                    let x = (j as f64 + 0.5) / nlon as f64;
                    out[[i, j]] += c * fy * (b as f64 * PI * x + pb).cos();
                }
            }
        }
    }
    out
}

/// Area-weighted inner product `Σ w a b / Σ w`.
fn wdot(a: ArrayView2<f64>, b: ArrayView2<f64>, w: ArrayView2<f64>) -> f64 {
    let mut s = 0.0;
    ndarray::Zip::from(a).and(b).and(w).for_each(|x, y, z| s += x * y * z);
    s / w.sum()
}

/// Gram–Schmidt under the area-weighted inner product.
pub fn weighted_orthonormalize(fields: &mut [Array2<f64>], w: ArrayView2<f64>) -> Result<()> {
    for i in 0..fields.len() {
        for _ in 0..2 {
            for j in 0..i {
                let d = wdot(fields[i].view(), fields[j].view(), w);
                let pj = fields[j].clone();
                fields[i].scaled_add(-d, &pj);
            }
        }
        let n = wdot(fields[i].view(), fields[i].view(), w).sqrt();
        if !(n > 1e-10) {
            return Err(Error::Degenerate("linearly dependent patterns".into()));
        }
        fields[i] /= n;
    }
    Ok(())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn population_moments(x: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = x.clone().count() as f64;
    let m = x.clone().sum::<f64>() / n;
    let v = x.map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Builds a synthetic data set; identical configs give identical output.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let k = cfg.k_true;
    let src = cfg.source_grid()?;
    let tgt = cfg.target_grid()?;
    let w_src = area_weights(&src);
    let (slat, slon) = src.shape();
    let (tlat, tlon) = tgt.shape();

    let mut rng = stream(cfg.seed, 0);
    let mut latent_fields: Vec<Array2<f64>> = (0..k).map(|_| smooth_field(&src, &mut rng, 3)).collect();
    weighted_orthonormalize(&mut latent_fields, w_src.view())?;
    let mut latent_patterns = Array3::zeros((k, slat, slon));
    for (j, f) in latent_fields.iter().enumerate() {
        latent_patterns.index_axis_mut(NdAxis(0), j).assign(f);
    }
    // centred one-hot regime centres
    let centres = Array2::from_shape_fn((k, k), |(r, j)| {
        let e = if r == j { 1.0 } else { 0.0 };
        cfg.regime_amplitude * (e - if k > 1 { 1.0 / k as f64 } else { 0.0 })
    });
    let mut patterns = Array3::zeros((k, slat, slon));
    for r in 0..k {
        let mut p = patterns.index_axis_mut(NdAxis(0), r);
        for j in 0..k {
            p.scaled_add(centres[[r, j]], &latent_fields[j]);
        }
    }

    // daily regime sequence and latent state
    let times = TimeAxis::daily_range(cfg.start, cfg.end);
    let dates = times.daily().expect("daily").to_vec();
    let nt = dates.len();
    let mut rng = stream(cfg.seed, 1);
    let mut regimes = Vec::with_capacity(nt);
    let mut latent = Array2::<f64>::zeros((nt, k));
    let mut eta = Array1::<f64>::zeros(k);
    let innov = (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt() * cfg.latent_noise;
    let mut regime = rng.random_range(0..k);
    for t in 0..nt {
        if t > 0 && k > 1 && rng.random::<f64>() >= cfg.persistence {
            let jump = rng.random_range(0..k - 1);
            regime = if jump >= regime { jump + 1 } else { jump };
        }
        regimes.push(regime);
        for j in 0..k {
            let xi: f64 = rng.sample(StandardNormal);
            eta[j] = if t == 0 { cfg.latent_noise * xi } else { cfg.ar_coef * eta[j] + innov * xi };
            latent[[t, j]] = centres[[regime, j]] + eta[j];
        }
    }

    // circulation field
    let z_scale = 60.0;
    let signal_std = latent
        .columns()
        .into_iter()
        .map(|c| population_moments(c.iter().copied()).1.powi(2))
        .sum::<f64>()
        .sqrt();
    let noise_std = cfg.circulation_noise * signal_std;
    let lats = src.lats();
    let flat_patterns = latent_patterns.view().into_shape_with_order((k, slat * slon)).expect("flat");
    let signal = latent.dot(&flat_patterns);
    let mut rng = stream(cfg.seed, 2);
    let mut z = Array3::<f64>::zeros((nt, slat, slon));
    for (t, d) in dates.iter().enumerate() {
        let m = circulation_modulation(*d);
        let season = (2.0 * PI * d.ordinal0() as f64 / 365.25).cos();
        for i in 0..slat {
            let base = 5700.0 - 8.0 * (lats[i] - 30.0) - 40.0 * season * (lats[i] / 90.0);
            for j in 0..slon {
                let e: f64 = if noise_std > 0.0 { rng.sample::<f64, _>(StandardNormal) * noise_std } else { 0.0 };
                z[[t, i, j]] = base + z_scale * m * (signal[[t, i * slon + j]] + e);
            }
        }
    }
    let z500 = GridField::new(src.clone(), times.clone(), z, Variable::Z500, "m")?;

    // true indices: normalized projections of the noiseless field
    let raw = latent.dot(&centres.t());
    let names: Vec<String> = (1..=k).map(|r| format!("R{r}")).collect();
    let raw_series = IndexSeries::new(times.clone(), raw, names.clone())?;
    let daily_indices = index_normalize(&raw_series, cfg.climatology)?;
    let monthly_indices = monthly_index(&daily_indices)?;
    let months = monthly_indices.times.monthly().expect("monthly").to_vec();
    let clim_rows: Vec<usize> = (0..months.len()).filter(|t| cfg.climatology.contains_month(months[*t])).collect();
    let mut rm = Vec::with_capacity(k);
    let mut rs = Vec::with_capacity(k);
    let mut response_inputs = monthly_indices.clone();
    for r in 0..k {
        let col = monthly_indices.values.column(r);
        let (m, sd) = population_moments(clim_rows.iter().map(|t| col[*t]));
        let sd = if sd > 0.0 { sd } else { 1.0 };
        response_inputs.values.column_mut(r).mapv_inplace(|v| (v - m) / sd);
        rm.push(m);
        rs.push(sd);
    }
    response_inputs.moments = None;

    // static layers on the target grid
    let mut rng = stream(cfg.seed, 5);
    let land_raw = smooth_field(&tgt, &mut rng, 2);
    let land = land_raw.mapv(|v| 1.0 / (1.0 + (-4.0 * (v + 0.3)).exp()));
    let terrain = smooth_field(&tgt, &mut rng, 3).mapv(|v| 400.0 * v.abs()) * &land;
    let statics = StaticStack::new(tgt.clone(), land.clone(), terrain)?;

    // response maps, stronger over land
    let mut rng = stream(cfg.seed, 3);
    let mut response_maps = Vec::new();
    for var in SurfaceVar::ALL {
        let scale = match var {
            SurfaceVar::T2m => 1.0,
            SurfaceVar::Tp => 20.0,
        };
        let mut maps = Array3::zeros((k, tlat, tlon));
        for r in 0..k {
            let f = smooth_field(&tgt, &mut rng, 2) * (&land * 0.7 + 0.3) * scale;
            maps.index_axis_mut(NdAxis(0), r).assign(&f);
        }
        response_maps.push(maps);
    }
    let mut truth = SynthTruth {
        config: cfg.clone(),
        latent_patterns,
        patterns,
        centres,
        regimes,
        latent,
        daily_indices,
        monthly_indices,
        response_inputs,
        response_moments: (rm, rs),
        response_maps,
        signal_std: [0.0; 2],
        z_scale,
    };

    // monthly responses and noise, then spread to days
    let nm = months.len();
    let mut surface = Vec::new();
    let mut rng = stream(cfg.seed, 4);
    for var in SurfaceVar::ALL {
        let mut resp = Array3::<f64>::zeros((nm, tlat, tlon));
        for (t, ym) in months.iter().enumerate() {
            let x: Vec<f64> = truth.response_inputs.values.row(t).to_vec();
            resp.index_axis_mut(NdAxis(0), t).assign(&truth.response(var, &x, ym.month));
        }
        let (_, sig) = population_moments(resp.iter().copied());
        truth.signal_std[var.slot()] = sig;
        let noise = cfg.surface_noise * sig;
        if noise > 0.0 {
            resp.mapv_inplace(|v| v + noise * rng.sample::<f64, _>(StandardNormal));
        }
        let tl = tgt.lats();
        let mut daily = Array3::<f64>::zeros((nt, tlat, tlon));
        let first = months[0];
        for (t, d) in dates.iter().enumerate() {
            let ym = YearMonth::of(*d);
            let m = first.months_until(ym) as usize;
            let phase = 2.0 * PI * (d.ordinal0() as f64 - 200.0) / 365.25;
            let years = d.year() as f64 + d.ordinal0() as f64 / 365.25 - 1940.0;
            for i in 0..tlat {
                for j in 0..tlon {
                    daily[[t, i, j]] = match var {
                        SurfaceVar::T2m => {
                            12.0 + 9.0 * phase.cos() - 0.4 * (tl[i] - 50.0)
                                + cfg.trend_per_year * years
                                + resp[[m, i, j]]
                        }
                        SurfaceVar::Tp => 2.5 + 0.8 * phase.cos() + resp[[m, i, j]] / ym.n_days() as f64,
                    };
                }
            }
        }
        let units = match var {
            SurfaceVar::T2m => "K",
            SurfaceVar::Tp => "mm",
        };
        surface.push(GridField::new(tgt.clone(), times.clone(), daily, var.variable(), units)?);
    }
    let tp = surface.pop().expect("tp");
    let t2m = surface.pop().expect("t2m");
    Ok(SynthData {
        z500,
        t2m,
        tp,
        statics,
        truth,
    })
}

/// Area-weighted centred correlation of two maps.
pub fn pattern_correlation(a: ArrayView2<f64>, b: ArrayView2<f64>, w: ArrayView2<f64>) -> f64 {
    let ma = wdot(a, Array2::ones(a.raw_dim()).view(), w);
    let mb = wdot(b, Array2::ones(b.raw_dim()).view(), w);
    let da = a.mapv(|v| v - ma);
    let db = b.mapv(|v| v - mb);
    let num = wdot(da.view(), db.view(), w);
    let den = (wdot(da.view(), da.view(), w) * wdot(db.view(), db.view(), w)).sqrt();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryScore {
    /// Mean matched correlation.
    pub score: f64,
    /// `correlations[i]` pairs estimated pattern `i` with truth `permutation[i]`.
    pub correlations: Vec<f64>,
    pub permutation: Vec<usize>,
    /// +1 or −1 applied to each estimated pattern.
    pub signs: Vec<f64>,
}

/// Best one-to-one matching (over permutations and signs) between estimated
/// and true patterns, maximizing the mean pattern correlation.
pub fn pattern_recovery_score(estimated: ArrayView3<f64>, truth: ArrayView3<f64>, grid: &Grid) -> Result<RecoveryScore> {
    let k = estimated.shape()[0];
    if truth.shape()[0] != k {
        return Err(Error::KMismatch(k, truth.shape()[0]));
    }
    if estimated.shape()[1..] != truth.shape()[1..] {
        return Err(Error::DimensionMismatch("pattern grids differ".into()));
    }
    if k > 16 {
        return Err(Error::InstanceTooLarge(format!("{k} patterns")));
    }
    let w = area_weights(grid);
    let corr = Array2::from_shape_fn((k, k), |(i, j)| {
        pattern_correlation(estimated.index_axis(NdAxis(0), i), truth.index_axis(NdAxis(0), j), w.view())
    });
    let (perm, _) = best_assignment(&corr.mapv(f64::abs));
    let signs: Vec<f64> = (0..k).map(|i| if corr[[i, perm[i]]] < 0.0 { -1.0 } else { 1.0 }).collect();
    let correlations: Vec<f64> = (0..k).map(|i| corr[[i, perm[i]]].abs()).collect();
    Ok(RecoveryScore {
        score: correlations.iter().sum::<f64>() / k as f64,
        correlations,
        permutation: perm,
        signs,
    })
}

/// Maximum-weight perfect matching by dynamic programming over subsets.
fn best_assignment(gain: &Array2<f64>) -> (Vec<usize>, f64) {
    let k = gain.nrows();
    let full = 1usize << k;
    let mut best = vec![f64::NEG_INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if best[mask] == f64::NEG_INFINITY {
            continue;
        }
        let i = mask.count_ones() as usize;
        if i == k {
            continue;
        }
        for j in 0..k {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let v = best[mask] + gain[[i, j]];
                if v > best[next] {
                    best[next] = v;
                    choice[next] = j;
                }
            }
        }
    }
    let mut perm = vec![0; k];
    let mut mask = full - 1;
    for i in (0..k).rev() {
        let j = choice[mask];
        perm[i] = j;
        mask &= !(1 << j);
    }
    (perm, best[full - 1])
}

/// Per-index correlation of estimated indices with the truth after applying
/// a pattern matching (estimated `i` ↔ truth `permutation[i]`).
pub fn matched_index_correlations(
    estimated: &IndexSeries,
    truth: &IndexSeries,
    matching: &RecoveryScore,
) -> Result<Vec<f64>> {
    if estimated.times != truth.times {
        return Err(Error::DimensionMismatch("index time axes differ".into()));
    }
    (0..estimated.k())
        .map(|i| {
            let a: Vec<f64> = estimated.values.column(i).to_vec();
            let b: Vec<f64> = truth.values.column(matching.permutation[i]).to_vec();
            crate::verification::acc(&a, &b).map(|r| r * matching.signs[i])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForcePartition {
    pub labels: Vec<usize>,
    pub inertia: f64,
}

/// Exhaustive minimum within-cluster sum of squares over all partitions of
/// at most 12 points into at most 3 non-empty parts.
pub fn brute_force_kmeans(points: ArrayView2<f64>, k: usize) -> Result<BruteForcePartition> {
    let n = points.nrows();
    if n > 12 || k > 3 {
        return Err(Error::InstanceTooLarge(format!("{n} points, k = {k}")));
    }
    if k == 0 || k > n {
        return Err(Error::TooManyClusters { k, n });
    }
    let mut labels = vec![0usize; n];
    let mut best = BruteForcePartition {
        labels: labels.clone(),
        inertia: f64::INFINITY,
    };
    // restricted growth strings enumerate each set partition once
    fn rec(i: usize, used: usize, k: usize, labels: &mut [usize], points: ArrayView2<f64>, best: &mut BruteForcePartition) {
        let n = labels.len();
        if i == n {
            let inertia = partition_inertia(points, labels, used);
            if inertia < best.inertia {
                best.inertia = inertia;
                best.labels = labels.to_vec();
            }
            return;
        }
        for c in 0..(used + 1).min(k) {
            labels[i] = c;
            rec(i + 1, used.max(c + 1), k, labels, points, best);
        }
    }
    rec(0, 0, k, &mut labels, points, &mut best);
    Ok(best)
}

fn partition_inertia(points: ArrayView2<f64>, labels: &[usize], k: usize) -> f64 {
    let m = points.ncols();
    let mut sums = Array2::<f64>::zeros((k, m));
    let mut counts = vec![0usize; k];
    for (p, &l) in points.rows().into_iter().zip(labels) {
        let mut row = sums.row_mut(l);
        row += &p;
        counts[l] += 1;
    }
    let mut total = 0.0;
    for (p, &l) in points.rows().into_iter().zip(labels) {
        for d in 0..m {
            let c = sums[[l, d]] / counts[l] as f64;
            total += (p[d] - c) * (p[d] - c);
        }
    }
    total
}

/// Settings of the toy dynamical ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyForecastConfig {
    pub n_members: usize,
    pub n_leads: usize,
    pub first_init: YearMonth,
    pub last_init: YearMonth,
    /// Latent error std added per lead month (random walk), split equally
    /// between a member-common and a member-specific part.
    pub error_growth: f64,
    /// Surface error not explained by the circulation, relative to the
    /// surface signal std, growing like `sqrt(lead + 1)`.
    pub surface_error: f64,
    pub z_bias_add: f64,
    pub z_bias_mult: f64,
    pub surface_bias_add: f64,
    pub surface_bias_mult: f64,
    pub seed: u64,
}

impl Default for ToyForecastConfig {
    fn default() -> Self {
        Self {
            n_members: crate::calibration::DEFAULT_MEMBERS,
            n_leads: crate::calibration::DEFAULT_LEADS,
            first_init: YearMonth { year: 1981, month: 1 },
            last_init: YearMonth { year: 2024, month: 6 },
            error_growth: 0.5,
            surface_error: 0.3,
            z_bias_add: 25.0,
            z_bias_mult: 0.2,
            surface_bias_add: 0.5,
            surface_bias_mult: -0.2,
            seed: 0,
        }
    }
}

impl ToyForecastConfig {
    pub fn zero_error(self) -> Self {
        Self {
            error_growth: 0.0,
            surface_error: 0.0,
            z_bias_add: 0.0,
            z_bias_mult: 0.0,
            surface_bias_add: 0.0,
            surface_bias_mult: 0.0,
            ..self
        }
    }
}

/// Raw monthly ensemble of the toy model: mean circulation and surface anomalies.
#[derive(Debug, Clone)]
pub struct ToyForecast {
    pub z500: EnsembleForecast,
    pub t2m: EnsembleForecast,
    pub tp: EnsembleForecast,
}

impl ToyForecast {
    pub fn surface(&self, var: SurfaceVar) -> &EnsembleForecast {
        match var {
            SurfaceVar::T2m => &self.t2m,
            SurfaceVar::Tp => &self.tp,
        }
    }
}

/// Toy dynamical ensemble derived from the truth: the observed monthly
/// state plus a lead-growing random-walk error in latent space, extra
/// surface error, and fixed additive/multiplicative biases.
///
/// `targets` are the observed monthly surface anomalies (t2m, tp) that the
/// surface forecasts perturb.
pub fn toy_forecast(data: &SynthData, targets: [&GridField; 2], cfg: &ToyForecastConfig) -> Result<ToyForecast> {
    if cfg.n_members == 0 || cfg.n_leads == 0 {
        return Err(Error::InvalidConfig("toy ensemble needs members and leads".into()));
    }
    let truth = &data.truth;
    let k = truth.config.k_true;
    let zmon = monthly_aggregate(&data.z500, Aggregation::Mean, false)?;
    let months = zmon.times.monthly().expect("monthly").to_vec();
    let inits = YearMonth::range(cfg.first_init, cfg.last_init);
    let find = |ym: YearMonth| {
        months
            .binary_search(&ym)
            .map_err(|_| Error::PeriodNotCovered(format!("no data for {ym}")))
    };
    for t in targets {
        if t.times.monthly() != Some(&months[..]) {
            return Err(Error::DimensionMismatch("surface targets must share the monthly axis".into()));
        }
    }
    // calendar-month climatology of the monthly means
    let (slat, slon) = zmon.grid.shape();
    let mut zclim = Array3::<f64>::zeros((12, slat, slon));
    let mut counts = [0usize; 12];
    for (t, ym) in months.iter().enumerate() {
        if truth.config.climatology.contains_month(*ym) {
            let c = ym.month as usize - 1;
            let mut slab = zclim.index_axis_mut(NdAxis(0), c);
            slab += &zmon.slice(t);
            counts[c] += 1;
        }
    }
    for c in 0..12 {
        let mut slab = zclim.index_axis_mut(NdAxis(0), c);
        slab /= counts[c].max(1) as f64;
    }
    let monthly_std = &truth.response_moments.1;
    let daily_std = &truth.daily_indices.moments.as_ref().expect("normalized").std;
    let (tlat, tlon) = data.statics.grid.shape();
    let ni = inits.len();
    let (nm, nl) = (cfg.n_members, cfg.n_leads);
    let mut zv = Array5::<f64>::zeros((nm, nl, ni, slat, slon));
    let mut sv = [Array5::<f64>::zeros((nm, nl, ni, tlat, tlon)), Array5::<f64>::zeros((nm, nl, ni, tlat, tlon))];
    let step = Normal::new(0.0, cfg.error_growth / 2f64.sqrt()).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = stream(cfg.seed, 10);
    for i in 0..ni {
        // member-common random walk
        let mut common = Array2::<f64>::zeros((nl, k));
        let mut acc = Array1::<f64>::zeros(k);
        for l in 0..nl {
            for j in 0..k {
                acc[j] += step.sample(&mut rng);
            }
            common.row_mut(l).assign(&acc);
        }
        let surf_common: Vec<Array3<f64>> = (0..2)
            .map(|v| {
                Array3::from_shape_fn((nl, tlat, tlon), |(l, _, _)| {
                    let s = cfg.surface_error * truth.signal_std[v] * ((l + 1) as f64).sqrt();
                    s * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        for m in 0..nm {
            let mut own = Array1::<f64>::zeros(k);
            for l in 0..nl {
                for j in 0..k {
                    own[j] += step.sample(&mut rng);
                }
                let err = &common.row(l) + &own;
                let target = inits[i].add_months(l as i32);
                let t = find(target)?;
                let c = target.month as usize - 1;
                let modu = circulation_modulation(target.first_day());
                // circulation: biased observed anomaly plus the latent error field
                let mut f = zmon.slice(t).to_owned() - &zclim.index_axis(NdAxis(0), c);
                f *= 1.0 + cfg.z_bias_mult;
                f += &zclim.index_axis(NdAxis(0), c);
                f += cfg.z_bias_add;
                for j in 0..k {
                    f.scaled_add(truth.z_scale * modu * err[j], &truth.latent_patterns.index_axis(NdAxis(0), j));
                }
                zv.slice_mut(s![m, l, i, .., ..]).assign(&f);
                // surface: response change implied by the index error
                let x = truth.response_inputs.values.row(t).to_vec();
                let dx: Vec<f64> = (0..k)
                    .map(|r| {
                        let d: f64 = (0..k).map(|j| err[j] * truth.centres[[r, j]]).sum();
                        d / daily_std[r] / monthly_std[r]
                    })
                    .collect();
                let xp: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
                for (v, var) in SurfaceVar::ALL.into_iter().enumerate() {
                    let delta = truth.response(var, &xp, target.month) - truth.response(var, &x, target.month);
                    let mut g = targets[v].slice(t).to_owned() + &delta + &surf_common[v].index_axis(NdAxis(0), l);
                    g *= 1.0 + cfg.surface_bias_mult;
                    g += cfg.surface_bias_add * truth.signal_std[v];
                    sv[v].slice_mut(s![m, l, i, .., ..]).assign(&g);
                }
            }
        }
    }
    let [t2m_v, tp_v] = sv;
    Ok(ToyForecast {
        z500: EnsembleForecast::new(zmon.grid.clone(), Variable::Z500, "m", inits.clone(), zv)?,
        t2m: EnsembleForecast::new(data.statics.grid.clone(), Variable::T2m.anomaly(), "K", inits.clone(), t2m_v)?,
        tp: EnsembleForecast::new(data.statics.grid.clone(), Variable::Tp.anomaly(), "mm", inits, tp_v)?,
    })
}

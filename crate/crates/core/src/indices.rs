//! Regime and NAO indices: weighted projections, climatological
//! normalization, monthly means and multiplicative index perturbations.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis as NdAxis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{area_weights, GridField};
use crate::io::{read_series_csv, write_series_csv};
use crate::modes::{EofBasis, RegimePatterns};
use crate::preprocess::ClimatologyPeriod;
use crate::time::{TimeAxis, YearMonth};

/// Climatological moments of raw projections, one entry per index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormMoments {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub period: ClimatologyPeriod,
}

/// Dated matrix of indices, `(time, k)`. `k = 0` is the no-index baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexSeries {
    pub times: TimeAxis,
    pub values: Array2<f64>,
    pub names: Vec<String>,
    /// Present once the series is normalized.
    pub moments: Option<NormMoments>,
    pub note: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    moments: Option<NormMoments>,
    note: Option<String>,
}

impl IndexSeries {
    pub fn new(times: TimeAxis, values: Array2<f64>, names: Vec<String>) -> Result<Self> {
        if values.nrows() != times.len() {
            return Err(Error::LengthMismatch(values.nrows(), times.len()));
        }
        if values.ncols() != names.len() {
            return Err(Error::KMismatch(values.ncols(), names.len()));
        }
        Ok(Self {
            times,
            values,
            names,
            moments: None,
            note: None,
        })
    }

    /// A series with no indices on the given axis.
    pub fn empty(times: TimeAxis) -> Self {
        let n = times.len();
        Self {
            times,
            values: Array2::zeros((n, 0)),
            names: Vec::new(),
            moments: None,
            note: None,
        }
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Columns selected by position.
    pub fn select(&self, cols: &[usize]) -> Result<Self> {
        if let Some(c) = cols.iter().find(|c| **c >= self.k()) {
            return Err(Error::KMismatch(*c, self.k()));
        }
        Ok(Self {
            times: self.times.clone(),
            values: self.values.select(NdAxis(1), cols),
            names: cols.iter().map(|c| self.names[*c].clone()).collect(),
            moments: self.moments.as_ref().map(|m| NormMoments {
                mean: cols.iter().map(|c| m.mean[*c]).collect(),
                std: cols.iter().map(|c| m.std[*c]).collect(),
                period: m.period,
            }),
            note: self.note.clone(),
        })
    }

    /// Indices side by side (same time axis).
    pub fn concat(&self, other: &IndexSeries) -> Result<Self> {
        if self.times != other.times {
            return Err(Error::DimensionMismatch("index time axes differ".into()));
        }
        let values = ndarray::concatenate(NdAxis(1), &[self.values.view(), other.values.view()])
            .expect("same rows");
        let moments = match (&self.moments, &other.moments) {
            (Some(a), Some(b)) => Some(NormMoments {
                mean: [a.mean.clone(), b.mean.clone()].concat(),
                std: [a.std.clone(), b.std.clone()].concat(),
                period: a.period,
            }),
            _ => None,
        };
        Ok(Self {
            times: self.times.clone(),
            values,
            names: [self.names.clone(), other.names.clone()].concat(),
            moments,
            note: self.note.clone().or_else(|| other.note.clone()),
        })
    }

    /// Rows whose time label satisfies `keep`.
    pub fn select_rows(&self, keep: impl Fn(usize) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|t| keep(*t)).collect();
        let times = match &self.times {
            TimeAxis::Daily(d) => TimeAxis::Daily(rows.iter().map(|t| d[*t]).collect()),
            TimeAxis::Monthly(m) => TimeAxis::Monthly(rows.iter().map(|t| m[*t]).collect()),
            TimeAxis::Index(_) => TimeAxis::Index(rows.len()),
        };
        Self {
            times,
            values: self.values.select(NdAxis(0), &rows),
            names: self.names.clone(),
            moments: self.moments.clone(),
            note: self.note.clone(),
        }
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// CSV plus a `<path>.json` sidecar holding the normalization moments.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_series_csv(path, &self.times, &self.names, &self.values)?;
        let side = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&Sidecar {
            moments: self.moments.clone(),
            note: self.note.clone(),
        })
        .expect("serializable");
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (times, names, values) = read_series_csv(path)?;
        let mut s = Self::new(times, values, names)?;
        let side = Self::sidecar_path(path);
        if side.exists() {
            let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            let car: Sidecar =
                serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
            s.moments = car.moments;
            s.note = car.note;
        }
        Ok(s)
    }
}

/// Area-weighted inner product of a field with a pattern, divided by the
/// sum of the weights.
pub fn project(field: ArrayView2<f64>, pattern: ArrayView2<f64>, weights: ArrayView2<f64>) -> f64 {
    let mut num = 0.0;
    Zip::from(field).and(pattern).and(weights).for_each(|f, p, w| num += f * p * w);
    num / weights.sum()
}

/// Raw projections of every time step onto every regime pattern.
pub fn raw_projections(std_anom: &GridField, patterns: &RegimePatterns) -> Result<IndexSeries> {
    if std_anom.grid.shape() != patterns.grid.shape() {
        return Err(Error::DimensionMismatch("field and pattern grids differ".into()));
    }
    let w = area_weights(&std_anom.grid);
    let s = std_anom.grid.size();
    let wsum = w.sum();
    // (S, k) matrix of weighted patterns, so all projections are one product.
    let mut wp = Array2::<f64>::zeros((s, patterns.k()));
    for r in 0..patterns.k() {
        let col = (&patterns.pattern(r) * &w).into_shape_with_order(s).expect("flat") / wsum;
        wp.column_mut(r).assign(&col);
    }
    let values = std_anom.as_matrix().dot(&wp);
    IndexSeries::new(std_anom.times.clone(), values, patterns.names.clone())
}

fn in_period(times: &TimeAxis, period: &ClimatologyPeriod) -> Result<Vec<usize>> {
    let rows: Vec<usize> = match times {
        TimeAxis::Daily(d) => (0..d.len()).filter(|t| period.contains(d[*t])).collect(),
        TimeAxis::Monthly(m) => (0..m.len()).filter(|t| period.contains_month(m[*t])).collect(),
        TimeAxis::Index(_) => return Err(Error::InvalidField("index series needs dates".into())),
    };
    if rows.is_empty() {
        return Err(Error::PeriodNotCovered(format!("{} to {}", period.start, period.end)));
    }
    Ok(rows)
}

/// `(P − ⟨P⟩) / std(P)` with population moments over `period`.
pub fn index_normalize(raw: &IndexSeries, period: ClimatologyPeriod) -> Result<IndexSeries> {
    let rows = in_period(&raw.times, &period)?;
    let n = rows.len() as f64;
    let mut mean = Vec::with_capacity(raw.k());
    let mut std = Vec::with_capacity(raw.k());
    for (j, col) in raw.values.columns().into_iter().enumerate() {
        let m = rows.iter().map(|t| col[*t]).sum::<f64>() / n;
        let v = rows.iter().map(|t| (col[*t] - m).powi(2)).sum::<f64>() / n;
        let sd = v.sqrt();
        if !(sd > 1e-12 * m.abs().max(f64::MIN_POSITIVE)) {
            return Err(Error::ZeroStd(raw.names[j].clone()));
        }
        mean.push(m);
        std.push(sd);
    }
    apply_moments(raw, &NormMoments { mean, std, period })
}

/// Normalizes raw projections with previously computed moments.
pub fn apply_moments(raw: &IndexSeries, moments: &NormMoments) -> Result<IndexSeries> {
    if moments.mean.len() != raw.k() || moments.std.len() != raw.k() {
        return Err(Error::KMismatch(moments.mean.len(), raw.k()));
    }
    let mut values = raw.values.clone();
    for (j, mut col) in values.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|p| (p - moments.mean[j]) / moments.std[j]);
    }
    Ok(IndexSeries {
        times: raw.times.clone(),
        values,
        names: raw.names.clone(),
        moments: Some(moments.clone()),
        note: raw.note.clone(),
    })
}

/// Normalized daily regime indices of `std_anom`.
pub fn regime_indices(
    std_anom: &GridField,
    patterns: &RegimePatterns,
    period: ClimatologyPeriod,
) -> Result<IndexSeries> {
    index_normalize(&raw_projections(std_anom, patterns)?, period)
}

/// NAO index: the leading principal component of `std_anom` (projected on
/// EOF 1 for every day), normalized over the EOF analysis period.
pub fn nao_index(eof: &EofBasis, std_anom: &GridField) -> Result<IndexSeries> {
    if eof.n_modes() == 0 {
        return Err(Error::TooManyModes { requested: 1, max: 0 });
    }
    let pcs = eof.project(std_anom)?;
    let raw = IndexSeries::new(
        std_anom.times.clone(),
        pcs.slice(ndarray::s![.., 0..1]).to_owned(),
        vec!["NAO".into()],
    )?;
    let period = match (eof.dates.first(), eof.dates.last()) {
        (Some(a), Some(b)) => ClimatologyPeriod { start: *a, end: *b },
        _ => return Err(Error::Degenerate("EOF without dates".into())),
    };
    let mut out = index_normalize(&raw, period)?;
    out.note = Some("EOF sign fixed so the largest-magnitude loading is positive".into());
    Ok(out)
}

/// Calendar-month mean of a daily index series; months must be complete.
pub fn monthly_index(daily: &IndexSeries) -> Result<IndexSeries> {
    let dates = daily
        .times
        .daily()
        .ok_or_else(|| Error::InvalidField("monthly_index needs a daily series".into()))?;
    let (first, last) = match (dates.first(), dates.last()) {
        (Some(f), Some(l)) => (YearMonth::of(*f), YearMonth::of(*l)),
        _ => return Err(Error::EmptyMonth("no data".into())),
    };
    let months = YearMonth::range(first, last);
    let mut values = Array2::<f64>::zeros((months.len(), daily.k()));
    let mut counts = vec![0u32; months.len()];
    for (t, d) in dates.iter().enumerate() {
        let m = first.months_until(YearMonth::of(*d)) as usize;
        counts[m] += 1;
        let mut row = values.row_mut(m);
        row += &daily.values.row(t);
    }
    for (m, ym) in months.iter().enumerate() {
        if counts[m] == 0 {
            return Err(Error::EmptyMonth(ym.to_string()));
        }
        if counts[m] != ym.n_days() {
            return Err(Error::PartialMonth(ym.to_string()));
        }
        let mut row = values.row_mut(m);
        row /= counts[m] as f64;
    }
    Ok(IndexSeries {
        times: TimeAxis::Monthly(months),
        values,
        names: daily.names.clone(),
        moments: daily.moments.clone(),
        note: daily.note.clone(),
    })
}

/// Standard deviation of a zero-mean normal whose mean absolute value is `mare`.
pub fn mare_to_sigma(mare: f64) -> Result<f64> {
    if !(mare >= 0.0) {
        return Err(Error::NegativeMare(mare));
    }
    Ok(mare * (std::f64::consts::PI / 2.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Mean absolute relative error as a fraction (0.4 = 40 %).
    pub mare: f64,
    pub n_realizations: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(mare: f64, seed: u64) -> Self {
        Self {
            mare,
            n_realizations: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        mare_to_sigma(self.mare)?;
        if self.n_realizations == 0 {
            return Err(Error::InvalidConfig("n_realizations must be at least 1".into()));
        }
        Ok(())
    }
}

/// `I' = (1 + f) I` with `f ~ N(0, σ(mare))` drawn independently for each
/// time, index and realization. Realization `r` uses stream `r` of a
/// ChaCha generator keyed by the seed.
pub fn perturb_indices(indices: &IndexSeries, spec: &PerturbationSpec) -> Result<Vec<IndexSeries>> {
    spec.validate()?;
    let sigma = mare_to_sigma(spec.mare)?;
    let out = (0..spec.n_realizations)
        .into_par_iter()
        .map(|r| {
            let mut s = indices.clone();
            if sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(r as u64);
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                s.values.mapv_inplace(|v| (1.0 + normal.sample(&mut rng)) * v);
            }
            s
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub spec: PerturbationSpec,
    pub sigma: f64,
    pub files: Vec<String>,
}

/// One CSV per realization plus `manifest.json` in `dir`.
pub fn write_perturbed_ensemble(
    dir: impl AsRef<Path>,
    ensemble: &[IndexSeries],
    spec: &PerturbationSpec,
) -> Result<EnsembleManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(ensemble.len());
    for (r, s) in ensemble.iter().enumerate() {
        let name = format!("realization_{r:03}.csv");
        s.write_csv(dir.join(&name))?;
        files.push(name);
    }
    let manifest = EnsembleManifest {
        spec: *spec,
        sigma: mare_to_sigma(spec.mare)?,
        files,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_perturbed_ensemble(dir: impl AsRef<Path>) -> Result<(EnsembleManifest, Vec<IndexSeries>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: EnsembleManifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let series = manifest
        .files
        .iter()
        .map(|f| IndexSeries::read_csv(dir.join(f)))
        .collect::<Result<_>>()?;
    Ok((manifest, series))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, Domain, Grid, Variable};
    use chrono::NaiveDate;
    use ndarray::{array, Array1, Array3};

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn grid3() -> Grid {
        Grid::new(Axis::new(0.0, 30.0, 3), Axis::new(0.0, 10.0, 3), Domain::Custom("g".into())).unwrap()
    }

    fn period(n: u64) -> ClimatologyPeriod {
        ClimatologyPeriod {
            start: ymd(2000, 1, 1),
            end: ymd(2000, 1, 1) + chrono::Days::new(n - 1),
        }
    }

    #[test]
    fn projection_of_pattern_on_itself() {
        let g = grid3();
        let w = area_weights(&g);
        let p = array![[1.0, -1.0, 0.5], [2.0, 0.0, -0.5], [1.0, 1.0, 3.0]];
        // cos 0 = 1, cos 30 = √3/2, cos 60 = 1/2
        let c = [1.0, 3f64.sqrt() / 2.0, 0.5];
        let mut num = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                num += p[[i, j]] * p[[i, j]] * c[i];
            }
        }
        let expected = num / (3.0 * c.iter().sum::<f64>());
        assert!((project(p.view(), p.view(), w.view()) - expected).abs() < 1e-14);
        let neg = -&p;
        assert_eq!(project(neg.view(), p.view(), w.view()), -project(p.view(), p.view(), w.view()));
        // orthogonal under the weighted inner product
        let a = array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let b = array![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(project(a.view(), b.view(), w.view()), 0.0);
    }

    #[test]
    fn normalize_hand_values() {
        let times = TimeAxis::daily_range(ymd(2000, 1, 1), ymd(2000, 1, 4));
        let raw = IndexSeries::new(times, array![[0.0], [1.0], [2.0], [3.0]], vec!["A".into()]).unwrap();
        let out = index_normalize(&raw, period(4)).unwrap();
        let want = [-1.3416407864998738, -0.4472135954999579, 0.4472135954999579, 1.3416407864998738];
        for (a, b) in out.values.column(0).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let m = out.moments.unwrap();
        assert_eq!(m.mean, vec![1.5]);
        assert!((m.std[0] - 1.25f64.sqrt()).abs() < 1e-15);
        let constant = IndexSeries::new(raw.times.clone(), Array2::from_elem((4, 1), 3.0), vec!["C".into()]).unwrap();
        assert!(matches!(index_normalize(&constant, period(4)), Err(Error::ZeroStd(_))));
    }

    #[test]
    fn moments_come_from_period_only() {
        let times = TimeAxis::daily_range(ymd(2000, 1, 1), ymd(2000, 1, 6));
        let raw = IndexSeries::new(times, array![[0.0], [1.0], [2.0], [3.0], [100.0], [-50.0]], vec!["A".into()]).unwrap();
        let out = index_normalize(&raw, period(4)).unwrap();
        assert_eq!(out.moments.unwrap().mean, vec![1.5]);
        assert!((out.values[[4, 0]] - 98.5 / 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn monthly_means() {
        let times = TimeAxis::daily_range(ymd(2001, 1, 1), ymd(2001, 2, 28));
        let vals = Array2::from_shape_fn((59, 2), |(t, j)| if j == 0 { if t < 31 { t as f64 } else { 100.0 } } else { 4.0 });
        let s = IndexSeries::new(times, vals, vec!["a".into(), "b".into()]).unwrap();
        let m = monthly_index(&s).unwrap();
        assert_eq!(m.values, array![[15.0, 4.0], [100.0, 4.0]]);
        assert_eq!(m.times.monthly().unwrap().len(), 2);
        let partial = s.select_rows(|t| t > 0);
        assert!(matches!(monthly_index(&partial), Err(Error::PartialMonth(_))));
    }

    #[test]
    fn mare_sigma() {
        assert_eq!(mare_to_sigma(0.0).unwrap(), 0.0);
        assert!((mare_to_sigma((2.0 / std::f64::consts::PI).sqrt()).unwrap() - 1.0).abs() < 1e-15);
        assert!((mare_to_sigma(0.8).unwrap() - 1.0026513098524001).abs() < 1e-12);
        assert!(matches!(mare_to_sigma(-0.1), Err(Error::NegativeMare(_))));
    }

    #[test]
    fn zero_mare_is_identity() {
        let s = IndexSeries::new(TimeAxis::Index(3), array![[1.0, -2.0], [0.5, 3.0], [0.0, 1.0]], vec!["a".into(), "b".into()]).unwrap();
        let e = perturb_indices(&s, &PerturbationSpec { mare: 0.0, n_realizations: 4, seed: 1 }).unwrap();
        assert_eq!(e.len(), 4);
        assert!(e.iter().all(|r| r.values == s.values));
    }

    #[test]
    fn perturbation_matches_target_mare() {
        let n = 100_000;
        let base = Array1::from_shape_fn(n, |t| 0.5 + (t % 7) as f64 * 0.3 * if t % 2 == 0 { 1.0 } else { -1.0 });
        let s = IndexSeries::new(TimeAxis::Index(n), base.clone().insert_axis(NdAxis(1)), vec!["a".into()]).unwrap();
        let spec = PerturbationSpec { mare: 0.4, n_realizations: 2, seed: 9 };
        let e = perturb_indices(&s, &spec).unwrap();
        assert_ne!(e[0].values, e[1].values);
        let p = &e[0].values.column(0);
        let rel = (0..n).map(|t| ((p[t] - base[t]) / base[t]).abs()).sum::<f64>() / n as f64;
        assert!((rel / 0.4 - 1.0).abs() < 0.02, "{rel}");
        let mae = (0..n).map(|t| (p[t] - base[t]).abs()).sum::<f64>() / n as f64;
        let mean_abs = base.mapv(f64::abs).mean().unwrap();
        assert!((mae / (0.4 * mean_abs) - 1.0).abs() < 0.02);
        let again = perturb_indices(&s, &spec).unwrap();
        assert_eq!(again, e);
    }

    #[test]
    fn csv_roundtrip_with_moments() {
        let dir = tempfile::tempdir().unwrap();
        let times = TimeAxis::daily_range(ymd(2000, 1, 1), ymd(2000, 1, 4));
        let raw = IndexSeries::new(times, array![[0.0, 1.0], [1.0, 5.0], [2.0, 2.0], [3.0, 0.25]], vec!["A".into(), "B".into()]).unwrap();
        let s = index_normalize(&raw, period(4)).unwrap();
        let path = dir.path().join("idx.csv");
        s.write_csv(&path).unwrap();
        assert_eq!(IndexSeries::read_csv(&path).unwrap(), s);
        let spec = PerturbationSpec { mare: 0.2, n_realizations: 3, seed: 0 };
        let ens = perturb_indices(&s, &spec).unwrap();
        write_perturbed_ensemble(dir.path().join("ens"), &ens, &spec).unwrap();
        let (m, back) = read_perturbed_ensemble(dir.path().join("ens")).unwrap();
        assert_eq!(m.files.len(), 3);
        assert_eq!(back, ens);
    }

    #[test]
    fn regime_indices_scale_invariant() {
        let g = grid3();
        let times = TimeAxis::daily_range(ymd(2000, 1, 1), ymd(2000, 1, 10));
        let vals = Array3::from_shape_fn((10, 3, 3), |(t, i, j)| ((t * 5 + i * 3 + j) % 7) as f64 - 3.0);
        let f = GridField::new(g.clone(), times, vals, Variable::Anomaly("z500".into()), "1").unwrap();
        let pat = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| (i as f64) - (j as f64) * 0.5);
        let mk = |scale: f64| RegimePatterns {
            grid: g.clone(),
            patterns: pat.mapv(|v| v * scale),
            centroids: Array2::zeros((1, 1)),
            labels: vec![],
            dates: vec![],
            names: vec!["R1".into()],
            counts: vec![1],
        };
        let a = regime_indices(&f, &mk(1.0), period(10)).unwrap();
        let b = regime_indices(&f, &mk(3.5), period(10)).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let col = a.values.column(0);
        assert!(col.mean().unwrap().abs() < 1e-12);
        assert!((col.mapv(|v| v * v).mean().unwrap().sqrt() - 1.0).abs() < 1e-12);
    }
}

//! Deterministic skill metrics, per-gridpoint skill maps and their
//! median summaries.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::grid::GridField;
use crate::time::{Season, YearMonth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mae,
    Acc,
    Ce,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mae, Metric::Acc, Metric::Ce];

    pub fn tag(self) -> &'static str {
        match self {
            Metric::Mae => "mae",
            Metric::Acc => "acc",
            Metric::Ce => "ce",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mae" => Ok(Metric::Mae),
            "acc" => Ok(Metric::Acc),
            "ce" => Ok(Metric::Ce),
            _ => Err(Error::MetricMismatch(format!("unknown metric {s:?}"))),
        }
    }
}

fn check_lengths(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(Error::InsufficientSamples("empty series".into()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Whether a series has variance above rounding noise.
fn varies(x: &[f64]) -> bool {
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    ss > 1e-24 * x.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE)
}

/// Mean absolute error.
pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Anomaly correlation coefficient (Pearson correlation of the centred series).
pub fn acc(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat)?;
    if y.len() < 3 {
        return Err(Error::InsufficientSamples(format!("acc needs 3 samples, got {}", y.len())));
    }
    let (my, mh) = (mean(y), mean(yhat));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mh);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let den = (sxx * syy).sqrt();
    // relative to the data scale so rounding noise in a constant series counts as zero
    let scale = y.iter().chain(yhat).map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if !(sxx > 1e-24 * scale && syy > 1e-24 * scale) || den == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / den).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a Pearson correlation under the t-test with `n − 2`
/// degrees of freedom.
pub fn acc_pvalue(r: f64, n: usize) -> Result<f64> {
    if !(r.abs() <= 1.0) {
        return Err(Error::InvalidConfig(format!("correlation {r} outside [-1, 1]")));
    }
    if n < 3 {
        return Err(Error::InsufficientSamples(format!("p-value needs 3 samples, got {n}")));
    }
    if r.abs() == 1.0 {
        return Ok(0.0);
    }
    let dof = (n - 2) as f64;
    let t = r * (dof / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive dof");
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Coefficient of efficiency against the climatology `reference_mean`.
pub fn ce(y: &[f64], yhat: &[f64], reference_mean: f64) -> Result<f64> {
    check_lengths(y, yhat)?;
    let num: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = y.iter().map(|a| (a - reference_mean).powi(2)).sum();
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    if !(den > 1e-24 * scale) {
        return Err(Error::ZeroReferenceVariance);
    }
    Ok(1.0 - num / den)
}

/// Per-gridpoint values of one metric. Undefined or masked points are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillMap {
    pub metric: Metric,
    pub season: Season,
    pub values: Array2<f64>,
    /// `p < alpha` for correlation maps.
    pub significant: Option<Array2<bool>>,
    pub n_samples: usize,
    pub first: Option<YearMonth>,
    pub last: Option<YearMonth>,
}

impl SkillMap {
    /// Median over the defined (finite) gridpoints.
    pub fn spatial_median(&self) -> Result<f64> {
        median(self.values.iter().copied().filter(|v| v.is_finite()).collect())
            .ok_or(Error::EmptyDomain)
    }
}

/// MAE, ACC and CE maps of one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillMaps {
    pub mae: SkillMap,
    pub acc: SkillMap,
    pub ce: SkillMap,
}

impl SkillMaps {
    pub fn get(&self, m: Metric) -> &SkillMap {
        match m {
            Metric::Mae => &self.mae,
            Metric::Acc => &self.acc,
            Metric::Ce => &self.ce,
        }
    }
}

/// Settings for [`skill_maps`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkillConfig {
    pub alpha: f64,
}

impl Default for SkillConfig {
    fn default() -> Self {
        Self { alpha: 0.05 }
    }
}

/// Gridpoint-wise skill of `pred` against `obs` over the months of `season`.
///
/// The CE reference is each gridpoint's observed mean over the evaluated
/// months. Points outside `keep` are never read and come out NaN.
pub fn skill_maps(
    obs: &GridField,
    pred: &GridField,
    season: Season,
    keep: Option<ArrayView2<bool>>,
    cfg: &SkillConfig,
) -> Result<SkillMaps> {
    if obs.grid.shape() != pred.grid.shape() {
        return Err(Error::DimensionMismatch("obs and pred grids differ".into()));
    }
    if obs.times != pred.times {
        return Err(Error::DimensionMismatch("obs and pred times differ".into()));
    }
    let months = obs
        .times
        .monthly()
        .ok_or_else(|| Error::InvalidField("skill maps need monthly fields".into()))?;
    let rows: Vec<usize> = (0..months.len()).filter(|t| season.contains(months[*t].month)).collect();
    let n = rows.len();
    if n < 3 {
        return Err(Error::InsufficientSamples(format!("{n} {season} months")));
    }
    let shape = obs.grid.shape();
    if let Some(k) = keep {
        if k.dim() != shape {
            return Err(Error::DimensionMismatch("mask shape".into()));
        }
    }
    let mut mae_map = Array2::from_elem(shape, f64::NAN);
    let mut acc_map = Array2::from_elem(shape, f64::NAN);
    let mut ce_map = Array2::from_elem(shape, f64::NAN);
    let mut sig = Array2::from_elem(shape, false);
    let mut y = vec![0.0; n];
    let mut yh = vec![0.0; n];
    for i in 0..shape.0 {
        for j in 0..shape.1 {
            if keep.is_some_and(|k| !k[[i, j]]) {
                continue;
            }
            for (s, &t) in rows.iter().enumerate() {
                y[s] = obs.values[[t, i, j]];
                yh[s] = pred.values[[t, i, j]];
            }
            mae_map[[i, j]] = mae(&y, &yh)?;
            match acc(&y, &yh) {
                Ok(r) => {
                    acc_map[[i, j]] = r;
                    sig[[i, j]] = acc_pvalue(r, n)? < cfg.alpha;
                }
                // a prediction without temporal variation has no linear association
                Err(Error::UndefinedCorrelation) if varies(&y) && !varies(&yh) => acc_map[[i, j]] = 0.0,
                Err(_) => {}
            }
            if let Ok(c) = ce(&y, &yh, mean(&y)) {
                ce_map[[i, j]] = c;
            }
        }
    }
    let (first, last) = (rows.first().map(|t| months[*t]), rows.last().map(|t| months[*t]));
    let mk = |metric, values, significant| SkillMap {
        metric,
        season,
        values,
        significant,
        n_samples: n,
        first,
        last,
    };
    Ok(SkillMaps {
        mae: mk(Metric::Mae, mae_map, None),
        acc: mk(Metric::Acc, acc_map, Some(sig)),
        ce: mk(Metric::Ce, ce_map, None),
    })
}

/// Median of a sample (mean of the middle pair for even sizes).
pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median across seeds of the spatial medians, with half the seed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub median: f64,
    pub uncertainty: f64,
    pub per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSummary {
    pub metrics: Vec<MetricSummary>,
    pub n_points: usize,
    pub n_samples: usize,
}

impl SkillSummary {
    pub fn get(&self, m: Metric) -> Option<&MetricSummary> {
        self.metrics.iter().find(|s| s.metric == m)
    }
}

/// Point estimate and semi-difference from per-seed values.
pub fn seed_spread(per_seed: &[f64]) -> Option<(f64, f64)> {
    let med = median(per_seed.to_vec())?;
    let lo = per_seed.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = per_seed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((med, 0.5 * (hi - lo)))
}

pub fn summarize(per_seed: &[SkillMaps]) -> Result<SkillSummary> {
    let first = per_seed
        .first()
        .ok_or_else(|| Error::InsufficientSamples("no seeds to summarize".into()))?;
    let mut metrics = Vec::new();
    for m in Metric::ALL {
        let vals = per_seed.iter().map(|s| s.get(m).spatial_median()).collect::<Result<Vec<_>>>()?;
        let (median, uncertainty) = seed_spread(&vals).expect("non-empty");
        metrics.push(MetricSummary {
            metric: m,
            median,
            uncertainty,
            per_seed: vals,
        });
    }
    Ok(SkillSummary {
        metrics,
        n_points: first.mae.values.iter().filter(|v| v.is_finite()).count(),
        n_samples: first.mae.n_samples,
    })
}

/// Full-period minus test-only medians, per metric.
pub fn subperiod_compare(full: &SkillSummary, test_only: &SkillSummary) -> Result<Vec<(Metric, f64)>> {
    let a: Vec<Metric> = full.metrics.iter().map(|m| m.metric).collect();
    let b: Vec<Metric> = test_only.metrics.iter().map(|m| m.metric).collect();
    if a != b {
        return Err(Error::MetricMismatch(format!("{a:?} vs {b:?}")));
    }
    Ok(full
        .metrics
        .iter()
        .zip(&test_only.metrics)
        .map(|(x, y)| (x.metric, x.median - y.median))
        .collect())
}

/// Two-decimal rendering used in difference tables.
pub fn format_diff(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    format!("{:.2}", if r == 0.0 { 0.0 } else { r })
}

/// One line of a skill table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variable: String,
    pub season: String,
    pub label: String,
    pub metric: Metric,
    pub median: f64,
    pub uncertainty: f64,
}

pub fn write_summary_csv(path: impl AsRef<Path>, rows: &[SummaryRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "variable,season,label,metric,median,uncertainty").map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.4},{:.4}",
            r.variable, r.season, r.label, r.metric, r.median, r.uncertainty
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Mask of points where both inputs are finite.
pub fn finite_mask(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<bool> {
    let mut out = Array2::from_elem(a.raw_dim(), false);
    Zip::from(&mut out).and(a).and(b).for_each(|o, x, y| *o = x.is_finite() && y.is_finite());
    out
}

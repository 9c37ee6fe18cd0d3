//! In-memory versions of the pipeline stages and experiments. The CLI stages
//! wrap these with artifact IO.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Axis};
use regime_core::calibration::{
    ensemble_index_projection, fit_ensemble_eqm, forecast_monthly_anomalies, EnsembleIndices, EqmConfig,
};
use regime_core::grid::{GridField, StaticStack};
use regime_core::indices::{monthly_index, nao_index, perturb_indices, regime_indices, IndexSeries, PerturbationSpec};
use regime_core::modes::{fit_regimes, EofBasis, RegimeConfig, RegimePatterns};
use regime_core::preprocess::{
    anomalies, calendar_day_climatology, monthly_aggregate, standardized_anomalies, Aggregation, CalendarClimatology,
    ClimatologyPeriod, StandardizeConfig, Standardized,
};
use regime_core::synth::{toy_forecast, SurfaceVar, SynthData, ToyForecastConfig};
use regime_core::time::{Season, TimeAxis, YearMonth};
use regime_core::verification::{skill_maps, summarize, Metric, SkillConfig, SkillMaps};
use regime_model::train::{Period, TrainOutcome};
use regime_model::{Dataset, Ensemble, ModelConfig, Precision, TrainConfig, TrainSplit};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// Index configurations compared in the ablation.
pub const INDEX_CONFIGS: [usize; 4] = [7, 4, 1, 0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub climatology: ClimatologyPeriod,
    pub standardize: StandardizeConfig,
    pub regimes: RegimeConfig,
    /// Cluster count of the reduced regime set.
    pub k_small: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            climatology: ClimatologyPeriod::default(),
            standardize: StandardizeConfig::default(),
            regimes: RegimeConfig::default(),
            k_small: 4,
        }
    }
}

/// Circulation analysis and surface targets derived from daily fields.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub standardized: Standardized,
    pub eof: EofBasis,
    pub regimes: RegimePatterns,
    pub regimes_small: RegimePatterns,
    /// Normalized daily indices of the full regime set (carries moments).
    pub daily: IndexSeries,
    pub daily_small: IndexSeries,
    /// Monthly index sets keyed by the number of indices (7, 4, 1, 0).
    pub monthly: BTreeMap<usize, IndexSeries>,
    /// Monthly surface anomalies (t2m mean, tp sum of daily anomalies).
    pub targets: Vec<GridField>,
    pub surface_climatology: Vec<CalendarClimatology>,
}

impl Analysis {
    pub fn target(&self, var: SurfaceVar) -> &GridField {
        &self.targets[var as usize]
    }

    pub fn indices(&self, n: usize) -> Result<&IndexSeries> {
        self.monthly
            .get(&n)
            .ok_or_else(|| PipelineError::BadConfig(format!("no index set with {n} indices")))
    }
}

/// Monthly anomalies of a daily surface variable w.r.t. its calendar-day climatology.
pub fn surface_targets(daily: &GridField, cfg: &AnalysisConfig) -> Result<(CalendarClimatology, GridField)> {
    let clim = calendar_day_climatology(daily, cfg.climatology, cfg.standardize.window_days)?;
    let anom = anomalies(daily, &clim)?;
    let monthly = monthly_aggregate(&anom, Aggregation::for_variable(&daily.variable.base()), false)?;
    Ok((clim, monthly))
}

/// Standardization, regimes (full and reduced sets), NAO and monthly index sets.
pub fn analyze(z500: &GridField, surface: [&GridField; 2], cfg: &AnalysisConfig) -> Result<Analysis> {
    let standardized = standardized_anomalies(z500, cfg.climatology, &cfg.standardize)?;
    let std_anom = &standardized.standardized;
    let (eof, regimes, _) = fit_regimes(std_anom, cfg.climatology, &cfg.regimes)?;
    let small_cfg = RegimeConfig {
        k: cfg.k_small,
        names: None,
        ..cfg.regimes.clone()
    };
    let (_, regimes_small, _) = fit_regimes(std_anom, cfg.climatology, &small_cfg)?;
    let daily = regime_indices(std_anom, &regimes, cfg.climatology)?;
    let daily_small = regime_indices(std_anom, &regimes_small, cfg.climatology)?;
    let nao = nao_index(&eof, std_anom)?;
    let m7 = monthly_index(&daily)?;
    let mut monthly = BTreeMap::new();
    monthly.insert(0, IndexSeries::empty(m7.times.clone()));
    monthly.insert(1, monthly_index(&nao)?);
    monthly.insert(cfg.k_small, monthly_index(&daily_small)?);
    monthly.insert(cfg.regimes.k, m7);
    let mut targets = Vec::new();
    let mut surface_climatology = Vec::new();
    for field in surface {
        let (c, t) = surface_targets(field, cfg)?;
        surface_climatology.push(c);
        targets.push(t);
    }
    Ok(Analysis {
        standardized,
        eof,
        regimes,
        regimes_small,
        daily,
        daily_small,
        monthly,
        targets,
        surface_climatology,
    })
}

/// Trains the seed ensemble for one variable and index set.
pub fn train_target(
    indices: &IndexSeries,
    target: &GridField,
    statics: &StaticStack,
    split: &TrainSplit,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    let data = Dataset::align(indices, target)?;
    let cfg = ModelConfig {
        n_indices: indices.k(),
        grid_shape: statics.grid.shape(),
        ..model.clone()
    };
    Ok(regime_model::train(&data, statics, split, &cfg, train)?)
}

fn months_in(series: &IndexSeries, period: &Period) -> Result<(Vec<usize>, Vec<YearMonth>)> {
    let months = series
        .times
        .monthly()
        .ok_or_else(|| PipelineError::BadConfig("indices must be monthly".into()))?;
    let rows: Vec<usize> = (0..months.len()).filter(|t| period.contains(months[*t])).collect();
    if rows.is_empty() {
        return Err(PipelineError::MissingArtifact(format!("indices for {}..{}", period.start, period.end)));
    }
    let times = rows.iter().map(|t| months[*t]).collect();
    Ok((rows, times))
}

/// Monthly field on `grid` with the given values.
pub fn monthly_field(like: &GridField, times: Vec<YearMonth>, values: Array3<f64>) -> Result<GridField> {
    Ok(GridField::new(
        like.grid.clone(),
        TimeAxis::Monthly(times),
        values,
        like.variable.anomaly(),
        like.units.clone(),
    )?)
}

/// Observed anomalies restricted to `times`.
pub fn observed(target: &GridField, times: &[YearMonth]) -> Result<GridField> {
    let months = target
        .times
        .monthly()
        .ok_or_else(|| PipelineError::BadConfig("targets must be monthly".into()))?;
    let rows = times
        .iter()
        .map(|ym| {
            months
                .binary_search(ym)
                .map_err(|_| PipelineError::MissingArtifact(format!("observed anomaly for {ym}")))
        })
        .collect::<Result<Vec<_>>>()?;
    monthly_field(target, times.to_vec(), target.values.select(Axis(0), &rows))
}

/// Ensemble-mean reconstruction over the months of `period`.
pub fn reconstruct_period(
    ens: &Ensemble,
    indices: &IndexSeries,
    period: &Period,
    statics: &StaticStack,
    like: &GridField,
) -> Result<GridField> {
    let (rows, times) = months_in(indices, period)?;
    let x = indices.values.select(Axis(0), &rows);
    let values = ens.reconstruct(x.view(), &times, statics, Precision::F32)?;
    monthly_field(like, times, values)
}

/// One row of a skill table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRow {
    pub variable: String,
    pub season: Season,
    pub label: String,
    pub mae: f64,
    pub acc: f64,
    pub ce: f64,
    pub mae_unc: f64,
    pub acc_unc: f64,
    pub ce_unc: f64,
}

impl SkillRow {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Mae => self.mae,
            Metric::Acc => self.acc,
            Metric::Ce => self.ce,
        }
    }
}

fn land_or_all(statics: &StaticStack, land_only: bool) -> Option<Array2<bool>> {
    land_only.then(|| statics.land())
}

/// Spatial medians of the ensemble-mean skill, with seed uncertainty from
/// the individual seed models.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    ens: &Ensemble,
    indices: &IndexSeries,
    target: &GridField,
    statics: &StaticStack,
    period: &Period,
    seasons: &[Season],
    land_only: bool,
    label: &str,
) -> Result<Vec<SkillRow>> {
    let pred = reconstruct_period(ens, indices, period, statics, target)?;
    let obs = observed(target, pred.times.monthly().expect("monthly"))?;
    let per_seed: Vec<GridField> = ens
        .models
        .iter()
        .map(|m| reconstruct_period(&Ensemble::new(vec![m.clone()])?, indices, period, statics, target))
        .collect::<Result<_>>()?;
    let keep = land_or_all(statics, land_only);
    let cfg = SkillConfig::default();
    let mut rows = Vec::new();
    for season in seasons {
        let mean = skill_maps(&obs, &pred, *season, keep.as_ref().map(|k| k.view()), &cfg)?;
        let seeds: Vec<SkillMaps> = per_seed
            .iter()
            .map(|p| skill_maps(&obs, p, *season, keep.as_ref().map(|k| k.view()), &cfg))
            .collect::<regime_core::Result<_>>()?;
        let summary = summarize(&seeds)?;
        let unc = |m| summary.get(m).map_or(f64::NAN, |s| s.uncertainty);
        rows.push(SkillRow {
            variable: target.variable.base().tag(),
            season: *season,
            label: label.to_string(),
            mae: mean.mae.spatial_median()?,
            acc: mean.acc.spatial_median()?,
            ce: mean.ce.spatial_median()?,
            mae_unc: unc(Metric::Mae),
            acc_unc: unc(Metric::Acc),
            ce_unc: unc(Metric::Ce),
        });
    }
    Ok(rows)
}

/// Spatial-median skill of one prediction field.
pub fn field_skill(obs: &GridField, pred: &GridField, season: Season, keep: Option<&Array2<bool>>) -> Result<[f64; 3]> {
    let maps = skill_maps(obs, pred, season, keep.map(|k| k.view()), &SkillConfig::default())?;
    Ok([maps.mae.spatial_median()?, maps.acc.spatial_median()?, maps.ce.spatial_median()?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MareRow {
    pub variable: String,
    pub season: Season,
    pub mare: f64,
    pub mae: f64,
    pub acc: f64,
    pub ce: f64,
    /// CE of the index-free baseline over the same months.
    pub baseline_ce: Option<f64>,
}

/// Skill of the reconstruction from perturbed indices, averaging the
/// spatial medians over realizations, for every MARE level.
#[allow(clippy::too_many_arguments)]
pub fn mare_sweep(
    ens: &Ensemble,
    indices: &IndexSeries,
    target: &GridField,
    statics: &StaticStack,
    period: &Period,
    seasons: &[Season],
    levels: &[f64],
    n_realizations: usize,
    seed: u64,
    land_only: bool,
    baseline: Option<(&Ensemble, &IndexSeries)>,
) -> Result<Vec<MareRow>> {
    let (rows, times) = months_in(indices, period)?;
    let base = indices.select_rows(|t| rows.binary_search(&t).is_ok());
    let obs = observed(target, &times)?;
    let keep = land_or_all(statics, land_only);
    let baseline_ce: Vec<Option<f64>> = match baseline {
        Some((b, bidx)) => {
            let pred = reconstruct_period(b, bidx, period, statics, target)?;
            seasons
                .iter()
                .map(|s| field_skill(&obs, &pred, *s, keep.as_ref()).map(|v| Some(v[2])))
                .collect::<Result<_>>()?
        }
        None => vec![None; seasons.len()],
    };
    let mut out = Vec::new();
    for (li, mare) in levels.iter().enumerate() {
        let spec = PerturbationSpec {
            mare: *mare,
            n_realizations,
            seed: seed.wrapping_add(li as u64),
        };
        // unperturbed indices: every realization would be identical
        let realizations = if *mare == 0.0 { vec![base.clone()] } else { perturb_indices(&base, &spec)? };
        let mut sums = vec![[0.0; 3]; seasons.len()];
        for r in &realizations {
            let values = ens.reconstruct(r.values.view(), &times, statics, Precision::F32)?;
            let pred = monthly_field(target, times.clone(), values)?;
            for (si, s) in seasons.iter().enumerate() {
                let v = field_skill(&obs, &pred, *s, keep.as_ref())?;
                for m in 0..3 {
                    sums[si][m] += v[m];
                }
            }
        }
        for (si, s) in seasons.iter().enumerate() {
            let n = realizations.len() as f64;
            out.push(MareRow {
                variable: target.variable.base().tag(),
                season: *s,
                mare: *mare,
                mae: sums[si][0] / n,
                acc: sums[si][1] / n,
                ce: sums[si][2] / n,
                baseline_ce: baseline_ce[si],
            });
        }
        tracing::info!(mare, "sweep level done");
    }
    Ok(out)
}

/// Smallest MARE at which the model CE drops below the baseline CE.
pub fn crossing_mare(rows: &[MareRow], variable: &str, season: Season) -> Option<f64> {
    rows.iter()
        .filter(|r| r.variable == variable && r.season == season)
        .find(|r| r.baseline_ce.is_some_and(|b| r.ce < b))
        .map(|r| r.mare)
}

/// Levels `0, step, …, max` (inclusive).
pub fn mare_levels(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (0..=n).map(|i| (i as f64 * step * 1e6).round() / 1e6).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRow {
    pub system: String,
    pub variable: String,
    pub season: Season,
    pub lead: usize,
    pub mae: f64,
    pub acc: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub toy: ToyForecastConfig,
    pub hindcast: Period,
    pub eqm: EqmConfig,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            toy: ToyForecastConfig::default(),
            hindcast: Period::years(1981, 2010),
            eqm: EqmConfig {
                pooled_members: true,
                ..EqmConfig::default()
            },
        }
    }
}

/// Bias-corrected toy forecast: member regime indices and the calibrated
/// ensemble-mean surface forecast of every lead.
#[derive(Debug, Clone)]
pub struct CalibratedForecast {
    pub indices: EnsembleIndices,
    /// Per variable, one ensemble-mean field per lead.
    pub raw_mean: Vec<(SurfaceVar, Vec<GridField>)>,
}

impl CalibratedForecast {
    pub fn raw(&self, var: SurfaceVar) -> Result<&[GridField]> {
        self.raw_mean
            .iter()
            .find(|(v, _)| *v == var)
            .map(|(_, f)| f.as_slice())
            .ok_or_else(|| PipelineError::MissingArtifact(format!("calibrated {} forecast", var.variable().tag())))
    }
}

/// EQM-corrects the toy circulation and surface forecasts against the
/// hindcast period and projects the corrected circulation on the regimes.
pub fn calibrate_forecast(
    data: &SynthData,
    z500_climatology: &CalendarClimatology,
    regimes: &RegimePatterns,
    daily: &IndexSeries,
    targets: [&GridField; 2],
    cfg: &HybridConfig,
) -> Result<CalibratedForecast> {
    let toy = toy_forecast(data, targets, &cfg.toy)?;
    let z_ref = monthly_aggregate(&data.z500, Aggregation::Mean, false)?;
    let in_hindcast = |ym: YearMonth| cfg.hindcast.contains(ym);
    let z_eqm = fit_ensemble_eqm(&toy.z500.select_inits(in_hindcast)?, &z_ref, &cfg.eqm)?;
    let z_cal = z_eqm.apply(&toy.z500)?;
    let z_anom = forecast_monthly_anomalies(&z_cal, z500_climatology)?;
    let indices = ensemble_index_projection(&z_anom, regimes, daily)?;
    let mut raw_mean = Vec::new();
    for var in SurfaceVar::ALL {
        let raw = toy.surface(var);
        let eqm = fit_ensemble_eqm(&raw.select_inits(in_hindcast)?, targets[var as usize], &cfg.eqm)?;
        let cal = eqm.apply(raw)?;
        raw_mean.push((var, (0..cal.n_leads()).map(|l| cal.mean_field(l)).collect()));
    }
    Ok(CalibratedForecast { indices, raw_mean })
}

/// Skill of the hybrid (per-member reconstruction from forecast indices) and
/// of the calibrated raw surface forecast, for every variable, season and lead.
pub fn hybrid_skill(
    cal: &CalibratedForecast,
    ensembles: &[(SurfaceVar, Ensemble)],
    targets: [&GridField; 2],
    statics: &StaticStack,
    period: &Period,
    seasons: &[Season],
    land_only: bool,
) -> Result<Vec<HybridRow>> {
    let keep = land_or_all(statics, land_only);
    let idx = &cal.indices;
    let n_leads = idx.values.shape()[1];
    let mut out = Vec::new();
    for (var, ens) in ensembles {
        let target = targets[*var as usize];
        let raw = cal.raw(*var)?;
        for lead in 0..n_leads {
            let all: Vec<YearMonth> = idx.inits.iter().map(|m| m.add_months(lead as i32)).collect();
            let rows: Vec<usize> = (0..all.len()).filter(|i| period.contains(all[*i])).collect();
            if rows.is_empty() {
                continue;
            }
            let times: Vec<YearMonth> = rows.iter().map(|i| all[*i]).collect();
            let obs = observed(target, &times)?;
            let members: Vec<Array2<f64>> = (0..idx.n_members())
                .map(|m| idx.values.slice(s![m, lead, .., ..]).select(Axis(0), &rows))
                .collect();
            let views: Vec<_> = members.iter().map(|m| m.view()).collect();
            let hybrid = monthly_field(
                target,
                times.clone(),
                ens.reconstruct_members(&views, &times, statics, Precision::F32)?,
            )?;
            let raw_mean = monthly_field(target, times.clone(), raw[lead].values.select(Axis(0), &rows))?;
            for (system, pred) in [("hybrid", &hybrid), ("raw", &raw_mean)] {
                for s in seasons {
                    let [mae, acc, ce] = field_skill(&obs, pred, *s, keep.as_ref())?;
                    out.push(HybridRow {
                        system: system.into(),
                        variable: target.variable.base().tag(),
                        season: *s,
                        lead: lead + 1,
                        mae,
                        acc,
                        ce,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// [`calibrate_forecast`] followed by [`hybrid_skill`].
pub fn hybrid_forecast(
    data: &SynthData,
    analysis: &Analysis,
    ensembles: &[(SurfaceVar, Ensemble)],
    period: &Period,
    seasons: &[Season],
    cfg: &HybridConfig,
    land_only: bool,
) -> Result<Vec<HybridRow>> {
    let targets = [analysis.target(SurfaceVar::T2m), analysis.target(SurfaceVar::Tp)];
    let cal = calibrate_forecast(
        data,
        &analysis.standardized.climatology,
        &analysis.regimes,
        &analysis.daily,
        targets,
        cfg,
    )?;
    hybrid_skill(&cal, ensembles, targets, &data.statics, period, seasons, land_only)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubperiodRow {
    pub variable: String,
    pub season: Season,
    pub metric: Metric,
    /// Full test period minus independent test period.
    pub difference: f64,
    pub flagged: bool,
}

/// Differences of skill medians between two evaluation periods.
pub fn subperiod_table(full: &[SkillRow], independent: &[SkillRow], threshold: f64) -> Result<Vec<SubperiodRow>> {
    let mut out = Vec::new();
    for a in full {
        let b = independent
            .iter()
            .find(|b| b.variable == a.variable && b.season == a.season && b.label == a.label)
            .ok_or_else(|| PipelineError::MissingArtifact(format!("{} {} in both periods", a.variable, a.season)))?;
        for m in Metric::ALL {
            let d = a.get(m) - b.get(m);
            out.push(SubperiodRow {
                variable: a.variable.clone(),
                season: a.season,
                metric: m,
                difference: d,
                flagged: d.abs() > threshold,
            });
        }
    }
    Ok(out)
}

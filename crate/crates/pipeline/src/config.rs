//! Plain-text `key = value` configuration with flag overrides.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use regime_core::preprocess::ClimatologyPeriod;
use regime_core::synth::{Response, SurfaceVar, SynthConfig, ToyForecastConfig};
use regime_core::time::{Season, YearMonth};
use regime_model::train::Period;
use regime_model::{ModelConfig, TrainConfig, TrainSplit};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};
use crate::workflow::{AnalysisConfig, HybridConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Directory with z500.grd, t2m.grd, tp.grd and static.grd; defaults to
    /// the synth stage output.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub synth: SynthConfig,
    pub analysis: AnalysisConfig,
    pub split: TrainSplit,
    pub independent_test: Period,
    pub n_indices: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variables: Vec<SurfaceVar>,
    pub seasons: Vec<Season>,
    pub land_only: bool,
    pub mare_max: f64,
    pub mare_step: f64,
    pub n_realizations: usize,
    pub hybrid: HybridConfig,
    pub subperiod_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            out_dir: PathBuf::from("regime-out"),
            seed: 0,
            synth: SynthConfig::default(),
            analysis: AnalysisConfig::default(),
            split: TrainSplit::default(),
            independent_test: Period::years(2019, 2024),
            n_indices: 7,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variables: SurfaceVar::ALL.to_vec(),
            seasons: vec![Season::Djf, Season::Jja],
            land_only: true,
            mare_max: 1.6,
            mare_step: 0.1,
            n_realizations: 50,
            hybrid: HybridConfig::default(),
            subperiod_threshold: 0.05,
        }
    }
}

fn bad(key: &str, value: &str, what: &str) -> PipelineError {
    PipelineError::BadConfig(format!("{key} = {value}: {what}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, "not a number"))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

fn year_month(key: &str, value: &str) -> Result<YearMonth> {
    value.parse().map_err(|_| bad(key, value, "expected YYYY-MM"))
}

/// `YYYY-MM..YYYY-MM`.
fn period(key: &str, value: &str) -> Result<Period> {
    let (a, b) = value.split_once("..").ok_or_else(|| bad(key, value, "expected YYYY-MM..YYYY-MM"))?;
    let p = Period::new(year_month(key, a.trim())?, year_month(key, b.trim())?);
    if p.start > p.end {
        return Err(bad(key, value, "empty period"));
    }
    Ok(p)
}

fn shape(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value.split_once('x').ok_or_else(|| bad(key, value, "expected LATxLON"))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn list<T>(key: &str, value: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|s| parse(s.trim()).ok_or_else(|| bad(key, value, "unknown list entry")))
        .collect()
}

fn surface_var(s: &str) -> Option<SurfaceVar> {
    match s {
        "t2m" => Some(SurfaceVar::T2m),
        "tp" => Some(SurfaceVar::Tp),
        _ => None,
    }
}

fn year_start(year: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year")
}

fn year_end(year: i32) -> NaiveDate {
    NaiveDate::from_ymd_opt(year, 12, 31).expect("valid year")
}

impl PipelineConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            "synth.start_year" => self.synth.start = year_start(num(key, v)?),
            "synth.end_year" => self.synth.end = year_end(num(key, v)?),
            "synth.source_grid" => self.synth.source_shape = shape(key, v)?,
            "synth.target_grid" => self.synth.target_shape = shape(key, v)?,
            "synth.k_true" => self.synth.k_true = num(key, v)?,
            "synth.persistence" => self.synth.persistence = num(key, v)?,
            "synth.ar_coef" => self.synth.ar_coef = num(key, v)?,
            "synth.circulation_noise" => self.synth.circulation_noise = num(key, v)?,
            "synth.surface_noise" => self.synth.surface_noise = num(key, v)?,
            "synth.trend" => self.synth.trend_per_year = num(key, v)?,
            "synth.response" => {
                self.synth.response = match v {
                    "linear" => Response::Linear,
                    "tanh" => Response::TanhMixture { alpha: 0.5, gamma: 1.0 },
                    _ => return Err(bad(key, v, "expected linear or tanh")),
                }
            }
            "climatology" => {
                let p = period(key, v)?;
                let c = ClimatologyPeriod::new(p.start.first_day(), p.end.add_months(1).first_day().pred_opt().expect("date"))?;
                self.analysis.climatology = c;
                self.synth.climatology = c;
            }
            "preprocess.window_days" => self.analysis.standardize.window_days = num(key, v)?,
            "preprocess.filter" => {
                self.analysis.standardize.filter = match v {
                    "none" => None,
                    w => {
                        let (a, b) = w.split_once(',').ok_or_else(|| bad(key, v, "expected WINDOW,ORDER or none"))?;
                        Some((num(key, a.trim())?, num(key, b.trim())?))
                    }
                }
            }
            "regimes.k" => self.analysis.regimes.k = num(key, v)?,
            "regimes.k_small" => self.analysis.k_small = num(key, v)?,
            "regimes.n_modes" => self.analysis.regimes.n_modes = num(key, v)?,
            "regimes.n_init" => self.analysis.regimes.n_init = num(key, v)?,
            "regimes.weighted" => self.analysis.regimes.weighted_eof = boolean(key, v)?,
            "split.train" => self.split.train = period(key, v)?,
            "split.validation" => self.split.validation = period(key, v)?,
            "split.test" => self.split.test = period(key, v)?,
            "split.independent_test" => self.independent_test = period(key, v)?,
            "model.n_indices" => self.n_indices = num(key, v)?,
            "model.hidden" => self.model.hidden = num(key, v)?,
            "model.embed_dim" => self.model.embed_dim = num(key, v)?,
            "model.kernel" => self.model.kernel = num(key, v)?,
            "model.channel_step" => {
                self.model.schedule = match v {
                    "half" => regime_model::ChannelSchedule::Halving,
                    s => regime_model::ChannelSchedule::Subtract(num(key, s)?),
                }
            }
            "model.enforce_budget" => {
                self.model.param_bounds = boolean(key, v)?.then_some((20_000, 40_000));
            }
            "train.learning_rate" => self.train.learning_rate = num(key, v)?,
            "train.batch_size" => {
                let b: usize = num(key, v)?;
                self.train.batch_size = (b > 0).then_some(b);
            }
            "train.patience" => self.train.patience = num(key, v)?,
            "train.max_epochs" => self.train.max_epochs = num(key, v)?,
            "train.n_seeds" => self.train.n_seeds = num(key, v)?,
            "train.land_only" => self.train.land_only = boolean(key, v)?,
            "variables" => self.variables = list(key, v, surface_var)?,
            "eval.seasons" => self.seasons = list(key, v, |s| s.parse().ok())?,
            "eval.land_only" => self.land_only = boolean(key, v)?,
            "perturb.mare_max" => self.mare_max = num(key, v)?,
            "perturb.mare_step" => self.mare_step = num(key, v)?,
            "perturb.n_realizations" => self.n_realizations = num(key, v)?,
            "hybrid.members" => self.hybrid.toy.n_members = num(key, v)?,
            "hybrid.leads" => self.hybrid.toy.n_leads = num(key, v)?,
            "hybrid.first_init" => self.hybrid.toy.first_init = year_month(key, v)?,
            "hybrid.last_init" => self.hybrid.toy.last_init = year_month(key, v)?,
            "hybrid.hindcast" => self.hybrid.hindcast = period(key, v)?,
            "hybrid.error_growth" => self.hybrid.toy.error_growth = num(key, v)?,
            "hybrid.surface_error" => self.hybrid.toy.surface_error = num(key, v)?,
            "hybrid.pooled_members" => self.hybrid.eqm.pooled_members = boolean(key, v)?,
            "subperiod.threshold" => self.subperiod_threshold = num(key, v)?,
            other => return Err(PipelineError::BadConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::BadConfig(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Propagates the master seed and checks cross-field consistency.
    pub fn finalize(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.analysis.regimes.seed = self.seed;
        self.train.seed = self.seed;
        self.hybrid.toy.seed = self.seed;
        self.synth.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        ModelConfig {
            n_indices: self.n_indices,
            ..self.model.clone()
        }
        .validate()?;
        let allowed = [0, 1, self.analysis.k_small, self.analysis.regimes.k];
        if !allowed.contains(&self.n_indices) {
            return Err(PipelineError::BadConfig(format!(
                "model.n_indices must be one of {allowed:?}, got {}",
                self.n_indices
            )));
        }
        if self.variables.is_empty() || self.seasons.is_empty() {
            return Err(PipelineError::BadConfig("variables and seasons must be non-empty".into()));
        }
        if !(self.mare_step > 0.0) || !(self.mare_max >= 0.0) || self.n_realizations == 0 {
            return Err(PipelineError::BadConfig("mare grid needs step > 0, max ≥ 0 and realizations".into()));
        }
        Ok(self)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("synth"))
    }

    pub fn toy_config(&self) -> ToyForecastConfig {
        self.hybrid.toy
    }
}

/// Hex sha256 of the canonical JSON form of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("serializable config");
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

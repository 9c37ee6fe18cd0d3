//! Stage commands with on-disk artifacts. Every stage directory holds a
//! `manifest.json` recording the stage config hash, the hashes of the
//! upstream stages it consumed, timings and the sha256 of every output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use ndarray::{Array2, Array4};
use regime_core::calibration::EnsembleIndices;
use regime_core::grid::{GridField, StaticStack};
use regime_core::indices::{monthly_index, nao_index, regime_indices, IndexSeries, NormMoments};
use regime_core::io::{read_grid_file, write_grid_file};
use regime_core::modes::{fit_regimes, RegimeConfig, RegimePatterns};
use regime_core::preprocess::{standardized_anomalies, CalendarClimatology};
use regime_core::synth::{gen_synthetic, SurfaceVar};
use regime_core::time::{TimeAxis, YearMonth};
use regime_model::checkpoint::{read_checkpoint, write_checkpoint};
use regime_model::train::write_history;
use regime_model::Ensemble;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{hash_bytes, hash_json, PipelineConfig};
use crate::error::{PipelineError, Result};
use crate::workflow::{
    calibrate_forecast, crossing_mare, evaluate, hybrid_skill, mare_levels, mare_sweep, subperiod_table,
    surface_targets, train_target, CalibratedForecast, HybridRow, MareRow, SkillRow, SubperiodRow, INDEX_CONFIGS,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Preprocess,
    Modes,
    Indices,
    Train(usize),
    Reconstruct(usize),
    Evaluate(usize),
    Calibrate,
    Ablation,
    MareSweep,
    Hybrid,
    Subperiod,
}

impl Stage {
    pub fn name(self) -> String {
        match self {
            Stage::Synth => "synth".into(),
            Stage::Preprocess => "preprocess".into(),
            Stage::Modes => "modes".into(),
            Stage::Indices => "indices".into(),
            Stage::Train(n) => format!("model k{n}"),
            Stage::Reconstruct(n) => format!("reconstruction k{n}"),
            Stage::Evaluate(n) => format!("evaluation k{n}"),
            Stage::Calibrate => "calibration".into(),
            Stage::Ablation => "ablate-indices".into(),
            Stage::MareSweep => "mare-sweep".into(),
            Stage::Hybrid => "hybrid-forecast".into(),
            Stage::Subperiod => "subperiod".into(),
        }
    }

    pub fn dir(self, cfg: &PipelineConfig) -> PathBuf {
        let out = &cfg.out_dir;
        match self {
            Stage::Synth => cfg.out_dir.join("synth"),
            Stage::Preprocess => out.join("preprocess"),
            Stage::Modes => out.join("modes"),
            Stage::Indices => out.join("indices"),
            Stage::Train(n) => out.join("train").join(format!("k{n}")),
            Stage::Reconstruct(n) => out.join("reconstruct").join(format!("k{n}")),
            Stage::Evaluate(n) => out.join("evaluate").join(format!("k{n}")),
            Stage::Calibrate => out.join("calibrate"),
            Stage::Ablation => out.join("experiments").join("ablation"),
            Stage::MareSweep => out.join("experiments").join("mare_sweep"),
            Stage::Hybrid => out.join("experiments").join("hybrid"),
            Stage::Subperiod => out.join("experiments").join("subperiod"),
        }
    }

    fn upstream(self, cfg: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::Synth => vec![],
            Stage::Preprocess if cfg.data_dir.is_some() => vec![],
            Stage::Preprocess => vec![Stage::Synth],
            Stage::Modes => vec![Stage::Preprocess],
            Stage::Indices | Stage::Calibrate => vec![Stage::Modes],
            Stage::Train(_) => vec![Stage::Indices],
            Stage::Reconstruct(n) => vec![Stage::Train(n)],
            Stage::Evaluate(n) => vec![Stage::Train(n), Stage::Reconstruct(n)],
            Stage::Ablation => INDEX_CONFIGS.iter().map(|n| Stage::Train(*n)).collect(),
            Stage::MareSweep => vec![Stage::Train(cfg.n_indices), Stage::Train(0)],
            Stage::Hybrid => vec![Stage::Calibrate, Stage::Train(cfg.n_indices)],
            Stage::Subperiod => vec![Stage::Train(cfg.n_indices)],
        }
    }

    /// Settings that influence the stage's own outputs.
    fn params(self, cfg: &PipelineConfig) -> Value {
        let a = &cfg.analysis;
        match self {
            Stage::Synth => json!(cfg.synth),
            Stage::Preprocess => json!({
                "data_dir": cfg.data_dir,
                "climatology": a.climatology,
                "standardize": a.standardize,
            }),
            Stage::Modes => json!({ "regimes": a.regimes, "k_small": a.k_small }),
            Stage::Indices => json!({}),
            Stage::Train(n) => json!({
                "n_indices": n,
                "model": cfg.model,
                "train": cfg.train,
                "split": cfg.split,
                "variables": cfg.variables,
            }),
            Stage::Reconstruct(_) => json!({ "test": cfg.split.test }),
            Stage::Evaluate(_) => json!({ "seasons": cfg.seasons, "land_only": cfg.land_only }),
            Stage::Calibrate => json!({ "synth": cfg.synth, "hybrid": cfg.hybrid }),
            Stage::Ablation => json!({ "seasons": cfg.seasons, "land_only": cfg.land_only, "test": cfg.split.test }),
            Stage::MareSweep => json!({
                "seasons": cfg.seasons,
                "land_only": cfg.land_only,
                "test": cfg.split.test,
                "mare_max": cfg.mare_max,
                "mare_step": cfg.mare_step,
                "n_realizations": cfg.n_realizations,
                "seed": cfg.seed,
            }),
            Stage::Hybrid => json!({ "seasons": cfg.seasons, "land_only": cfg.land_only, "test": cfg.split.test }),
            Stage::Subperiod => json!({
                "seasons": cfg.seasons,
                "land_only": cfg.land_only,
                "test": cfg.split.test,
                "independent": cfg.independent_test,
                "threshold": cfg.subperiod_threshold,
            }),
        }
    }

    /// Hash of the stage settings chained with the expected upstream hashes.
    pub fn config_hash(self, cfg: &PipelineConfig) -> String {
        let upstream: Vec<String> = self.upstream(cfg).into_iter().map(|u| u.config_hash(cfg)).collect();
        hash_json(&json!({ "stage": self.name(), "params": self.params(cfg), "upstream": upstream }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    /// Upstream stage name → config hash consumed.
    pub upstream: BTreeMap<String, String>,
    pub seed: u64,
    pub elapsed_ms: u128,
    /// Relative path → sha256 of the file contents.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST))
    }

    /// Recomputes the output hashes.
    pub fn verify_outputs(&self, dir: &Path) -> Result<()> {
        for (rel, want) in &self.outputs {
            let path = dir.join(rel);
            let bytes = fs::read(&path).map_err(|_| PipelineError::MissingArtifact(format!("{} ({})", self.stage, path.display())))?;
            if &hash_bytes(&bytes) != want {
                return Err(PipelineError::HashMismatch(format!("{} changed since {} wrote it", path.display(), self.stage)));
            }
        }
        Ok(())
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::BadConfig(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| PipelineError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value).expect("serializable"))
}

/// Checks that `stage`'s manifest exists and matches the current config,
/// recursively for its own upstream.
fn check_fresh(cfg: &PipelineConfig, stage: Stage) -> Result<Manifest> {
    let dir = stage.dir(cfg);
    if !dir.join(MANIFEST).exists() {
        return Err(PipelineError::MissingArtifact(stage.name()));
    }
    let m = Manifest::read(&dir)?;
    if m.config_hash != stage.config_hash(cfg) {
        return Err(PipelineError::HashMismatch(format!(
            "{} was produced with a different configuration; rerun it",
            stage.name()
        )));
    }
    for up in stage.upstream(cfg) {
        let um = check_fresh(cfg, up)?;
        if m.upstream.get(&up.name()) != Some(&um.config_hash) {
            return Err(PipelineError::HashMismatch(format!(
                "{} was built from a different {}",
                stage.name(),
                up.name()
            )));
        }
    }
    Ok(m)
}

/// Collects outputs of a running stage and writes its manifest.
struct StageRun {
    stage: Stage,
    dir: PathBuf,
    config_hash: String,
    upstream: BTreeMap<String, String>,
    seed: u64,
    started: Instant,
    outputs: Vec<String>,
    notes: Vec<String>,
}

impl StageRun {
    /// Verifies the upstream chain (including upstream output hashes) and
    /// clears the stage directory.
    fn start(cfg: &PipelineConfig, stage: Stage) -> Result<Self> {
        let mut upstream = BTreeMap::new();
        for up in stage.upstream(cfg) {
            let m = check_fresh(cfg, up)?;
            m.verify_outputs(&up.dir(cfg))?;
            upstream.insert(up.name(), m.config_hash);
        }
        let dir = stage.dir(cfg);
        if dir.join(MANIFEST).exists() {
            fs::remove_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        tracing::info!(stage = %stage.name(), dir = %dir.display(), "stage started");
        Ok(Self {
            stage,
            dir,
            config_hash: stage.config_hash(cfg),
            upstream,
            seed: cfg.seed,
            started: Instant::now(),
            outputs: Vec::new(),
            notes: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> PathBuf {
        self.outputs.push(rel.to_string());
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            let _ = fs::create_dir_all(parent);
        }
        p
    }

    fn grid(&mut self, rel: &str, field: &GridField) -> Result<()> {
        let p = self.path(rel);
        Ok(write_grid_file(field, p)?)
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel);
        write_json(&p, value)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        write_text(&p, text)
    }

    /// Index CSV plus its moments sidecar.
    fn indices(&mut self, rel: &str, series: &IndexSeries) -> Result<()> {
        let p = self.path(rel);
        self.outputs.push(format!("{rel}.json"));
        Ok(series.write_csv(p)?)
    }

    fn finish(self) -> Result<Manifest> {
        let mut outputs = BTreeMap::new();
        for rel in &self.outputs {
            let path = self.dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
            outputs.insert(rel.clone(), hash_bytes(&bytes));
        }
        let m = Manifest {
            stage: self.stage.name(),
            config_hash: self.config_hash,
            upstream: self.upstream,
            seed: self.seed,
            elapsed_ms: self.started.elapsed().as_millis(),
            outputs,
            notes: self.notes,
        };
        write_json(&self.dir.join(MANIFEST), &m)?;
        tracing::info!(stage = %m.stage, ms = m.elapsed_ms as u64, "stage finished");
        Ok(m)
    }
}

fn var_tag(var: SurfaceVar) -> String {
    var.variable().tag()
}

fn require(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact(format!("{what} ({})", path.display())))
    }
}

pub fn run_synth(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut run = StageRun::start(cfg, Stage::Synth)?;
    let data = gen_synthetic(&cfg.synth)?;
    data.write(&run.dir)?;
    for f in ["z500.grd", "t2m.grd", "tp.grd", "static.grd", "truth_patterns.grd", "truth_monthly_indices.csv", "truth_monthly_indices.csv.json", "truth.json"] {
        if run.dir.join(f).exists() {
            run.outputs.push(f.into());
        }
    }
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClimatologyMeta {
    period: regime_core::preprocess::ClimatologyPeriod,
    window_days: usize,
    norm: Option<Vec<f64>>,
}

pub fn run_preprocess(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut run = StageRun::start(cfg, Stage::Preprocess)?;
    let data = cfg.data_dir();
    let read = |name: &str| -> Result<GridField> { Ok(read_grid_file(require(data.join(name), name)?)?) };
    let z500 = read("z500.grd")?;
    let statics = StaticStack::from_field(&read("static.grd")?)?;
    let a = &cfg.analysis;
    let st = standardized_anomalies(&z500, a.climatology, &a.standardize)?;
    run.grid("z500_std.grd", &st.standardized)?;
    run.grid("z500_clim.grd", &st.climatology.to_field())?;
    run.json(
        "z500_clim.json",
        &ClimatologyMeta {
            period: st.climatology.period,
            window_days: st.climatology.window_days,
            norm: st.climatology.norm.clone(),
        },
    )?;
    for var in SurfaceVar::ALL {
        let tag = var_tag(var);
        let daily = read(&format!("{tag}.grd"))?;
        let (_, monthly) = surface_targets(&daily, a)?;
        run.grid(&format!("{tag}_monthly.grd"), &monthly)?;
    }
    run.grid("static.grd", &statics.to_field())?;
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatternMeta {
    names: Vec<String>,
    counts: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    dates: Vec<NaiveDate>,
}

fn write_patterns(run: &mut StageRun, stem: &str, p: &RegimePatterns) -> Result<()> {
    let field = GridField::new(
        p.grid.clone(),
        TimeAxis::Index(p.k()),
        p.patterns.clone(),
        regime_core::grid::Variable::Other("regime-patterns".into()),
        "1",
    )?;
    run.grid(&format!("{stem}.grd"), &field)?;
    run.json(
        &format!("{stem}.json"),
        &PatternMeta {
            names: p.names.clone(),
            counts: p.counts.clone(),
            centroids: p.centroids.outer_iter().map(|r| r.to_vec()).collect(),
            labels: p.labels.clone(),
            dates: p.dates.clone(),
        },
    )
}

fn read_patterns(dir: &Path, stem: &str) -> Result<RegimePatterns> {
    let field = read_grid_file(require(dir.join(format!("{stem}.grd")), "regime patterns")?)?;
    let meta: PatternMeta = read_json(&dir.join(format!("{stem}.json")))?;
    let k = meta.centroids.len();
    let m = meta.centroids.first().map_or(0, |r| r.len());
    let centroids = Array2::from_shape_vec((k, m), meta.centroids.concat())
        .map_err(|e| PipelineError::BadConfig(format!("centroids: {e}")))?;
    Ok(RegimePatterns {
        grid: field.grid,
        patterns: field.values,
        centroids,
        labels: meta.labels,
        dates: meta.dates,
        names: meta.names,
        counts: meta.counts,
    })
}

fn load_standardized(cfg: &PipelineConfig) -> Result<GridField> {
    Ok(read_grid_file(Stage::Preprocess.dir(cfg).join("z500_std.grd"))?)
}

fn load_climatology(cfg: &PipelineConfig) -> Result<CalendarClimatology> {
    let dir = Stage::Preprocess.dir(cfg);
    let field = read_grid_file(dir.join("z500_clim.grd"))?;
    let meta: ClimatologyMeta = read_json(&dir.join("z500_clim.json"))?;
    Ok(CalendarClimatology::from_parts(&field, meta.period, meta.window_days, meta.norm)?)
}

pub fn load_statics(cfg: &PipelineConfig) -> Result<StaticStack> {
    Ok(StaticStack::from_field(&read_grid_file(Stage::Preprocess.dir(cfg).join("static.grd"))?)?)
}

pub fn load_target(cfg: &PipelineConfig, var: SurfaceVar) -> Result<GridField> {
    Ok(read_grid_file(Stage::Preprocess.dir(cfg).join(format!("{}_monthly.grd", var_tag(var))))?)
}

fn small_regime_config(cfg: &PipelineConfig) -> RegimeConfig {
    RegimeConfig {
        k: cfg.analysis.k_small,
        names: None,
        ..cfg.analysis.regimes.clone()
    }
}

pub fn run_modes(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut run = StageRun::start(cfg, Stage::Modes)?;
    let std_anom = load_standardized(cfg)?;
    let clim = cfg.analysis.climatology;
    let (eof, regimes, km) = fit_regimes(&std_anom, clim, &cfg.analysis.regimes)?;
    let (_, small, _) = fit_regimes(&std_anom, clim, &small_regime_config(cfg))?;
    write_patterns(&mut run, &format!("regimes_k{}", regimes.k()), &regimes)?;
    write_patterns(&mut run, &format!("regimes_k{}", small.k()), &small)?;
    run.json(
        "eof.json",
        &json!({
            "n_modes": eof.n_modes(),
            "singular_values": eof.singular_values,
            "explained_variance_ratio": eof.explained_variance_ratio,
            "weighted": eof.weighted,
            "kmeans_inertia": km.inertia,
            "kmeans_restart": km.restart,
        }),
    )?;
    run.indices("nao_daily.csv", &nao_index(&eof, &std_anom)?)?;
    run.finish()
}

pub fn run_indices(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut run = StageRun::start(cfg, Stage::Indices)?;
    let std_anom = load_standardized(cfg)?;
    let modes = Stage::Modes.dir(cfg);
    let clim = cfg.analysis.climatology;
    for k in [cfg.analysis.regimes.k, cfg.analysis.k_small] {
        let patterns = read_patterns(&modes, &format!("regimes_k{k}"))?;
        let daily = regime_indices(&std_anom, &patterns, clim)?;
        run.indices(&format!("daily_k{k}.csv"), &daily)?;
        run.indices(&format!("monthly_k{k}.csv"), &monthly_index(&daily)?)?;
    }
    let nao = IndexSeries::read_csv(modes.join("nao_daily.csv"))?;
    run.indices("monthly_k1.csv", &monthly_index(&nao)?)?;
    run.finish()
}

/// Monthly index set with `n` indices; `n = 0` gives an empty set on the
/// monthly axis of the full set.
pub fn load_indices(cfg: &PipelineConfig, n: usize) -> Result<IndexSeries> {
    let dir = Stage::Indices.dir(cfg);
    if n == 0 {
        let full = IndexSeries::read_csv(dir.join(format!("monthly_k{}.csv", cfg.analysis.regimes.k)))?;
        return Ok(IndexSeries::empty(full.times));
    }
    Ok(IndexSeries::read_csv(require(dir.join(format!("monthly_k{n}.csv")), "indices")?)?)
}

fn check_index_count(cfg: &PipelineConfig, n: usize) -> Result<()> {
    let allowed = [0, 1, cfg.analysis.k_small, cfg.analysis.regimes.k];
    if allowed.contains(&n) {
        Ok(())
    } else {
        Err(PipelineError::BadConfig(format!("no index set with {n} indices")))
    }
}

pub fn run_train(cfg: &PipelineConfig, n: usize) -> Result<Manifest> {
    check_index_count(cfg, n)?;
    let mut run = StageRun::start(cfg, Stage::Train(n))?;
    let indices = load_indices(cfg, n)?;
    let statics = load_statics(cfg)?;
    for var in &cfg.variables {
        let tag = var_tag(*var);
        let target = load_target(cfg, *var)?;
        let out = train_target(&indices, &target, &statics, &cfg.split, &cfg.model, &cfg.train)?;
        for (seed, e) in &out.failures {
            let note = format!("{tag}: seed {seed} dropped: {e}");
            tracing::warn!("{note}");
            run.notes.push(note);
        }
        for r in &out.runs {
            let s = r.model.meta.seed_index;
            let p = run.path(&format!("{tag}/seed_{s}.rcm"));
            write_checkpoint(&r.model, p)?;
            let p = run.path(&format!("{tag}/history_seed_{s}.csv"));
            write_history(p, &r.history)?;
        }
        let params = out.runs[0].model.n_params();
        run.notes.push(format!("{tag}: {} seeds, {params} parameters each", out.runs.len()));
    }
    run.finish()
}

/// Seed ensemble of one variable from a fresh training stage.
pub fn load_ensemble(cfg: &PipelineConfig, n: usize, var: SurfaceVar) -> Result<Ensemble> {
    let stage = Stage::Train(n);
    let m = check_fresh(cfg, stage).map_err(|e| match e {
        PipelineError::MissingArtifact(_) => PipelineError::MissingArtifact(format!("model ({})", stage.dir(cfg).display())),
        e => e,
    })?;
    let dir = stage.dir(cfg);
    let prefix = format!("{}/", var_tag(var));
    let models = m
        .outputs
        .keys()
        .filter(|k| k.starts_with(&prefix) && k.ends_with(".rcm"))
        .map(|k| read_checkpoint(dir.join(k)))
        .collect::<regime_model::Result<Vec<_>>>()?;
    if models.is_empty() {
        return Err(PipelineError::MissingArtifact(format!("model for {}", var_tag(var))));
    }
    Ok(Ensemble::new(models)?)
}

pub fn run_reconstruct(cfg: &PipelineConfig, n: usize) -> Result<Manifest> {
    let mut run = StageRun::start(cfg, Stage::Reconstruct(n))?;
    let indices = load_indices(cfg, n)?;
    let statics = load_statics(cfg)?;
    for var in &cfg.variables {
        let ens = load_ensemble(cfg, n, *var)?;
        let target = load_target(cfg, *var)?;
        let rec = crate::workflow::reconstruct_period(&ens, &indices, &cfg.split.test, &statics, &target)?;
        if rec.values.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Numerical(format!("non-finite reconstruction of {}", var_tag(*var))));
        }
        run.grid(&format!("{}.grd", var_tag(*var)), &rec)?;
    }
    run.finish()
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn skill_csv(rows: &[(usize, SkillRow)]) -> String {
    let mut s = String::from("variable,season,n_indices,mae,acc,ce,mae_unc,acc_unc,ce_unc\n");
    for (n, r) in rows {
        s.push_str(&format!(
            "{},{},{n},{},{},{},{},{},{}\n",
            r.variable,
            r.season,
            fmt(r.mae),
            fmt(r.acc),
            fmt(r.ce),
            fmt(r.mae_unc),
            fmt(r.acc_unc),
            fmt(r.ce_unc)
        ));
    }
    s
}

fn skill_rows(cfg: &PipelineConfig, n: usize, period: &regime_model::train::Period) -> Result<Vec<SkillRow>> {
    let indices = load_indices(cfg, n)?;
    let statics = load_statics(cfg)?;
    let mut rows = Vec::new();
    for var in &cfg.variables {
        let ens = load_ensemble(cfg, n, *var)?;
        let target = load_target(cfg, *var)?;
        rows.extend(evaluate(&ens, &indices, &target, &statics, period, &cfg.seasons, cfg.land_only, &format!("k{n}"))?);
    }
    Ok(rows)
}

pub fn run_evaluate(cfg: &PipelineConfig, n: usize) -> Result<Manifest> {
    let mut run = StageRun::start(cfg, Stage::Evaluate(n))?;
    let rows = skill_rows(cfg, n, &cfg.split.test)?;
    if rows.iter().any(|r| !r.acc.is_finite() || !r.mae.is_finite()) {
        return Err(PipelineError::Numerical("non-finite skill medians".into()));
    }
    let tagged: Vec<_> = rows.into_iter().map(|r| (n, r)).collect();
    run.text("skill_summary.csv", &skill_csv(&tagged))?;
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MemberIndicesFile {
    inits: Vec<YearMonth>,
    names: Vec<String>,
    /// (member, lead, init, k)
    shape: [usize; 4],
    values: Vec<f64>,
    moments: NormMoments,
}

fn write_calibrated(run: &mut StageRun, cal: &CalibratedForecast) -> Result<()> {
    let idx = &cal.indices;
    let sh = idx.values.shape();
    run.json(
        "member_indices.json",
        &MemberIndicesFile {
            inits: idx.inits.clone(),
            names: idx.names.clone(),
            shape: [sh[0], sh[1], sh[2], sh[3]],
            values: idx.values.iter().copied().collect(),
            moments: idx.moments.clone(),
        },
    )?;
    for (var, leads) in &cal.raw_mean {
        for (l, f) in leads.iter().enumerate() {
            run.grid(&format!("{}_mean_lead_{}.grd", var_tag(*var), l + 1), f)?;
        }
    }
    Ok(())
}

pub fn load_calibrated(cfg: &PipelineConfig) -> Result<CalibratedForecast> {
    let dir = Stage::Calibrate.dir(cfg);
    let f: MemberIndicesFile = read_json(&require(dir.join("member_indices.json"), "calibrated forecast")?)?;
    let values = Array4::from_shape_vec(f.shape, f.values)
        .map_err(|e| PipelineError::BadConfig(format!("member indices: {e}")))?;
    let n_leads = f.shape[1];
    let indices = EnsembleIndices {
        inits: f.inits,
        names: f.names,
        values,
        moments: f.moments,
    };
    let mut raw_mean = Vec::new();
    for var in SurfaceVar::ALL {
        let leads = (1..=n_leads)
            .map(|l| Ok(read_grid_file(dir.join(format!("{}_mean_lead_{l}.grd", var_tag(var))))?))
            .collect::<Result<Vec<_>>>()?;
        raw_mean.push((var, leads));
    }
    Ok(CalibratedForecast { indices, raw_mean })
}

pub fn run_calibrate(cfg: &PipelineConfig) -> Result<Manifest> {
    if cfg.data_dir.is_some() {
        return Err(PipelineError::BadConfig(
            "calibration runs on the toy forecast and needs the synthetic data source".into(),
        ));
    }
    let mut run = StageRun::start(cfg, Stage::Calibrate)?;
    let data = gen_synthetic(&cfg.synth)?;
    let clim = load_climatology(cfg)?;
    let k = cfg.analysis.regimes.k;
    let regimes = read_patterns(&Stage::Modes.dir(cfg), &format!("regimes_k{k}"))?;
    let std_anom = load_standardized(cfg)?;
    let daily = regime_indices(&std_anom, &regimes, cfg.analysis.climatology)?;
    let t2m = load_target(cfg, SurfaceVar::T2m)?;
    let tp = load_target(cfg, SurfaceVar::Tp)?;
    let cal = calibrate_forecast(&data, &clim, &regimes, &daily, [&t2m, &tp], &cfg.hybrid)?;
    write_calibrated(&mut run, &cal)?;
    run.finish()
}

pub fn run_ablation(cfg: &PipelineConfig) -> Result<Manifest> {
    for n in INDEX_CONFIGS {
        if check_fresh(cfg, Stage::Train(n)).is_err() {
            run_train(cfg, n)?;
        }
    }
    let mut run = StageRun::start(cfg, Stage::Ablation)?;
    let mut rows = Vec::new();
    for n in INDEX_CONFIGS {
        rows.extend(skill_rows(cfg, n, &cfg.split.test)?.into_iter().map(|r| (n, r)));
    }
    run.text("ablation.csv", &skill_csv(&rows))?;
    run.finish()
}

pub fn mare_csv(rows: &[MareRow]) -> String {
    let mut s = String::from("variable,season,mare,mae,acc,ce,baseline_ce\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variable,
            r.season,
            fmt(r.mare),
            fmt(r.mae),
            fmt(r.acc),
            fmt(r.ce),
            r.baseline_ce.map(fmt).unwrap_or_default()
        ));
    }
    s
}

pub fn run_mare_sweep(cfg: &PipelineConfig) -> Result<Manifest> {
    let n = cfg.n_indices;
    if n == 0 {
        return Err(PipelineError::BadConfig("the index-error sweep needs model.n_indices > 0".into()));
    }
    let mut run = StageRun::start(cfg, Stage::MareSweep)?;
    let indices = load_indices(cfg, n)?;
    let empty = load_indices(cfg, 0)?;
    let statics = load_statics(cfg)?;
    let levels = mare_levels(cfg.mare_max, cfg.mare_step);
    let mut rows = Vec::new();
    for var in &cfg.variables {
        let ens = load_ensemble(cfg, n, *var)?;
        let base = load_ensemble(cfg, 0, *var)?;
        let target = load_target(cfg, *var)?;
        rows.extend(mare_sweep(
            &ens,
            &indices,
            &target,
            &statics,
            &cfg.split.test,
            &cfg.seasons,
            &levels,
            cfg.n_realizations,
            cfg.seed,
            cfg.land_only,
            Some((&base, &empty)),
        )?);
    }
    run.text("mare_sweep.csv", &mare_csv(&rows))?;
    let mut crossing = String::from("variable,season,crossing_mare\n");
    for var in &cfg.variables {
        for s in &cfg.seasons {
            let tag = var_tag(*var);
            let c = crossing_mare(&rows, &tag, *s).map(fmt).unwrap_or_else(|| "none".into());
            crossing.push_str(&format!("{tag},{s},{c}\n"));
        }
    }
    run.text("crossing.csv", &crossing)?;
    run.finish()
}

pub fn hybrid_csv(rows: &[HybridRow]) -> String {
    let mut s = String::from("system,variable,season,lead,mae,acc,ce\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.system,
            r.variable,
            r.season,
            r.lead,
            fmt(r.mae),
            fmt(r.acc),
            fmt(r.ce)
        ));
    }
    s
}

pub fn run_hybrid(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut run = StageRun::start(cfg, Stage::Hybrid)?;
    let cal = load_calibrated(cfg)?;
    let statics = load_statics(cfg)?;
    let t2m = load_target(cfg, SurfaceVar::T2m)?;
    let tp = load_target(cfg, SurfaceVar::Tp)?;
    let ensembles = cfg
        .variables
        .iter()
        .map(|v| Ok((*v, load_ensemble(cfg, cfg.n_indices, *v)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = hybrid_skill(&cal, &ensembles, [&t2m, &tp], &statics, &cfg.split.test, &cfg.seasons, cfg.land_only)?;
    run.text("hybrid.csv", &hybrid_csv(&rows))?;
    run.finish()
}

pub fn subperiod_csv(rows: &[SubperiodRow]) -> String {
    let mut s = String::from("variable,season,metric,difference,flagged\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variable,
            r.season,
            r.metric.tag(),
            regime_core::verification::format_diff(r.difference),
            r.flagged
        ));
    }
    s
}

pub fn run_subperiod(cfg: &PipelineConfig) -> Result<Manifest> {
    let mut run = StageRun::start(cfg, Stage::Subperiod)?;
    let n = cfg.n_indices;
    let full = skill_rows(cfg, n, &cfg.split.test)?;
    let independent = skill_rows(cfg, n, &cfg.independent_test)?;
    let rows = subperiod_table(&full, &independent, cfg.subperiod_threshold)?;
    run.text("subperiod.csv", &subperiod_csv(&rows))?;
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_chains_through_upstream() {
        let cfg = PipelineConfig::default();
        let mut other = cfg.clone();
        other.analysis.standardize.window_days = 11;
        assert_eq!(Stage::Synth.config_hash(&cfg), Stage::Synth.config_hash(&other));
        for s in [Stage::Preprocess, Stage::Modes, Stage::Indices, Stage::Train(7), Stage::Evaluate(7)] {
            assert_ne!(s.config_hash(&cfg), s.config_hash(&other), "{}", s.name());
        }
        let mut seasons = cfg.clone();
        seasons.seasons = vec![regime_core::time::Season::All];
        assert_eq!(Stage::Train(7).config_hash(&cfg), Stage::Train(7).config_hash(&seasons));
        assert_ne!(Stage::Evaluate(7).config_hash(&cfg), Stage::Evaluate(7).config_hash(&seasons));
        assert_ne!(Stage::Train(7).config_hash(&cfg), Stage::Train(4).config_hash(&cfg));
    }

    #[test]
    fn missing_and_stale_manifests_are_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            out_dir: tmp.path().to_path_buf(),
            ..PipelineConfig::default()
        };
        let err = load_ensemble(&cfg, 7, SurfaceVar::T2m).unwrap_err();
        assert_eq!(err.to_string(), format!("missing artifact: model ({})", Stage::Train(7).dir(&cfg).display()));
        assert_eq!(err.exit_code(), 3);

        let mut run = StageRun::start(&cfg, Stage::Synth).unwrap();
        run.text("a.txt", "hello").unwrap();
        let m = run.finish().unwrap();
        assert_eq!(m.outputs["a.txt"], hash_bytes(b"hello"));
        check_fresh(&cfg, Stage::Synth).unwrap();
        let mut changed = cfg.clone();
        changed.synth.k_true = 5;
        let err = check_fresh(&changed, Stage::Synth).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        fs::write(tmp.path().join("synth/a.txt"), "tampered").unwrap();
        assert!(matches!(m.verify_outputs(&Stage::Synth.dir(&cfg)), Err(PipelineError::HashMismatch(_))));
    }

    #[test]
    fn csv_rows_are_stable() {
        let row = SkillRow {
            variable: "t2m".into(),
            season: regime_core::time::Season::Djf,
            label: "k7".into(),
            mae: 0.5,
            acc: 0.25,
            ce: 0.125,
            mae_unc: 0.0,
            acc_unc: 1.0,
            ce_unc: 2.0,
        };
        let csv = skill_csv(&[(7, row)]);
        assert_eq!(csv.lines().nth(1).unwrap(), "t2m,DJF,7,0.5,0.25,0.125,0,1,2");
    }
}

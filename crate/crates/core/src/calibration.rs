//! Empirical quantile mapping of ensemble forecasts, standardized forecast
//! anomalies and projection of forecast members onto regime patterns.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, Array5, ArrayView2, Axis as NdAxis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{area_weights, Grid, GridField, Variable};
use crate::indices::{IndexSeries, NormMoments};
use crate::io::{read_grid_file, write_grid_file};
use crate::modes::RegimePatterns;
use crate::preprocess::CalendarClimatology;
use crate::time::{TimeAxis, YearMonth};

/// Type-7 empirical quantile of an ascending sample.
pub fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Equally spaced levels `0, 1/(n-1), ..., 1`.
pub fn uniform_levels(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Paired model/reference quantiles of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    pub levels: Vec<f64>,
    pub model: Vec<f64>,
    pub reference: Vec<f64>,
}

impl QuantileMap {
    /// Piecewise-linear between knots; beyond the outermost knots the edge
    /// offset is carried on unchanged.
    pub fn apply(&self, x: f64) -> f64 {
        let q = &self.model;
        let r = &self.reference;
        let n = q.len();
        if x < q[0] {
            return x + (r[0] - q[0]);
        }
        // last knot not above x
        let i = q.partition_point(|v| *v <= x) - 1;
        if i == n - 1 {
            return x + (r[n - 1] - q[n - 1]);
        }
        let t = (x - q[i]) / (q[i + 1] - q[i]);
        r[i] + t * (r[i + 1] - r[i])
    }
}

/// Quantile map from `hindcast` to `reference` at `n_levels` equally spaced levels.
pub fn eqm_fit(hindcast: &[f64], reference: &[f64], n_levels: usize) -> Result<QuantileMap> {
    if n_levels == 0 || hindcast.len() < n_levels || reference.len() < n_levels {
        return Err(Error::InsufficientSamples(format!(
            "{} hindcast / {} reference values for {n_levels} quantile levels",
            hindcast.len(),
            reference.len()
        )));
    }
    if hindcast.iter().chain(reference).any(|v| !v.is_finite()) {
        return Err(Error::InvalidField("non-finite calibration sample".into()));
    }
    let mut h = hindcast.to_vec();
    let mut r = reference.to_vec();
    h.sort_by(f64::total_cmp);
    r.sort_by(f64::total_cmp);
    let levels = uniform_levels(n_levels);
    Ok(QuantileMap {
        model: levels.iter().map(|p| empirical_quantile(&h, *p)).collect(),
        reference: levels.iter().map(|p| empirical_quantile(&r, *p)).collect(),
        levels,
    })
}

pub fn eqm_apply(map: &QuantileMap, values: &[f64]) -> Vec<f64> {
    values.iter().map(|x| map.apply(*x)).collect()
}

/// Monthly ensemble forecasts: `values[member, lead, init, lat, lon]` is the
/// forecast for month `inits[init] + lead`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub grid: Grid,
    pub variable: Variable,
    pub units: String,
    pub inits: Vec<YearMonth>,
    pub values: Array5<f64>,
}

pub const DEFAULT_MEMBERS: usize = 25;
pub const DEFAULT_LEADS: usize = 7;

impl EnsembleForecast {
    pub fn new(
        grid: Grid,
        variable: Variable,
        units: impl Into<String>,
        inits: Vec<YearMonth>,
        values: Array5<f64>,
    ) -> Result<Self> {
        let (nlat, nlon) = grid.shape();
        let sh = values.shape();
        if sh[2] != inits.len() || sh[3] != nlat || sh[4] != nlon || sh[0] == 0 || sh[1] == 0 {
            return Err(Error::DimensionMismatch(format!(
                "ensemble {:?} vs {} inits on {}x{}",
                sh,
                inits.len(),
                nlat,
                nlon
            )));
        }
        if !inits.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidField("init months not increasing".into()));
        }
        Ok(Self {
            grid,
            variable,
            units: units.into(),
            inits,
            values,
        })
    }

    pub fn n_members(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_leads(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn target(&self, init: usize, lead: usize) -> YearMonth {
        self.inits[init].add_months(lead as i32)
    }

    pub fn targets(&self, lead: usize) -> Vec<YearMonth> {
        (0..self.inits.len()).map(|i| self.target(i, lead)).collect()
    }

    /// One member at one lead as a monthly field over the target months.
    pub fn member_field(&self, member: usize, lead: usize) -> GridField {
        let v = self.values.slice(s![member, lead, .., .., ..]).to_owned();
        GridField::new(
            self.grid.clone(),
            TimeAxis::Monthly(self.targets(lead)),
            v,
            self.variable.clone(),
            self.units.clone(),
        )
        .expect("consistent ensemble")
    }

    /// Forecasts whose init month satisfies `keep`.
    pub fn select_inits(&self, keep: impl Fn(YearMonth) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.inits.len()).filter(|i| keep(self.inits[*i])).collect();
        Self::new(
            self.grid.clone(),
            self.variable.clone(),
            self.units.clone(),
            idx.iter().map(|i| self.inits[*i]).collect(),
            self.values.select(NdAxis(2), &idx),
        )
    }

    /// Mean over members: `(lead, init, lat, lon)`.
    pub fn ensemble_mean(&self) -> Array4<f64> {
        self.values.mean_axis(NdAxis(0)).expect("at least one member")
    }

    /// Ensemble-mean field at one lead over the target months.
    pub fn mean_field(&self, lead: usize) -> GridField {
        let v = self.values.slice(s![.., lead, .., .., ..]).mean_axis(NdAxis(0)).expect("members");
        GridField::new(
            self.grid.clone(),
            TimeAxis::Monthly(self.targets(lead)),
            v,
            self.variable.clone(),
            self.units.clone(),
        )
        .expect("consistent ensemble")
    }

    /// One GRD1 file per member and lead plus `manifest.json`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for m in 0..self.n_members() {
            for l in 0..self.n_leads() {
                let name = format!("member_{m:02}_lead_{l}.grd");
                write_grid_file(&self.member_field(m, l), dir.join(&name))?;
                files.push(name);
            }
        }
        let manifest = EnsembleFileManifest {
            n_members: self.n_members(),
            n_leads: self.n_leads(),
            inits: self.inits.iter().map(|m| m.to_string()).collect(),
            files,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))
            .map_err(|e| Error::io(&path, e))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let man: EnsembleFileManifest =
            serde_json::from_str(&text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let inits: Vec<YearMonth> = man.inits.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        if man.files.len() != man.n_members * man.n_leads {
            return Err(Error::MalformedHeader("ensemble manifest file count".into()));
        }
        let mut out: Option<(Grid, Variable, String, Array5<f64>)> = None;
        for m in 0..man.n_members {
            for l in 0..man.n_leads {
                let f = read_grid_file(dir.join(&man.files[m * man.n_leads + l]))?;
                let (nlat, nlon) = f.grid.shape();
                let (_, _, _, values) = out.get_or_insert_with(|| {
                    (
                        f.grid.clone(),
                        f.variable.clone(),
                        f.units.clone(),
                        Array5::zeros((man.n_members, man.n_leads, inits.len(), nlat, nlon)),
                    )
                });
                if f.values.dim() != (inits.len(), nlat, nlon) || values.shape()[3..] != [nlat, nlon] {
                    return Err(Error::DimensionMismatch(format!("member {m} lead {l}")));
                }
                values.slice_mut(s![m, l, .., .., ..]).assign(&f.values);
            }
        }
        let (grid, variable, units, values) =
            out.ok_or_else(|| Error::MalformedHeader("empty ensemble".into()))?;
        Self::new(grid, variable, units, inits, values)
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleFileManifest {
    n_members: usize,
    n_leads: usize,
    inits: Vec<String>,
    files: Vec<String>,
}

/// Settings for [`fit_ensemble_eqm`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqmConfig {
    /// Upper bound on quantile levels; samples shorter than this use one
    /// level per sample.
    pub max_levels: usize,
    /// Separate maps per calendar month of the target.
    pub per_month: bool,
    /// One map for all members instead of one per member.
    pub pooled_members: bool,
}

impl Default for EqmConfig {
    fn default() -> Self {
        Self {
            max_levels: 101,
            per_month: true,
            pooled_members: false,
        }
    }
}

/// Quantile maps per (member, lead, calendar month, gridpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEqm {
    pub cfg: EqmConfig,
    pub n_members: usize,
    pub n_leads: usize,
    pub shape: (usize, usize),
    maps: Vec<QuantileMap>,
}

impl EnsembleEqm {
    fn n_months(&self) -> usize {
        if self.cfg.per_month {
            12
        } else {
            1
        }
    }

    fn slot(&self, member: usize, lead: usize, month: u32, point: usize) -> usize {
        let m = if self.cfg.pooled_members { 0 } else { member };
        let c = if self.cfg.per_month { month as usize - 1 } else { 0 };
        let fit_members = if self.cfg.pooled_members { 1 } else { self.n_members };
        debug_assert!(m < fit_members);
        ((m * self.n_leads + lead) * self.n_months() + c) * (self.shape.0 * self.shape.1) + point
    }

    pub fn map(&self, member: usize, lead: usize, month: u32, point: usize) -> &QuantileMap {
        &self.maps[self.slot(member, lead, month, point)]
    }

    /// Corrects every member, lead and gridpoint of `fc`.
    pub fn apply(&self, fc: &EnsembleForecast) -> Result<EnsembleForecast> {
        let (nm, nl) = (fc.n_members(), fc.n_leads());
        if nl != self.n_leads || fc.grid.shape() != self.shape || (!self.cfg.pooled_members && nm != self.n_members) {
            return Err(Error::DimensionMismatch("forecast does not match calibration".into()));
        }
        let (nlat, nlon) = self.shape;
        let mut out = fc.values.clone();
        out.axis_iter_mut(NdAxis(0))
            .enumerate()
            .for_each(|(m, mut member)| {
                for l in 0..nl {
                    for i in 0..fc.inits.len() {
                        let month = fc.target(i, l).month;
                        for a in 0..nlat {
                            for b in 0..nlon {
                                let v = &mut member[[l, i, a, b]];
                                *v = self.map(m, l, month, a * nlon + b).apply(*v);
                            }
                        }
                    }
                }
            });
        EnsembleForecast::new(fc.grid.clone(), fc.variable.clone(), fc.units.clone(), fc.inits.clone(), out)
    }

    /// Binary persistence: JSON header line (`EQM1`), then per map a
    /// little-endian `u32` knot count and the model and reference knots as `f64`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        let header = EqmHeader {
            magic: "EQM1".into(),
            cfg: self.cfg,
            n_members: self.n_members,
            n_leads: self.n_leads,
            nlat: self.shape.0,
            nlon: self.shape.1,
            n_maps: self.maps.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable")).map_err(io)?;
        for m in &self.maps {
            w.write_all(&(m.model.len() as u32).to_le_bytes()).map_err(io)?;
            for v in m.model.iter().chain(&m.reference) {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("no header line".into()))?;
        let header: EqmHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.magic != "EQM1" {
            return Err(Error::BadMagic { found: header.magic });
        }
        let mut pos = nl + 1;
        let mut take = |n: usize| -> Result<&[u8]> {
            let out = bytes.get(pos..pos + n).ok_or(Error::TruncatedPayload {
                expected: pos + n,
                found: bytes.len(),
            })?;
            pos += n;
            Ok(out)
        };
        let mut maps = Vec::with_capacity(header.n_maps);
        for _ in 0..header.n_maps {
            let n = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let raw = take(16 * n)?;
            let vals: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            maps.push(QuantileMap {
                levels: uniform_levels(n),
                model: vals[..n].to_vec(),
                reference: vals[n..].to_vec(),
            });
        }
        Ok(Self {
            cfg: header.cfg,
            n_members: header.n_members,
            n_leads: header.n_leads,
            shape: (header.nlat, header.nlon),
            maps,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EqmHeader {
    magic: String,
    cfg: EqmConfig,
    n_members: usize,
    n_leads: usize,
    nlat: usize,
    nlon: usize,
    n_maps: usize,
}

/// Fits quantile maps of `hindcast` against the monthly `reference` at the
/// same target months, separately for every member, lead, calendar month
/// and gridpoint (members pooled on request).
pub fn fit_ensemble_eqm(
    hindcast: &EnsembleForecast,
    reference: &GridField,
    cfg: &EqmConfig,
) -> Result<EnsembleEqm> {
    if reference.grid.shape() != hindcast.grid.shape() {
        return Err(Error::DimensionMismatch("reference grid".into()));
    }
    let months = reference
        .times
        .monthly()
        .ok_or_else(|| Error::InvalidField("reference must be monthly".into()))?;
    let find = |ym: YearMonth| {
        months
            .binary_search(&ym)
            .map_err(|_| Error::PeriodNotCovered(format!("reference lacks {ym}")))
    };
    let (nm, nl) = (hindcast.n_members(), hindcast.n_leads());
    let (nlat, nlon) = hindcast.grid.shape();
    let npts = nlat * nlon;
    let fit_members = if cfg.pooled_members { 1 } else { nm };
    let n_months = if cfg.per_month { 12 } else { 1 };
    // reference row of every (lead, init)
    let rows: Vec<Vec<usize>> = (0..nl)
        .map(|l| (0..hindcast.inits.len()).map(|i| find(hindcast.target(i, l))).collect())
        .collect::<Result<_>>()?;
    let groups: Vec<(usize, usize, usize)> = (0..fit_members)
        .flat_map(|m| (0..nl).flat_map(move |l| (0..n_months).map(move |c| (m, l, c))))
        .collect();
    let fitted: Vec<Vec<QuantileMap>> = groups
        .par_iter()
        .map(|&(m, l, c)| {
            let inits: Vec<usize> = (0..hindcast.inits.len())
                .filter(|i| !cfg.per_month || hindcast.target(*i, l).month as usize == c + 1)
                .collect();
            let members: Vec<usize> = if cfg.pooled_members { (0..nm).collect() } else { vec![m] };
            (0..npts)
                .map(|p| {
                    let (a, b) = (p / nlon, p % nlon);
                    let h: Vec<f64> = members
                        .iter()
                        .flat_map(|mm| inits.iter().map(move |i| hindcast.values[[*mm, l, *i, a, b]]))
                        .collect();
                    let r: Vec<f64> = inits.iter().map(|i| reference.values[[rows[l][*i], a, b]]).collect();
                    let n = cfg.max_levels.min(h.len()).min(r.len());
                    eqm_fit(&h, &r, n)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(EnsembleEqm {
        cfg: *cfg,
        n_members: nm,
        n_leads: nl,
        shape: (nlat, nlon),
        maps: fitted.into_iter().flatten().collect(),
    })
}

/// `(x − monthly climatology) / monthly normalization` for every forecast
/// month, using the calendar-day climatology averaged over the month.
pub fn forecast_monthly_anomalies(fc: &EnsembleForecast, clim: &CalendarClimatology) -> Result<EnsembleForecast> {
    if fc.grid.shape() != clim.grid.shape() {
        return Err(Error::DimensionMismatch("climatology grid".into()));
    }
    if fc.variable.base() != clim.variable.base() {
        return Err(Error::VariableMismatch {
            expected: clim.variable.tag(),
            found: fc.variable.tag(),
        });
    }
    let means: Vec<Array2<f64>> = (1..=12).map(|m| clim.monthly_mean(m)).collect();
    let norms: Vec<f64> = (1..=12).map(|m| clim.monthly_norm(m)).collect::<Result<_>>()?;
    let mut out = fc.values.clone();
    for l in 0..fc.n_leads() {
        for i in 0..fc.inits.len() {
            let c = fc.target(i, l).month as usize - 1;
            let mut slab = out.slice_mut(s![.., l, i, .., ..]);
            for mut member in slab.outer_iter_mut() {
                member -= &means[c];
                member /= norms[c];
            }
        }
    }
    EnsembleForecast::new(fc.grid.clone(), fc.variable.anomaly(), "1", fc.inits.clone(), out)
}

/// Normalized regime indices of every forecast member: `(member, lead, init, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleIndices {
    pub inits: Vec<YearMonth>,
    pub names: Vec<String>,
    pub values: Array4<f64>,
    pub moments: NormMoments,
}

impl EnsembleIndices {
    pub fn n_members(&self) -> usize {
        self.values.shape()[0]
    }

    /// One member at one lead as a monthly series over the target months.
    pub fn member_series(&self, member: usize, lead: usize) -> IndexSeries {
        let times = TimeAxis::Monthly(self.inits.iter().map(|m| m.add_months(lead as i32)).collect());
        let mut s = IndexSeries::new(times, self.values.slice(s![member, lead, .., ..]).to_owned(), self.names.clone())
            .expect("consistent indices");
        s.moments = Some(self.moments.clone());
        s
    }
}

/// Weighted projection of standardized forecast anomalies onto `patterns`,
/// normalized with the reanalysis moments carried by `reference`.
pub fn ensemble_index_projection(
    anoms: &EnsembleForecast,
    patterns: &RegimePatterns,
    reference: &IndexSeries,
) -> Result<EnsembleIndices> {
    let moments = reference.moments.as_ref().ok_or(Error::MissingMoments)?;
    if moments.mean.len() != patterns.k() {
        return Err(Error::KMismatch(moments.mean.len(), patterns.k()));
    }
    if anoms.grid.shape() != patterns.grid.shape() {
        return Err(Error::DimensionMismatch("forecast and pattern grids differ".into()));
    }
    let w = area_weights(&anoms.grid);
    let wsum = w.sum();
    let npts = anoms.grid.size();
    let k = patterns.k();
    let mut wp = Array2::<f64>::zeros((npts, k));
    for r in 0..k {
        let col = (&patterns.pattern(r) * &w).into_shape_with_order(npts).expect("flat") / wsum;
        wp.column_mut(r).assign(&col);
    }
    let sh = anoms.values.shape();
    let (nm, nl, ni) = (sh[0], sh[1], sh[2]);
    let flat: ArrayView2<f64> = anoms
        .values
        .view()
        .into_shape_with_order((nm * nl * ni, npts))
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    let mut raw = flat.dot(&wp);
    for (j, mut col) in raw.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|p| (p - moments.mean[j]) / moments.std[j]);
    }
    Ok(EnsembleIndices {
        inits: anoms.inits.clone(),
        names: patterns.names.clone(),
        values: raw.into_shape_with_order((nm, nl, ni, k)).expect("shape"),
        moments: moments.clone(),
    })
}

/// Arithmetic mean over the leading (member) axis.
pub fn ensemble_mean(members: &Array3<f64>) -> Result<Array2<f64>> {
    members
        .mean_axis(NdAxis(0))
        .ok_or_else(|| Error::InsufficientSamples("no members".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, Domain};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(empirical_quantile(&v, 0.0), 1.0);
        assert_eq!(empirical_quantile(&v, 1.0), 4.0);
        assert_eq!(empirical_quantile(&v, 0.5), 2.5);
        assert!((empirical_quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>() * 4.0 - 1.0 + rng.random::<f64>().powi(3)).collect()
    }

    #[test]
    fn identical_distributions_give_identity() {
        let x = sample(301, 1);
        let m = eqm_fit(&x, &x, 101).unwrap();
        for v in [-0.9, 0.0, 0.37, 2.5, 10.0, -7.0] {
            assert!((m.apply(v) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_and_scale_are_removed() {
        let r = sample(1001, 2);
        let shifted: Vec<f64> = r.iter().map(|v| v + 5.0).collect();
        let m = eqm_fit(&shifted, &r, 101).unwrap();
        for v in [4.5, 5.0, 6.3] {
            assert!((m.apply(v) - (v - 5.0)).abs() < 1e-9);
        }
        let scaled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let m = eqm_fit(&scaled, &r, 101).unwrap();
        for v in [-1.0, 0.4, 3.0] {
            assert!((m.apply(v) - v / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn knots_and_extrapolation() {
        let m = QuantileMap {
            levels: uniform_levels(3),
            model: vec![0.0, 1.0, 2.0],
            reference: vec![10.0, 20.0, 40.0],
        };
        assert_eq!(m.apply(1.0), 20.0);
        assert_eq!(m.apply(1.5), 30.0);
        assert_eq!(m.apply(-1.0), 9.0);
        assert_eq!(m.apply(3.0), 41.0);
        assert!(matches!(eqm_fit(&[1.0, 2.0], &[1.0, 2.0, 3.0], 3), Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn ties_in_model_quantiles_stay_monotone() {
        let m = eqm_fit(&[1.0, 1.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0, 4.0], 5).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..400 {
            let y = m.apply(-1.0 + i as f64 * 0.0125);
            assert!(y >= prev);
            prev = y;
        }
    }

    fn tiny_grid() -> Grid {
        Grid::new(Axis::new(40.0, 5.0, 2), Axis::new(0.0, 5.0, 2), Domain::Europe).unwrap()
    }

    fn ensemble(values: Array5<f64>, start: YearMonth) -> EnsembleForecast {
        let n = values.shape()[2];
        let inits = YearMonth::range(start, start.add_months(n as i32 - 1));
        EnsembleForecast::new(tiny_grid(), Variable::Z500, "m", inits, values).unwrap()
    }

    #[test]
    fn ensemble_eqm_removes_bias_per_member() {
        let start = YearMonth::new(1990, 1).unwrap();
        let n = 120;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let obs_vals = Array3::from_shape_fn((n + 2, 2, 2), |_| rng.random::<f64>());
        let times = TimeAxis::monthly_range(start, start.add_months(n as i32 + 1));
        let obs = GridField::new(tiny_grid(), times, obs_vals.clone(), Variable::Z500, "m").unwrap();
        // member m is biased by +m and scaled by 2 at lead 1
        let fc_vals = Array5::from_shape_fn((3, 2, n, 2, 2), |(m, l, i, a, b)| {
            let o = obs_vals[[i + l, a, b]];
            if l == 0 { o + m as f64 } else { 2.0 * o + m as f64 }
        });
        let fc = ensemble(fc_vals, start);
        let cal = fit_ensemble_eqm(&fc, &obs, &EqmConfig::default()).unwrap();
        // ten Januaries per member and lead
        assert_eq!(cal.map(0, 0, 1, 0).model.len(), 10);
        let out = cal.apply(&fc).unwrap();
        for m in 0..3 {
            for l in 0..2 {
                for i in 0..n {
                    assert!((out.values[[m, l, i, 1, 0]] - obs_vals[[i + l, 1, 0]]).abs() < 1e-9);
                }
            }
        }
        let pooled = fit_ensemble_eqm(&fc, &obs, &EqmConfig { pooled_members: true, ..Default::default() }).unwrap();
        assert_eq!(pooled.map(2, 0, 1, 0).model.len(), 10);
        let dir = tempfile::tempdir().unwrap();
        cal.write(dir.path().join("eqm.bin")).unwrap();
        assert_eq!(EnsembleEqm::read(dir.path().join("eqm.bin")).unwrap(), cal);
        fc.write_dir(dir.path().join("fc")).unwrap();
        let back = EnsembleForecast::read_dir(dir.path().join("fc")).unwrap();
        assert_eq!(back.inits, fc.inits);
        assert!((&back.values - &fc.values).iter().all(|d| d.abs() < 1e-5 * 4.0));
    }

    #[test]
    fn member_mean() {
        let f = array![[1.0, -2.0], [0.5, 4.0]];
        let one = f.clone().insert_axis(NdAxis(0));
        assert_eq!(ensemble_mean(&one).unwrap(), f);
        let pm = ndarray::stack(NdAxis(0), &[f.view(), (-&f).view()]).unwrap();
        assert!(ensemble_mean(&pm).unwrap().iter().all(|v| *v == 0.0));
    }
}

//! EOF decomposition and k-means clustering of standardized anomalies.

use chrono::NaiveDate;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis as NdAxis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::grid::{area_weights, Grid, GridField};
use crate::preprocess::ClimatologyPeriod;

/// Leading empirical orthogonal functions of a field.
///
/// `modes` are orthonormal in the (optionally √cos φ-weighted) data space;
/// [`EofBasis::pattern`] undoes the weighting for display.
#[derive(Debug, Clone)]
pub struct EofBasis {
    pub grid: Grid,
    /// (n_modes, space)
    pub modes: Array2<f64>,
    /// (time, n_modes) over the analysis period.
    pub pcs: Array2<f64>,
    pub dates: Vec<NaiveDate>,
    pub singular_values: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    /// Time mean over the analysis period, unweighted.
    pub mean: Array1<f64>,
    pub sqrt_weights: Array1<f64>,
    pub weighted: bool,
}

impl EofBasis {
    pub fn n_modes(&self) -> usize {
        self.modes.nrows()
    }

    fn to_analysis_space(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut x = &data - &self.mean.view().insert_axis(NdAxis(0));
        x *= &self.sqrt_weights.view().insert_axis(NdAxis(0));
        x
    }

    /// Principal components of arbitrary days (centred with the period mean).
    pub fn project(&self, field: &GridField) -> Result<Array2<f64>> {
        if field.grid.shape() != self.grid.shape() {
            return Err(Error::DimensionMismatch("EOF grid".into()));
        }
        let x = self.to_analysis_space(field.as_matrix());
        Ok(x.dot(&self.modes.t()))
    }

    /// Centred, unweighted data rebuilt from principal components.
    pub fn reconstruct(&self, pcs: ArrayView2<f64>) -> Array2<f64> {
        let mut x = pcs.dot(&self.modes);
        x.zip_mut_with(&self.sqrt_weights.view().insert_axis(NdAxis(0)).broadcast(x.raw_dim()).unwrap(), |v, w| {
            *v = if *w > 0.0 { *v / w } else { 0.0 };
        });
        x
    }

    /// Mode `i` as a (lat, lon) map in physical (unweighted) units.
    pub fn pattern(&self, i: usize) -> Array2<f64> {
        let m = &self.modes.row(i);
        let flat: Array1<f64> = m
            .iter()
            .zip(self.sqrt_weights.iter())
            .map(|(v, w)| if *w > 0.0 { v / w } else { 0.0 })
            .collect();
        flat.into_shape_with_order(self.grid.shape()).expect("grid shape")
    }
}

/// EOFs of `std_anom` over the days of `period`, from the eigen-decomposition
/// of the smaller Gram matrix of the centred (and optionally √cos φ-weighted)
/// data matrix, i.e. its singular value decomposition.
///
/// Each mode's largest-magnitude component is made positive.
pub fn eof_decompose(
    std_anom: &GridField,
    period: ClimatologyPeriod,
    n_modes: usize,
    weighted: bool,
) -> Result<EofBasis> {
    let dates_all = std_anom
        .times
        .daily()
        .ok_or_else(|| Error::InvalidField("EOF needs a daily field".into()))?;
    let subset = std_anom.select_times(|t| period.contains(dates_all[t]))?;
    let dates = subset.times.daily().expect("daily").to_vec();
    let data = subset.as_matrix();
    let (t, s) = data.dim();
    let max = t.min(s);
    if n_modes > max || n_modes == 0 {
        return Err(Error::TooManyModes {
            requested: n_modes,
            max,
        });
    }
    let mean = data.mean_axis(NdAxis(0)).expect("non-empty");
    let sqrt_weights = if weighted {
        area_weights(&subset.grid)
            .into_shape_with_order(s)
            .expect("flat")
            .mapv(f64::sqrt)
    } else {
        Array1::ones(s)
    };
    let mut x = &data - &mean.view().insert_axis(NdAxis(0));
    x *= &sqrt_weights.view().insert_axis(NdAxis(0));

    let (lambdas, modes) = if s <= t {
        let gram = x.t().dot(&x);
        let (lam, vecs) = sorted_eigen(&gram);
        let modes = Array2::from_shape_fn((n_modes, s), |(i, j)| vecs[(j, i)]);
        (lam, modes)
    } else {
        let gram = x.dot(&x.t());
        let (lam, vecs) = sorted_eigen(&gram);
        let mut modes = Array2::<f64>::zeros((n_modes, s));
        let tiny = lam[0].max(0.0) * 1e-13;
        for i in 0..n_modes {
            if lam[i] > tiny {
                let u = Array1::from_shape_fn(t, |r| vecs[(r, i)]);
                let v = x.t().dot(&u) / lam[i].sqrt();
                modes.row_mut(i).assign(&v);
            } else {
                let v = complete_basis(modes.slice(s![..i, ..]), s);
                modes.row_mut(i).assign(&v);
            }
        }
        (lam, modes)
    };
    let total: f64 = lambdas.iter().map(|l| l.max(0.0)).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all-zero anomalies".into()));
    }
    let mut modes = modes;
    for mut m in modes.rows_mut() {
        let pivot = m
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            m.mapv_inplace(|v| -v);
        }
    }
    let pcs = x.dot(&modes.t());
    let explained_variance_ratio = lambdas[..n_modes].iter().map(|l| l.max(0.0) / total).collect();
    let singular_values = lambdas[..n_modes].iter().map(|l| l.max(0.0).sqrt()).collect();
    Ok(EofBasis {
        grid: subset.grid.clone(),
        modes,
        pcs,
        dates,
        singular_values,
        explained_variance_ratio,
        mean,
        sqrt_weights,
        weighted,
    })
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
fn sorted_eigen(a: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let lam = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (lam, vecs)
}

/// A unit vector orthogonal to the rows of `basis`.
fn complete_basis(basis: ArrayView2<f64>, s: usize) -> Array1<f64> {
    for j in 0..s {
        let mut v = Array1::<f64>::zeros(s);
        v[j] = 1.0;
        for _ in 0..2 {
            for b in basis.rows() {
                let d = b.dot(&v);
                v.scaled_add(-d, &b);
            }
        }
        let n = v.dot(&v).sqrt();
        if n > 1e-6 {
            return v / n;
        }
    }
    unreachable!("basis cannot span the whole space when rank-deficient")
}

/// k-means settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            n_init: 50,
            max_iter: 500,
            tol: 1e-8,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// (k, dim)
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub n_iter: usize,
    pub restart: usize,
    /// Inertia after each assignment step of the winning restart.
    pub history: Vec<f64>,
    /// Number of empty-cluster repairs performed by the winning restart.
    pub repairs: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; the lowest index wins ties.
fn nearest(p: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, m) = points.dim();
    let mut centroids = Array2::zeros((k, m));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(pick)));
        }
    }
    centroids
}

fn lloyd(points: ArrayView2<f64>, cfg: &KMeansConfig, restart: usize) -> KMeansResult {
    let (n, m) = points.dim();
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(restart as u64);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut repairs = 0;
    let mut n_iter = 0;
    loop {
        n_iter += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.rows().into_iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // Empty clusters take the point farthest from its centroid.
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !taken[i] && counts[labels[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                debug!(cluster = c, point = i, "empty-cluster repair");
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                taken[i] = true;
                dists[i] = 0.0;
                centroids.row_mut(c).assign(&points.row(i));
                repairs += 1;
                changed = true;
            }
        }
        history.push(dists.iter().sum());
        if (!changed && n_iter > 1) || n_iter >= cfg.max_iter {
            break;
        }
        let mut next = Array2::<f64>::zeros((k, m));
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = next.row_mut(labels[i]);
            row += &p;
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = next.row_mut(c);
                row /= counts[c] as f64;
            } else {
                next.row_mut(c).assign(&centroids.row(c));
            }
            shift = shift.max(sq_dist(next.row(c), centroids.row(c)).sqrt());
        }
        centroids = next;
        if shift < cfg.tol && !changed {
            break;
        }
    }
    let inertia = points
        .rows()
        .into_iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, centroids.row(l)))
        .sum();
    KMeansResult {
        centroids,
        labels,
        inertia,
        n_iter,
        restart,
        history,
        repairs,
    }
}

/// Lloyd's algorithm with k-means++ seeding; the best of `n_init` restarts
/// (by inertia, then restart index) is returned. Restart `r` draws from
/// stream `r` of a ChaCha generator keyed by `seed`.
pub fn kmeans(points: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = points.nrows();
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::TooManyClusters { k: cfg.k, n });
    }
    if cfg.n_init == 0 {
        return Err(Error::InvalidConfig("n_init must be positive".into()));
    }
    let runs: Vec<KMeansResult> = (0..cfg.n_init)
        .into_par_iter()
        .map(|r| lloyd(points, cfg, r))
        .collect();
    let best = runs
        .into_iter()
        .min_by(|a, b| a.inertia.total_cmp(&b.inertia).then(a.restart.cmp(&b.restart)))
        .expect("n_init > 0");
    Ok(best)
}

/// Cluster-mean standardized anomaly fields of the weather regimes.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePatterns {
    pub grid: Grid,
    /// (k, lat, lon)
    pub patterns: Array3<f64>,
    /// Cluster centres in PC space, same order as `patterns`.
    pub centroids: Array2<f64>,
    /// Cluster of each climatology day.
    pub labels: Vec<usize>,
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    pub counts: Vec<usize>,
}

impl RegimePatterns {
    pub fn k(&self) -> usize {
        self.patterns.shape()[0]
    }

    pub fn pattern(&self, i: usize) -> ArrayView2<'_, f64> {
        self.patterns.index_axis(NdAxis(0), i)
    }
}

/// Generic regime names `R1..Rk`.
pub fn generic_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("R{i}")).collect()
}

/// The seven year-round Euro-Atlantic regimes, for real-data runs.
pub const CANONICAL_NAMES: [&str; 7] = ["AT", "ZO", "ST", "AR", "EuBL", "ScBL", "GL"];

/// Per-cluster time mean of `std_anom` over the labelled days.
///
/// Clusters are reordered by size (descending, ties by original index) and
/// named in that order.
pub fn cluster_mean_fields(
    labels: &[usize],
    centroids: ArrayView2<f64>,
    std_anom_period: &GridField,
    names: Option<Vec<String>>,
) -> Result<RegimePatterns> {
    let k = centroids.nrows();
    if labels.len() != std_anom_period.n_times() {
        return Err(Error::LengthMismatch(labels.len(), std_anom_period.n_times()));
    }
    let mut counts = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::InvalidField(format!("label {l} out of range")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|c| *c == 0) {
        return Err(Error::EmptyCluster(c));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let (nlat, nlon) = std_anom_period.grid.shape();
    let mut patterns = Array3::<f64>::zeros((k, nlat, nlon));
    for (t, &l) in labels.iter().enumerate() {
        let mut p = patterns.index_axis_mut(NdAxis(0), rank[l]);
        p += &std_anom_period.slice(t);
    }
    for (new, &old) in order.iter().enumerate() {
        let mut p = patterns.index_axis_mut(NdAxis(0), new);
        p /= counts[old] as f64;
    }
    let names = match names {
        Some(n) if n.len() == k => n,
        Some(n) => return Err(Error::KMismatch(n.len(), k)),
        None => generic_names(k),
    };
    Ok(RegimePatterns {
        grid: std_anom_period.grid.clone(),
        patterns,
        centroids: centroids.select(NdAxis(0), &order),
        labels: labels.iter().map(|l| rank[*l]).collect(),
        dates: std_anom_period.times.daily().map(<[_]>::to_vec).unwrap_or_default(),
        names,
        counts: order.iter().map(|o| counts[*o]).collect(),
    })
}

/// Settings for [`fit_regimes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub n_modes: usize,
    pub k: usize,
    pub n_init: usize,
    pub seed: u64,
    pub weighted_eof: bool,
    pub names: Option<Vec<String>>,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            n_modes: 7,
            k: 7,
            n_init: 50,
            seed: 0,
            weighted_eof: true,
            names: None,
        }
    }
}

/// EOFs of the climatology period, k-means on their PCs, cluster means.
pub fn fit_regimes(
    std_anom: &GridField,
    period: ClimatologyPeriod,
    cfg: &RegimeConfig,
) -> Result<(EofBasis, RegimePatterns, KMeansResult)> {
    let eof = eof_decompose(std_anom, period, cfg.n_modes, cfg.weighted_eof)?;
    let km = kmeans(
        eof.pcs.view(),
        &KMeansConfig {
            n_init: cfg.n_init,
            ..KMeansConfig::new(cfg.k, cfg.seed)
        },
    )?;
    let dates = std_anom.times.daily().expect("daily");
    let subset = std_anom.select_times(|t| period.contains(dates[t]))?;
    let patterns = cluster_mean_fields(&km.labels, km.centroids.view(), &subset, cfg.names.clone())?;
    Ok((eof, patterns, km))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, Domain, Variable};
    use crate::time::TimeAxis;
    use ndarray::array;

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn field_from(values: Array3<f64>) -> GridField {
        let (nt, nlat, nlon) = values.dim();
        let grid = Grid::new(Axis::new(0.0, 1.0, nlat), Axis::new(0.0, 1.0, nlon), Domain::Custom("t".into())).unwrap();
        let start = ymd(2001, 1, 1);
        let times = TimeAxis::Daily((0..nt as u64).map(|i| start + chrono::Days::new(i)).collect());
        GridField::new(grid, times, values, Variable::Z500, "1").unwrap()
    }

    fn period_for(nt: usize) -> ClimatologyPeriod {
        ClimatologyPeriod {
            start: ymd(2001, 1, 1),
            end: ymd(2001, 1, 1) + chrono::Days::new(nt as u64 - 1),
        }
    }

    #[test]
    fn rank_one_field() {
        let p = array![[1.0, -2.0], [0.5, 3.0]];
        let a: Vec<f64> = (0..40).map(|t| (t as f64 * 0.7).sin() * 2.0 + 0.3).collect();
        let values = Array3::from_shape_fn((40, 2, 2), |(t, i, j)| a[t] * p[[i, j]]);
        let eof = eof_decompose(&field_from(values), period_for(40), 1, false).unwrap();
        assert!((eof.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        let norm = (p.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let cos: f64 = eof.modes.row(0).iter().zip(p.iter()).map(|(m, q)| m * q / norm).sum();
        assert!((cos.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_many_modes() {
        let values = Array3::from_shape_fn((3, 2, 5), |(t, i, j)| (t + i * j) as f64);
        assert!(matches!(
            eof_decompose(&field_from(values), period_for(3), 4, false),
            Err(Error::TooManyModes { .. })
        ));
    }

    #[test]
    fn zero_input_is_degenerate() {
        let values = Array3::zeros((5, 2, 2));
        assert!(matches!(eof_decompose(&field_from(values), period_for(5), 1, false), Err(Error::Degenerate(_))));
    }

    #[test]
    fn wide_matrix_path_matches_tall_path() {
        // more gridpoints than days exercises the Gram-matrix branch
        let values = Array3::from_shape_fn((6, 3, 4), |(t, i, j)| ((t * 7 + i * 3 + j * 5) % 11) as f64 - 5.0 + (t as f64).cos());
        let eof = eof_decompose(&field_from(values.clone()), period_for(6), 6, true).unwrap();
        let gram = eof.modes.dot(&eof.modes.t());
        for i in 0..6 {
            for j in 0..6 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - target).abs() < 1e-8, "{i} {j} {}", gram[[i, j]]);
            }
        }
        let centered = field_from(values).as_matrix().to_owned() - &eof.mean.view().insert_axis(NdAxis(0));
        let rec = eof.reconstruct(eof.pcs.view());
        let err = (&rec - &centered).mapv(|v| v * v).sum().sqrt() / centered.mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-6);
    }

    #[test]
    fn kmeans_exact_fit_when_k_equals_n() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [5.0, 5.0]];
        let r = kmeans(pts.view(), &KMeansConfig::new(4, 3)).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut l = r.labels.clone();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_identical_points_repairs_empty_cluster() {
        let pts = Array2::from_elem((6, 2), 1.5);
        let r = kmeans(pts.view(), &KMeansConfig::new(2, 1)).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.labels.contains(&0) && r.labels.contains(&1));
        assert!(r.repairs >= 1);
    }

    #[test]
    fn kmeans_rejects_k_above_n() {
        let pts = Array2::zeros((2, 1));
        assert!(matches!(kmeans(pts.view(), &KMeansConfig::new(3, 0)), Err(Error::TooManyClusters { .. })));
    }

    #[test]
    fn kmeans_is_deterministic_and_monotone() {
        let pts = Array2::from_shape_fn((200, 3), |(i, j)| (((i * 37 + j * 11) % 29) as f64).sin() * (1 + i % 4) as f64);
        let cfg = KMeansConfig { n_init: 8, ..KMeansConfig::new(4, 42) };
        let a = kmeans(pts.view(), &cfg).unwrap();
        let b = kmeans(pts.view(), &cfg).unwrap();
        assert_eq!(a, b);
        for w in a.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        for (i, p) in pts.rows().into_iter().enumerate() {
            assert_eq!(nearest(p, &a.centroids).0, a.labels[i]);
        }
    }

    #[test]
    fn cluster_means_and_ordering() {
        let p = array![[1.0, -1.0], [2.0, 0.5]];
        let values = Array3::from_shape_fn((5, 2, 2), |(t, i, j)| if t < 2 { -p[[i, j]] } else { p[[i, j]] });
        let f = field_from(values);
        let labels = vec![0, 0, 1, 1, 1];
        let cents = array![[-1.0], [1.0]];
        let r = cluster_mean_fields(&labels, cents.view(), &f, None).unwrap();
        // the larger cluster (+P) comes first
        assert_eq!(r.counts, vec![3, 2]);
        assert_eq!(r.pattern(0), p.view());
        assert_eq!(r.pattern(1), (-&p).view());
        assert_eq!(r.labels, vec![1, 1, 0, 0, 0]);
        assert_eq!(r.names, vec!["R1", "R2"]);
        let single = cluster_mean_fields(&[0; 5], array![[0.0]].view(), &f, None).unwrap();
        let mean = f.values.mean_axis(NdAxis(0)).unwrap();
        assert!((&single.pattern(0) - &mean).iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(
            cluster_mean_fields(&[0; 5], cents.view(), &f, None),
            Err(Error::EmptyCluster(1))
        ));
    }
}

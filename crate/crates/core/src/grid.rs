//! Regular lat/lon grids, gridded fields and area weighting.

use ndarray::{Array2, Array3, ArrayView2, Axis as NdAxis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::TimeAxis;

const SPACING_TOL: f64 = 1e-9;

/// A regular coordinate axis `start + i * step`, `i < count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(start: f64, step: f64, count: usize) -> Self {
        Self { start, step, count }
    }

    /// Cell-centred axis spanning `[lo, hi]` with `count` cells.
    pub fn cells(lo: f64, hi: f64, count: usize) -> Self {
        let step = (hi - lo) / count as f64;
        Self::new(lo + step / 2.0, step, count)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.start + i as f64 * self.step).collect()
    }

    pub fn last(&self) -> f64 {
        self.start + (self.count.saturating_sub(1)) as f64 * self.step
    }

    /// Builds an axis from explicit coordinates, checking uniform spacing.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        match values {
            [] => Err(Error::InvalidGrid("empty axis".into())),
            [v] => Ok(Self::new(*v, 1.0, 1)),
            [a, b, ..] => {
                let step = b - a;
                let axis = Self::new(*a, step, values.len());
                for (i, v) in values.iter().enumerate() {
                    if (axis.start + i as f64 * step - v).abs() > SPACING_TOL {
                        return Err(Error::InvalidGrid("non-uniform spacing".into()));
                    }
                }
                Ok(axis)
            }
        }
    }
}

/// Named analysis domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    /// 80°W–40°E, 30–90°N.
    EuroAtlantic,
    /// 20°W–40°E, 30–70°N.
    Europe,
    Custom(String),
}

impl Domain {
    /// (lon_min, lon_max, lat_min, lat_max)
    pub fn bbox(&self) -> Option<(f64, f64, f64, f64)> {
        match self {
            Domain::EuroAtlantic => Some((-80.0, 40.0, 30.0, 90.0)),
            Domain::Europe => Some((-20.0, 40.0, 30.0, 70.0)),
            Domain::Custom(_) => None,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Domain::EuroAtlantic => "euro-atlantic",
            Domain::Europe => "europe",
            Domain::Custom(s) => s,
        }
    }
}

/// A regular lat/lon grid with ascending coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lat: Axis,
    pub lon: Axis,
    pub domain: Domain,
}

impl Grid {
    pub fn new(lat: Axis, lon: Axis, domain: Domain) -> Result<Self> {
        for (name, ax) in [("lat", &lat), ("lon", &lon)] {
            if ax.count == 0 {
                return Err(Error::InvalidGrid(format!("{name} axis is empty")));
            }
            if ax.count > 1 && !(ax.step > 0.0) {
                return Err(Error::InvalidGrid(format!("{name} axis not ascending")));
            }
        }
        if lat.start < -90.0 - SPACING_TOL || lat.last() > 90.0 + SPACING_TOL {
            return Err(Error::InvalidGrid("latitude outside [-90, 90]".into()));
        }
        Ok(Self { lat, lon, domain })
    }

    /// Cell-centred grid covering a named domain.
    pub fn for_domain(domain: Domain, n_lat: usize, n_lon: usize) -> Result<Self> {
        let (lon0, lon1, lat0, lat1) = domain
            .bbox()
            .ok_or_else(|| Error::InvalidGrid("custom domain has no bbox".into()))?;
        Self::new(Axis::cells(lat0, lat1, n_lat), Axis::cells(lon0, lon1, n_lon), domain)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.lat.count, self.lon.count)
    }

    pub fn size(&self) -> usize {
        self.lat.count * self.lon.count
    }

    pub fn lats(&self) -> Vec<f64> {
        self.lat.values()
    }

    pub fn lons(&self) -> Vec<f64> {
        self.lon.values()
    }

    /// True when a latitude row sits on a pole (its area weight is zero).
    pub fn has_pole_row(&self) -> bool {
        self.lats().iter().any(|l| (l.abs() - 90.0).abs() < SPACING_TOL)
    }
}

/// Cosine-of-latitude weights broadcast over longitudes.
///
/// A pole row gets weight zero; use [`Grid::has_pole_row`] to detect it.
pub fn area_weights(grid: &Grid) -> Array2<f64> {
    let (nlat, nlon) = grid.shape();
    let lats = grid.lats();
    Array2::from_shape_fn((nlat, nlon), |(i, _)| {
        let w = lats[i].to_radians().cos();
        if (lats[i].abs() - 90.0).abs() < SPACING_TOL {
            0.0
        } else {
            w.max(0.0)
        }
    })
}

/// `Σ w·f / Σ w` over points where the mask is set (and the value is finite).
pub fn weighted_spatial_mean(
    field: ArrayView2<f64>,
    weights: ArrayView2<f64>,
    mask: Option<ArrayView2<bool>>,
) -> Result<f64> {
    if field.shape() != weights.shape() {
        return Err(Error::DimensionMismatch(format!(
            "field {:?} vs weights {:?}",
            field.shape(),
            weights.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != field.shape() {
            return Err(Error::DimensionMismatch("mask shape".into()));
        }
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((idx, f), w) in field.indexed_iter().zip(weights.iter()) {
        if mask.map_or(true, |m| m[idx]) && f.is_finite() {
            num += w * f;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(Error::EmptyDomain);
    }
    Ok(num / den)
}

/// Marks sea points (mask fraction below one half) as missing (NaN).
pub fn apply_land_mask(skill_map: ArrayView2<f64>, land_fraction: ArrayView2<f64>) -> Array2<f64> {
    let land = land_points(land_fraction);
    apply_bool_mask(skill_map, land.view())
}

pub fn apply_bool_mask(map: ArrayView2<f64>, keep: ArrayView2<bool>) -> Array2<f64> {
    let mut out = map.to_owned();
    out.zip_mut_with(&keep, |v, &k| {
        if !k {
            *v = f64::NAN;
        }
    });
    out
}

/// Land points of a land-sea fraction layer.
pub fn land_points(land_fraction: ArrayView2<f64>) -> Array2<bool> {
    land_fraction.mapv(|f| f >= 0.5)
}

/// Physical variable carried by a field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variable {
    Z500,
    T2m,
    Tp,
    Anomaly(String),
    Other(String),
}

impl Variable {
    pub fn tag(&self) -> String {
        match self {
            Variable::Z500 => "z500".into(),
            Variable::T2m => "t2m".into(),
            Variable::Tp => "tp".into(),
            Variable::Anomaly(s) => format!("{s}-anom"),
            Variable::Other(s) => s.clone(),
        }
    }

    pub fn parse(tag: &str) -> Self {
        match tag {
            "z500" => Variable::Z500,
            "t2m" => Variable::T2m,
            "tp" => Variable::Tp,
            t => match t.strip_suffix("-anom") {
                Some(base) => Variable::Anomaly(base.into()),
                None => Variable::Other(t.into()),
            },
        }
    }

    /// Base variable, stripping the anomaly wrapper.
    pub fn base(&self) -> Variable {
        match self {
            Variable::Anomaly(s) => Variable::parse(s),
            v => v.clone(),
        }
    }

    pub fn anomaly(&self) -> Variable {
        match self {
            Variable::Anomaly(_) => self.clone(),
            v => Variable::Anomaly(v.tag()),
        }
    }
}

/// A (time × lat × lon) field of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: Grid,
    pub times: TimeAxis,
    pub values: Array3<f64>,
    pub variable: Variable,
    pub units: String,
    /// NaN entries are permitted (and mean "missing") only when set.
    pub missing: bool,
    /// Latitude order found on disk; fields are always ascending in memory.
    pub lat_descending_on_disk: bool,
}

impl GridField {
    pub fn new(
        grid: Grid,
        times: TimeAxis,
        values: Array3<f64>,
        variable: Variable,
        units: impl Into<String>,
    ) -> Result<Self> {
        let field = Self {
            grid,
            times,
            values,
            variable,
            units: units.into(),
            missing: false,
            lat_descending_on_disk: false,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn with_missing(mut self, missing: bool) -> Result<Self> {
        self.missing = missing;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (nlat, nlon) = self.grid.shape();
        let expected = [self.times.len(), nlat, nlon];
        if self.values.shape() != expected {
            return Err(Error::DimensionMismatch(format!(
                "values {:?} vs axes {:?}",
                self.values.shape(),
                expected
            )));
        }
        self.times.check_increasing()?;
        if !self.missing && self.values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidField("NaN without missing flag".into()));
        }
        Ok(())
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn slice(&self, t: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(NdAxis(0), t)
    }

    /// Same metadata with new values and times.
    pub fn with_values(&self, times: TimeAxis, values: Array3<f64>, variable: Variable) -> Result<Self> {
        let mut out = Self {
            grid: self.grid.clone(),
            times,
            values,
            variable,
            units: self.units.clone(),
            missing: self.missing,
            lat_descending_on_disk: self.lat_descending_on_disk,
        };
        out.missing = out.values.iter().any(|v| v.is_nan()) && self.missing;
        out.validate()?;
        Ok(out)
    }

    /// Restricts the field to time steps selected by `keep`.
    pub fn select_times(&self, keep: impl Fn(usize) -> bool) -> Result<Self> {
        let idx: Vec<usize> = (0..self.n_times()).filter(|&i| keep(i)).collect();
        let values = self.values.select(NdAxis(0), &idx);
        let times = match &self.times {
            TimeAxis::Daily(d) => TimeAxis::Daily(idx.iter().map(|&i| d[i]).collect()),
            TimeAxis::Monthly(m) => TimeAxis::Monthly(idx.iter().map(|&i| m[i]).collect()),
            TimeAxis::Index(_) => TimeAxis::Index(idx.len()),
        };
        self.with_values(times, values, self.variable.clone())
    }

    /// Values as a (time × space) matrix view when contiguous.
    pub fn as_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (nt, s) = (self.n_times(), self.grid.size());
        self.values
            .view()
            .into_shape_with_order((nt, s))
            .expect("standard layout")
    }
}

/// The four static layers stacked with the model embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticStack {
    pub grid: Grid,
    pub lat: Array2<f64>,
    pub lon: Array2<f64>,
    /// Land fraction in [0, 1].
    pub land_sea_mask: Array2<f64>,
    /// Standardized elevation.
    pub terrain: Array2<f64>,
}

impl StaticStack {
    /// Builds the stack; lat/lon layers are standardized over the domain and
    /// the terrain (metres) is standardized to zero mean and unit variance.
    pub fn new(grid: Grid, land_sea_mask: Array2<f64>, terrain_m: Array2<f64>) -> Result<Self> {
        let shape = grid.shape();
        if land_sea_mask.dim() != shape || terrain_m.dim() != shape {
            return Err(Error::DimensionMismatch("static layer shape".into()));
        }
        if land_sea_mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidField("land-sea mask outside [0, 1]".into()));
        }
        let lats = grid.lats();
        let lons = grid.lons();
        let lat = standardized(Array2::from_shape_fn(shape, |(i, _)| lats[i]));
        let lon = standardized(Array2::from_shape_fn(shape, |(_, j)| lons[j]));
        let terrain = standardized(terrain_m);
        Ok(Self {
            grid,
            lat,
            lon,
            land_sea_mask,
            terrain,
        })
    }

    /// Layers in model channel order: lat, lon, mask, terrain.
    pub fn layers(&self) -> [&Array2<f64>; 4] {
        [&self.lat, &self.lon, &self.land_sea_mask, &self.terrain]
    }

    pub fn land(&self) -> Array2<bool> {
        land_points(self.land_sea_mask.view())
    }

    /// Stack as a GridField with four positional "time" entries.
    pub fn to_field(&self) -> GridField {
        let (nlat, nlon) = self.grid.shape();
        let mut values = Array3::zeros((4, nlat, nlon));
        for (k, layer) in self.layers().into_iter().enumerate() {
            values.index_axis_mut(NdAxis(0), k).assign(layer);
        }
        GridField::new(
            self.grid.clone(),
            TimeAxis::Index(4),
            values,
            Variable::Other("static".into()),
            "1",
        )
        .expect("consistent static stack")
    }

    pub fn from_field(field: &GridField) -> Result<Self> {
        if field.n_times() != 4 {
            return Err(Error::DimensionMismatch("static stack needs 4 layers".into()));
        }
        let layer = |k: usize| field.values.index_axis(NdAxis(0), k).to_owned();
        let land_sea_mask = layer(2);
        if land_sea_mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidField("land-sea mask outside [0, 1]".into()));
        }
        Ok(Self {
            grid: field.grid.clone(),
            lat: layer(0),
            lon: layer(1),
            land_sea_mask,
            terrain: layer(3),
        })
    }
}

fn standardized(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    a.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 });
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn grid_with_lats(lats: &[f64]) -> Grid {
        Grid::new(
            Axis::from_values(lats).unwrap(),
            Axis::new(0.0, 10.0, 3),
            Domain::Custom("test".into()),
        )
        .unwrap()
    }

    #[test]
    fn cosine_weights() {
        let g = grid_with_lats(&[0.0, 45.0, 90.0]);
        let w = area_weights(&g);
        assert_eq!(w[[0, 0]], 1.0);
        // cos(pi/4), evaluated by hand
        assert!((w[[1, 2]] - 0.707_106_781_186_547_5).abs() < 1e-12);
        assert_eq!(w[[2, 1]], 0.0);
        assert!(g.has_pole_row());
        let g60 = grid_with_lats(&[60.0]);
        assert!((area_weights(&g60)[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weights_constant_along_rows() {
        let g = Grid::for_domain(Domain::EuroAtlantic, 16, 24).unwrap();
        let w = area_weights(&g);
        for row in w.rows() {
            assert!(row.iter().all(|v| *v == row[0] && *v > 0.0));
        }
        assert!(!g.has_pole_row());
    }

    #[test]
    fn weighted_mean_examples() {
        let f = array![[1.0, 3.0]];
        assert_eq!(weighted_spatial_mean(f.view(), array![[1.0, 1.0]].view(), None).unwrap(), 2.0);
        assert_eq!(weighted_spatial_mean(f.view(), array![[3.0, 1.0]].view(), None).unwrap(), 1.5);
        let c = Array2::from_elem((3, 4), 2.5);
        let w = Array2::from_shape_fn((3, 4), |(i, j)| 1.0 + i as f64 + 0.1 * j as f64);
        assert!((weighted_spatial_mean(c.view(), w.view(), None).unwrap() - 2.5).abs() < 1e-14);
        let none = Array2::from_elem((1, 2), false);
        assert!(matches!(
            weighted_spatial_mean(f.view(), array![[1.0, 1.0]].view(), Some(none.view())),
            Err(Error::EmptyDomain)
        ));
    }

    #[test]
    fn land_mask_cases() {
        let map = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f64);
        let all_land = Array2::from_elem((4, 4), 1.0);
        assert_eq!(apply_land_mask(map.view(), all_land.view()), map);
        let all_sea = Array2::zeros((4, 4));
        assert!(apply_land_mask(map.view(), all_sea.view()).iter().all(|v| v.is_nan()));
        let checker = Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 2) as f64);
        let masked = apply_land_mask(map.view(), checker.view());
        assert_eq!(masked.iter().filter(|v| v.is_nan()).count(), 8);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Axis::from_values(&[0.0, 1.0, 2.5]).is_err());
        assert!(Grid::new(Axis::new(80.0, 5.0, 4), Axis::new(0.0, 1.0, 2), Domain::Europe).is_err());
        assert!(Grid::new(Axis::new(10.0, -1.0, 4), Axis::new(0.0, 1.0, 2), Domain::Europe).is_err());
    }

    #[test]
    fn field_rejects_nan_without_flag() {
        let g = grid_with_lats(&[0.0, 10.0]);
        let mut v = Array3::zeros((1, 2, 3));
        v[[0, 1, 1]] = f64::NAN;
        let f = GridField::new(g.clone(), TimeAxis::Index(1), v.clone(), Variable::T2m, "K");
        assert!(f.is_err());
        let f = GridField {
            grid: g,
            times: TimeAxis::Index(1),
            values: v,
            variable: Variable::T2m,
            units: "K".into(),
            missing: true,
            lat_descending_on_disk: false,
        };
        assert!(f.validate().is_ok());
    }
}

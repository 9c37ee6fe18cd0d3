//! Calendar-day climatology, anomalies, low-pass filtering, standardization
//! and monthly aggregation of daily fields.
//!
//! Steps run in a fixed order: climatology, anomalies, Savitzky–Golay
//! filter, calendar-day normalization (from the filtered anomalies), division.

use chrono::{Datelike, NaiveDate};
use ndarray::{Array1, Array2, Array3, Axis as NdAxis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{area_weights, GridField, Variable};
use crate::savgol::SavitzkyGolay;
use crate::time::{calendar_distance, calendar_key, calendar_key_month, TimeAxis, YearMonth, CALENDAR_DAYS};

/// Reference period for climatologies and index moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClimatologyPeriod {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl Default for ClimatologyPeriod {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(1981, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2010, 12, 31).unwrap(),
        }
    }
}

impl ClimatologyPeriod {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Result<Self> {
        if start >= end {
            return Err(Error::InvalidPeriod(format!("{start} is not before {end}")));
        }
        // at least two full years
        let two_years = start
            .with_year(start.year() + 2)
            .unwrap_or_else(|| start + chrono::Days::new(730));
        if end + chrono::Days::new(1) < two_years {
            return Err(Error::InvalidPeriod("shorter than two years".into()));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        (self.start..=self.end).contains(&date)
    }

    pub fn contains_month(&self, ym: YearMonth) -> bool {
        ym >= YearMonth::of(self.start) && ym <= YearMonth::of(self.end)
    }

    pub fn n_days(&self) -> usize {
        (self.end - self.start).num_days() as usize + 1
    }

    fn check_covered(&self, dates: &[NaiveDate]) -> Result<()> {
        let inside = dates.iter().filter(|d| self.contains(**d)).count();
        if inside != self.n_days() {
            return Err(Error::PeriodNotCovered(format!(
                "{} of {} days between {} and {}",
                inside,
                self.n_days(),
                self.start,
                self.end
            )));
        }
        Ok(())
    }
}

/// Convention for standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StdConvention {
    /// Divide by N.
    #[default]
    Population,
    /// Divide by N - 1.
    Sample,
}

impl StdConvention {
    pub fn variance(self, sum_sq_dev: f64, n: usize) -> f64 {
        match self {
            StdConvention::Population => sum_sq_dev / n as f64,
            StdConvention::Sample => sum_sq_dev / (n.max(2) - 1) as f64,
        }
    }
}

/// Per-calendar-day mean field and, once computed, per-day normalization scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct CalendarClimatology {
    pub grid: crate::grid::Grid,
    pub variable: Variable,
    pub units: String,
    pub period: ClimatologyPeriod,
    pub window_days: usize,
    /// (366, lat, lon)
    pub mean: Array3<f64>,
    /// s_d for each of the 366 calendar days.
    pub norm: Option<Vec<f64>>,
}

impl CalendarClimatology {
    /// Mean field over the calendar days of `month` (leap-year calendar).
    pub fn monthly_mean(&self, month: u32) -> Array2<f64> {
        let keys: Vec<usize> = (0..CALENDAR_DAYS).filter(|k| calendar_key_month(*k) == month).collect();
        let mut acc = Array2::zeros(self.grid.shape());
        for k in &keys {
            acc += &self.mean.index_axis(NdAxis(0), *k);
        }
        acc / keys.len() as f64
    }

    /// Average normalization scalar over the calendar days of `month`.
    pub fn monthly_norm(&self, month: u32) -> Result<f64> {
        let norm = self.norm.as_ref().ok_or(Error::MissingCalendarDay(0))?;
        let vals: Vec<f64> = (0..CALENDAR_DAYS)
            .filter(|k| calendar_key_month(*k) == month)
            .map(|k| norm[k])
            .collect();
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean fields as a GRD1-ready field with 366 positional entries.
    pub fn to_field(&self) -> GridField {
        GridField::new(
            self.grid.clone(),
            TimeAxis::Index(CALENDAR_DAYS),
            self.mean.clone(),
            self.variable.clone(),
            self.units.clone(),
        )
        .expect("climatology shape")
    }

    pub fn from_parts(
        field: &GridField,
        period: ClimatologyPeriod,
        window_days: usize,
        norm: Option<Vec<f64>>,
    ) -> Result<Self> {
        if field.n_times() != CALENDAR_DAYS {
            return Err(Error::DimensionMismatch(format!(
                "climatology needs {CALENDAR_DAYS} entries, found {}",
                field.n_times()
            )));
        }
        if norm.as_ref().is_some_and(|n| n.len() != CALENDAR_DAYS) {
            return Err(Error::DimensionMismatch("normalization length".into()));
        }
        Ok(Self {
            grid: field.grid.clone(),
            variable: field.variable.clone(),
            units: field.units.clone(),
            period,
            window_days,
            mean: field.values.clone(),
            norm,
        })
    }
}

fn check_window(window: usize) -> Result<usize> {
    if window % 2 == 0 {
        return Err(Error::EvenWindow(window));
    }
    Ok(window / 2)
}

/// Time indices of period days grouped by calendar-day slot.
fn days_by_key(dates: &[NaiveDate], period: &ClimatologyPeriod) -> Vec<Vec<usize>> {
    let mut by_key = vec![Vec::new(); CALENDAR_DAYS];
    for (t, d) in dates.iter().enumerate() {
        if period.contains(*d) {
            by_key[calendar_key(*d)].push(t);
        }
    }
    by_key
}

fn window_keys(d: usize, half: usize) -> impl Iterator<Item = usize> {
    (0..CALENDAR_DAYS).filter(move |k| calendar_distance(*k, d) <= half)
}

fn daily_dates(field: &GridField) -> Result<&[NaiveDate]> {
    field
        .times
        .daily()
        .ok_or_else(|| Error::InvalidField("expected a daily field".into()))
}

/// Mean over all period days whose calendar day lies within ±(window−1)/2 of
/// each calendar day, wrapping across the year boundary.
pub fn calendar_day_climatology(
    daily: &GridField,
    period: ClimatologyPeriod,
    window_days: usize,
) -> Result<CalendarClimatology> {
    let half = check_window(window_days)?;
    let dates = daily_dates(daily)?;
    period.check_covered(dates)?;
    let data = daily.as_matrix();
    let s = data.ncols();
    let by_key = days_by_key(dates, &period);
    let mut sums = Array2::<f64>::zeros((CALENDAR_DAYS, s));
    for (k, ts) in by_key.iter().enumerate() {
        let mut row = sums.row_mut(k);
        for &t in ts {
            row += &data.row(t);
        }
    }
    let mut mean = Array2::<f64>::zeros((CALENDAR_DAYS, s));
    for d in 0..CALENDAR_DAYS {
        let mut count = 0usize;
        let mut row = mean.row_mut(d);
        for k in window_keys(d, half) {
            row += &sums.row(k);
            count += by_key[k].len();
        }
        if count == 0 {
            return Err(Error::MissingCalendarDay(d));
        }
        row /= count as f64;
    }
    let (nlat, nlon) = daily.grid.shape();
    Ok(CalendarClimatology {
        grid: daily.grid.clone(),
        variable: daily.variable.base(),
        units: daily.units.clone(),
        period,
        window_days,
        mean: mean.into_shape_with_order((CALENDAR_DAYS, nlat, nlon)).expect("shape"),
        norm: None,
    })
}

/// x(t) − μ_{day(t)}.
pub fn anomalies(daily: &GridField, clim: &CalendarClimatology) -> Result<GridField> {
    if daily.variable.base() != clim.variable {
        return Err(Error::VariableMismatch {
            expected: clim.variable.tag(),
            found: daily.variable.tag(),
        });
    }
    if daily.grid != clim.grid {
        return Err(Error::DimensionMismatch("climatology grid".into()));
    }
    let dates = daily_dates(daily)?;
    let mut values = daily.values.clone();
    for (t, mut slab) in values.axis_iter_mut(NdAxis(0)).enumerate() {
        slab -= &clim.mean.index_axis(NdAxis(0), calendar_key(dates[t]));
    }
    daily.with_values(daily.times.clone(), values, daily.variable.anomaly())
}

/// Per-gridpoint Savitzky–Golay smoothing along time.
pub fn savgol_lowpass(series: &GridField, window_days: usize, poly_order: usize) -> Result<GridField> {
    let filter = SavitzkyGolay::new(window_days, poly_order)?;
    let n = series.n_times();
    if n < window_days {
        return Err(Error::SeriesTooShort {
            len: n,
            window: window_days,
        });
    }
    let mut out = Array3::zeros(series.values.raw_dim());
    for (i, mut slab) in out.axis_iter_mut(NdAxis(0)).enumerate() {
        let (start, kernel) = filter.kernel_at(i, n);
        for (j, c) in kernel.iter().enumerate() {
            slab.scaled_add(*c, &series.values.index_axis(NdAxis(0), start + j));
        }
    }
    series.with_values(series.times.clone(), out, series.variable.clone())
}

/// Per-calendar-day scale s_d: the standard deviation of `anom` pooled over
/// the ±(window−1)/2 calendar-day window of the period, averaged over the
/// domain with cosine-latitude weights.
pub fn calendar_day_normalization(
    anom: &GridField,
    period: ClimatologyPeriod,
    window_days: usize,
    convention: StdConvention,
) -> Result<Vec<f64>> {
    let half = check_window(window_days)?;
    let dates = daily_dates(anom)?;
    period.check_covered(dates)?;
    let data = anom.as_matrix();
    let s = data.ncols();
    let weights = area_weights(&anom.grid).into_shape_with_order(s).expect("flat");
    let wsum = weights.sum();
    let by_key = days_by_key(dates, &period);
    let scale = {
        let n = data.nrows().max(1) as f64;
        (data.iter().map(|v| v * v).sum::<f64>() / (n * s as f64)).sqrt()
    };
    let mut out = Vec::with_capacity(CALENDAR_DAYS);
    for d in 0..CALENDAR_DAYS {
        let keys: Vec<usize> = window_keys(d, half).collect();
        let count: usize = keys.iter().map(|k| by_key[*k].len()).sum();
        if count == 0 {
            return Err(Error::MissingCalendarDay(d));
        }
        let mut mean = Array1::<f64>::zeros(s);
        for &k in &keys {
            for &t in &by_key[k] {
                mean += &data.row(t);
            }
        }
        mean /= count as f64;
        let mut ss = Array1::<f64>::zeros(s);
        for &k in &keys {
            for &t in &by_key[k] {
                Zip::from(&mut ss).and(&data.row(t)).and(&mean).for_each(|acc, x, m| {
                    let dev = x - m;
                    *acc += dev * dev;
                });
            }
        }
        let sd_weighted: f64 = ss
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| convention.variance(*v, count).sqrt() * w)
            .sum::<f64>()
            / wsum;
        if !(sd_weighted > 1e-10 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::DegenerateNormalization { day: d });
        }
        out.push(sd_weighted);
    }
    Ok(out)
}

/// Φ(t) / s_{day(t)}.
pub fn standardize(anom: &GridField, norm: &[f64]) -> Result<GridField> {
    if norm.len() != CALENDAR_DAYS {
        return Err(Error::DimensionMismatch("normalization length".into()));
    }
    if let Some(d) = norm.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::DegenerateNormalization { day: d });
    }
    let dates = daily_dates(anom)?;
    let mut values = anom.values.clone();
    for (t, mut slab) in values.axis_iter_mut(NdAxis(0)).enumerate() {
        slab /= norm[calendar_key(dates[t])];
    }
    anom.with_values(anom.times.clone(), values, anom.variable.clone())
}

/// Monthly reduction of a daily field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Mean,
    Sum,
}

impl Aggregation {
    /// Temperature-like variables are averaged, precipitation is summed.
    pub fn for_variable(v: &Variable) -> Self {
        match v.base() {
            Variable::Tp => Aggregation::Sum,
            _ => Aggregation::Mean,
        }
    }
}

pub fn monthly_aggregate(daily: &GridField, mode: Aggregation, allow_partial: bool) -> Result<GridField> {
    let dates = daily_dates(daily)?;
    let (first, last) = match (dates.first(), dates.last()) {
        (Some(f), Some(l)) => (YearMonth::of(*f), YearMonth::of(*l)),
        _ => return Err(Error::EmptyMonth("no data".into())),
    };
    let months = YearMonth::range(first, last);
    let (nlat, nlon) = daily.grid.shape();
    let mut values = Array3::<f64>::zeros((months.len(), nlat, nlon));
    let mut counts = vec![0u32; months.len()];
    for (t, d) in dates.iter().enumerate() {
        let m = first.months_until(YearMonth::of(*d)) as usize;
        counts[m] += 1;
        let mut slab = values.index_axis_mut(NdAxis(0), m);
        slab += &daily.values.index_axis(NdAxis(0), t);
    }
    for (m, ym) in months.iter().enumerate() {
        if counts[m] == 0 {
            return Err(Error::EmptyMonth(ym.to_string()));
        }
        if counts[m] != ym.n_days() && !allow_partial {
            return Err(Error::PartialMonth(ym.to_string()));
        }
        if mode == Aggregation::Mean {
            let mut slab = values.index_axis_mut(NdAxis(0), m);
            slab /= counts[m] as f64;
        }
    }
    daily.with_values(TimeAxis::Monthly(months), values, daily.variable.clone())
}

/// Settings of the full standardization chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardizeConfig {
    pub window_days: usize,
    /// `(window, polynomial order)`; `None` disables the low-pass filter.
    pub filter: Option<(usize, usize)>,
    pub convention: StdConvention,
}

impl Default for StandardizeConfig {
    fn default() -> Self {
        Self {
            window_days: 15,
            filter: Some((5, 2)),
            convention: StdConvention::Population,
        }
    }
}

/// Output of [`standardized_anomalies`].
#[derive(Debug, Clone)]
pub struct Standardized {
    /// Climatology with the normalization filled in.
    pub climatology: CalendarClimatology,
    pub standardized: GridField,
}

/// Runs climatology → anomalies → filter → normalization → division.
pub fn standardized_anomalies(
    daily: &GridField,
    period: ClimatologyPeriod,
    cfg: &StandardizeConfig,
) -> Result<Standardized> {
    let mut clim = calendar_day_climatology(daily, period, cfg.window_days)?;
    let mut anom = anomalies(daily, &clim)?;
    if let Some((w, p)) = cfg.filter {
        anom = savgol_lowpass(&anom, w, p)?;
    }
    let norm = calendar_day_normalization(&anom, period, cfg.window_days, cfg.convention)?;
    let standardized = standardize(&anom, &norm)?;
    clim.norm = Some(norm);
    Ok(Standardized {
        climatology: clim,
        standardized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Axis, Domain, Grid};
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn grid(nlat: usize, nlon: usize) -> Grid {
        Grid::new(Axis::new(40.0, 5.0, nlat), Axis::new(0.0, 5.0, nlon), Domain::Custom("t".into())).unwrap()
    }

    fn daily_field(start: NaiveDate, end: NaiveDate, nlat: usize, nlon: usize, mut f: impl FnMut(usize, NaiveDate, usize, usize) -> f64) -> GridField {
        let times = TimeAxis::daily_range(start, end);
        let dates = times.daily().unwrap().to_vec();
        let values = Array3::from_shape_fn((dates.len(), nlat, nlon), |(t, i, j)| f(t, dates[t], i, j));
        GridField::new(grid(nlat, nlon), times, values, Variable::Z500, "m").unwrap()
    }

    fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn short_period() -> ClimatologyPeriod {
        ClimatologyPeriod::new(ymd(2001, 1, 1), ymd(2002, 12, 31)).unwrap()
    }

    #[test]
    fn period_validation() {
        assert!(ClimatologyPeriod::new(ymd(2001, 1, 1), ymd(2001, 12, 31)).is_err());
        assert!(ClimatologyPeriod::new(ymd(2002, 1, 1), ymd(2001, 1, 1)).is_err());
        assert_eq!(ClimatologyPeriod::default().n_days(), 10957);
    }

    #[test]
    fn constant_field_climatology() {
        let f = daily_field(ymd(2001, 1, 1), ymd(2002, 12, 31), 2, 2, |_, _, _, _| 3.5);
        let c = calendar_day_climatology(&f, short_period(), 15).unwrap();
        assert!(c.mean.iter().all(|v| (v - 3.5).abs() < 1e-12));
        assert!(matches!(calendar_day_climatology(&f, short_period(), 4), Err(Error::EvenWindow(4))));
    }

    #[test]
    fn window_average_around_jan_8() {
        // Jan 1..15 of both years: Jan-08 is 10, the other 28 days average to
        // (30*4 - 2*10)/28 so that the full 30-day window averages to 4.
        let other = (30.0 * 4.0 - 2.0 * 10.0) / 28.0;
        let f = daily_field(ymd(2001, 1, 1), ymd(2002, 12, 31), 1, 1, |_, d, _, _| {
            if d.month() == 1 && d.day() == 8 {
                10.0
            } else if d.month() == 1 && d.day() <= 15 {
                other
            } else {
                -50.0
            }
        });
        let c = calendar_day_climatology(&f, short_period(), 15).unwrap();
        assert!((c.mean[[7, 0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn uncovered_period_is_an_error() {
        let f = daily_field(ymd(2001, 1, 1), ymd(2002, 6, 30), 1, 1, |_, _, _, _| 1.0);
        assert!(matches!(
            calendar_day_climatology(&f, short_period(), 15),
            Err(Error::PeriodNotCovered(_))
        ));
    }

    #[test]
    fn anomalies_invert_climatology() {
        let f = daily_field(ymd(2001, 1, 1), ymd(2003, 12, 31), 2, 3, |t, d, i, j| {
            (d.ordinal() as f64 / 58.0).sin() * 10.0 + i as f64 - j as f64 + (t % 7) as f64
        });
        let c = calendar_day_climatology(&f, short_period(), 15).unwrap();
        let a = anomalies(&f, &c).unwrap();
        let dates = f.times.daily().unwrap();
        for t in 0..f.n_times() {
            let back = &a.slice(t) + &c.mean.index_axis(NdAxis(0), calendar_key(dates[t]));
            for (x, y) in back.iter().zip(f.slice(t).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // x = μ + 2 everywhere → anomalies 2
        let shifted = f.with_values(f.times.clone(), f.values.mapv(|v| v + 2.0), Variable::Z500).unwrap();
        let a2 = anomalies(&shifted, &c).unwrap();
        for (x, y) in a2.values.iter().zip(a.values.iter()) {
            assert!((x - y - 2.0).abs() < 1e-12);
        }
        let wrong = f.with_values(f.times.clone(), f.values.clone(), Variable::T2m).unwrap();
        assert!(matches!(anomalies(&wrong, &c), Err(Error::VariableMismatch { .. })));
    }

    #[test]
    fn normalization_of_iid_noise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let f = daily_field(ymd(2001, 1, 1), ymd(2002, 12, 31), 4, 5, |_, _, _, _| normal.sample(&mut rng));
        let s = calendar_day_normalization(&f, short_period(), 15, StdConvention::Population).unwrap();
        // each s_d pools 30 days x 20 points
        for v in &s {
            assert!((v - 2.0).abs() < 0.3, "{v}");
        }
        // population std of 30 samples is biased low by roughly sqrt(29/30)
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let expected = 2.0 * (29.0f64 / 30.0).sqrt();
        assert!((mean - expected).abs() < 0.05, "{mean}");
        let doubled = f.with_values(f.times.clone(), f.values.mapv(|v| 2.0 * v), Variable::Z500).unwrap();
        let s2 = calendar_day_normalization(&doubled, short_period(), 15, StdConvention::Population).unwrap();
        for (a, b) in s.iter().zip(&s2) {
            assert!((b - 2.0 * a).abs() < 1e-12 * b);
        }
    }

    #[test]
    fn zero_anomalies_are_degenerate() {
        let f = daily_field(ymd(2001, 1, 1), ymd(2002, 12, 31), 2, 2, |_, _, _, _| 0.0);
        assert!(matches!(
            calendar_day_normalization(&f, short_period(), 15, StdConvention::Population),
            Err(Error::DegenerateNormalization { .. })
        ));
        let c = daily_field(ymd(2001, 1, 1), ymd(2002, 12, 31), 2, 2, |_, _, _, _| 5.0);
        assert!(calendar_day_normalization(&c, short_period(), 15, StdConvention::Population).is_err());
    }

    #[test]
    fn standardize_identity_and_inverse() {
        let f = daily_field(ymd(2001, 1, 1), ymd(2001, 3, 31), 2, 2, |t, _, i, _| t as f64 - i as f64);
        let ones = vec![1.0; CALENDAR_DAYS];
        assert_eq!(standardize(&f, &ones).unwrap().values, f.values);
        let s: Vec<f64> = (0..CALENDAR_DAYS).map(|d| 1.0 + d as f64 / 100.0).collect();
        let z = standardize(&f, &s).unwrap();
        let dates = f.times.daily().unwrap();
        for t in 0..f.n_times() {
            let k = calendar_key(dates[t]);
            for (a, b) in z.slice(t).iter().zip(f.slice(t).iter()) {
                assert!((a * s[k] - b).abs() < 1e-12);
            }
        }
        // Φ = s_d → 1
        let phi = daily_field(ymd(2001, 1, 1), ymd(2001, 3, 31), 1, 2, |_, d, _, _| s[calendar_key(d)]);
        assert!(standardize(&phi, &s).unwrap().values.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn monthly_aggregation_modes() {
        let f = daily_field(ymd(2001, 1, 1), ymd(2001, 2, 28), 1, 1, |t, _, _, _| if t < 31 { t as f64 } else { 1.0 });
        let mean = monthly_aggregate(&f, Aggregation::Mean, false).unwrap();
        assert_eq!(mean.values[[0, 0, 0]], 15.0);
        assert_eq!(mean.values[[1, 0, 0]], 1.0);
        let sum = monthly_aggregate(&f, Aggregation::Sum, false).unwrap();
        assert_eq!(sum.values[[1, 0, 0]], 28.0);
        let partial = daily_field(ymd(2001, 1, 5), ymd(2001, 2, 28), 1, 1, |_, _, _, _| 1.0);
        assert!(matches!(monthly_aggregate(&partial, Aggregation::Mean, false), Err(Error::PartialMonth(_))));
        assert!(monthly_aggregate(&partial, Aggregation::Mean, true).is_ok());
        assert_eq!(Aggregation::for_variable(&Variable::Anomaly("tp".into())), Aggregation::Sum);
        assert_eq!(Aggregation::for_variable(&Variable::T2m), Aggregation::Mean);
    }
}

//! Calendar helpers: year-months, time axes and calendar-day keys.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of calendar-day slots, Feb 29 included.
pub const CALENDAR_DAYS: usize = 366;

/// Index of `date` in a leap-year calendar (Jan 1 = 0, Feb 29 = 59, Dec 31 = 365).
///
/// Non-leap years skip slot 59, so the same month/day always maps to the same slot.
pub fn calendar_key(date: NaiveDate) -> usize {
    let ord = date.ordinal0() as usize;
    if !is_leap(date.year()) && ord >= 59 {
        ord + 1
    } else {
        ord
    }
}

/// Month (1..=12) of a calendar-day slot.
pub fn calendar_key_month(key: usize) -> u32 {
    let date = NaiveDate::from_yo_opt(2000, key as u32 + 1).expect("key in 0..366");
    date.month()
}

/// Circular distance between two calendar-day slots.
pub fn calendar_distance(a: usize, b: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(CALENDAR_DAYS - d)
}

pub fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_month(year: i32, month: u32) -> u32 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 if is_leap(year) => 29,
        2 => 28,
        _ => panic!("month out of range: {month}"),
    }
}

/// A calendar month of a particular year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::InvalidField(format!("month {month} out of range")));
        }
        Ok(Self { year, month })
    }

    pub fn of(date: NaiveDate) -> Self {
        Self {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn succ(self) -> Self {
        self.add_months(1)
    }

    pub fn add_months(self, n: i32) -> Self {
        let idx = self.year * 12 + self.month as i32 - 1 + n;
        Self {
            year: idx.div_euclid(12),
            month: (idx.rem_euclid(12) + 1) as u32,
        }
    }

    /// Months from `self` to `other`.
    pub fn months_until(self, other: YearMonth) -> i32 {
        (other.year - self.year) * 12 + other.month as i32 - self.month as i32
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid year-month")
    }

    pub fn n_days(self) -> u32 {
        days_in_month(self.year, self.month)
    }

    /// Inclusive range of months.
    pub fn range(start: YearMonth, end: YearMonth) -> Vec<YearMonth> {
        let n = start.months_until(end);
        (0..=n.max(-1)).map(|i| start.add_months(i)).collect()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidField(format!("bad year-month {s:?}"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        // "YYYY-MM" or "YYYY-MM-DD"
        let m = m.split('-').next().ok_or_else(bad)?;
        YearMonth::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

/// Time coordinate of a [`crate::grid::GridField`].
#[derive(Debug, Clone, PartialEq)]
pub enum TimeAxis {
    Daily(Vec<NaiveDate>),
    Monthly(Vec<YearMonth>),
    /// Plain positional axis (calendar-day climatologies, static layers, ...).
    Index(usize),
}

impl TimeAxis {
    pub fn len(&self) -> usize {
        match self {
            TimeAxis::Daily(d) => d.len(),
            TimeAxis::Monthly(m) => m.len(),
            TimeAxis::Index(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TimeAxis::Daily(_) => "daily",
            TimeAxis::Monthly(_) => "monthly",
            TimeAxis::Index(_) => "index",
        }
    }

    pub fn daily(&self) -> Option<&[NaiveDate]> {
        match self {
            TimeAxis::Daily(d) => Some(d),
            _ => None,
        }
    }

    pub fn monthly(&self) -> Option<&[YearMonth]> {
        match self {
            TimeAxis::Monthly(m) => Some(m),
            _ => None,
        }
    }

    /// Contiguous daily axis covering `start..=end`.
    pub fn daily_range(start: NaiveDate, end: NaiveDate) -> Self {
        TimeAxis::Daily(start.iter_days().take_while(|d| *d <= end).collect())
    }

    pub fn monthly_range(start: YearMonth, end: YearMonth) -> Self {
        TimeAxis::Monthly(YearMonth::range(start, end))
    }

    pub(crate) fn check_increasing(&self) -> Result<()> {
        let ok = match self {
            TimeAxis::Daily(d) => d.windows(2).all(|w| w[0] < w[1]),
            TimeAxis::Monthly(m) => m.windows(2).all(|w| w[0] < w[1]),
            TimeAxis::Index(_) => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidField("times not strictly increasing".into()))
        }
    }

    /// Row labels as strings (ISO dates, `YYYY-MM`, or positions).
    pub fn labels(&self) -> Vec<String> {
        match self {
            TimeAxis::Daily(d) => d.iter().map(|d| d.to_string()).collect(),
            TimeAxis::Monthly(m) => m.iter().map(|m| m.to_string()).collect(),
            TimeAxis::Index(n) => (0..*n).map(|i| i.to_string()).collect(),
        }
    }
}

/// Meteorological season used for verification subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Season {
    Djf,
    Jja,
    All,
}

impl Season {
    pub fn contains(self, month: u32) -> bool {
        match self {
            Season::Djf => matches!(month, 12 | 1 | 2),
            Season::Jja => matches!(month, 6..=8),
            Season::All => true,
        }
    }

    /// Season year of a month; December counts toward the following winter.
    pub fn season_year(self, ym: YearMonth) -> i32 {
        if self == Season::Djf && ym.month == 12 {
            ym.year + 1
        } else {
            ym.year
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Season::Djf => "DJF",
            Season::Jja => "JJA",
            Season::All => "all",
        }
    }
}

impl fmt::Display for Season {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Season {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "djf" | "winter" => Ok(Season::Djf),
            "jja" | "summer" => Ok(Season::Jja),
            "all" => Ok(Season::All),
            other => Err(Error::InvalidConfig(format!("unknown season {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(y: i32, m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, day).unwrap()
    }

    #[test]
    fn calendar_keys_align_across_leap_years() {
        assert_eq!(calendar_key(d(2001, 1, 1)), 0);
        assert_eq!(calendar_key(d(2000, 2, 29)), 59);
        assert_eq!(calendar_key(d(2000, 3, 1)), 60);
        assert_eq!(calendar_key(d(2001, 3, 1)), 60);
        assert_eq!(calendar_key(d(2001, 12, 31)), 365);
        assert_eq!(calendar_key(d(2000, 12, 31)), 365);
        assert_eq!(calendar_key_month(59), 2);
        assert_eq!(calendar_key_month(60), 3);
    }

    #[test]
    fn circular_distance_wraps() {
        assert_eq!(calendar_distance(0, 365), 1);
        assert_eq!(calendar_distance(3, 360), 9);
        assert_eq!(calendar_distance(10, 17), 7);
    }

    #[test]
    fn year_month_arithmetic() {
        let ym = YearMonth::new(2010, 12).unwrap();
        assert_eq!(ym.succ(), YearMonth::new(2011, 1).unwrap());
        assert_eq!(ym.add_months(-12), YearMonth::new(2009, 12).unwrap());
        assert_eq!(YearMonth::new(1940, 1).unwrap().months_until(YearMonth::new(2010, 12).unwrap()), 851);
        assert_eq!("2011-03".parse::<YearMonth>().unwrap(), YearMonth::new(2011, 3).unwrap());
        assert!(YearMonth::new(2011, 13).is_err());
    }

    #[test]
    fn december_belongs_to_next_winter() {
        let dec = YearMonth::new(2010, 12).unwrap();
        assert_eq!(Season::Djf.season_year(dec), 2011);
        assert_eq!(Season::Jja.season_year(dec), 2010);
        assert!(Season::Djf.contains(12) && !Season::Djf.contains(3));
    }
}

//! GRD1 grid files and CSV index-series files.
//!
//! A GRD1 file is one JSON header line terminated by `\n`, followed by the
//! row-major (time, lat, lon) payload as little-endian `f32`. Missing values
//! are stored as quiet NaN and announced by the `missing` header flag.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, Array3, Axis as NdAxis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Axis, Domain, Grid, GridField, Variable};
use crate::time::{TimeAxis, YearMonth};

pub const GRD_MAGIC: &str = "GRD1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    variable: String,
    units: String,
    domain: Domain,
    time_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_start: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_step: Option<u32>,
    time_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    times: Option<Vec<String>>,
    lat: Axis,
    lon: Axis,
    dtype: String,
    missing: bool,
}

fn time_header(times: &TimeAxis) -> (Option<String>, Option<u32>, Option<Vec<String>>) {
    match times {
        TimeAxis::Daily(d) => {
            let regular = d.windows(2).all(|w| (w[1] - w[0]).num_days() == 1);
            match (regular, d.first()) {
                (true, Some(first)) => (Some(first.to_string()), Some(1), None),
                _ => (None, None, Some(times.labels())),
            }
        }
        TimeAxis::Monthly(m) => {
            let regular = m.windows(2).all(|w| w[0].succ() == w[1]);
            match (regular, m.first()) {
                (true, Some(first)) => (Some(first.to_string()), Some(1), None),
                _ => (None, None, Some(times.labels())),
            }
        }
        TimeAxis::Index(_) => (None, None, None),
    }
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    s.parse()
        .map_err(|_| Error::MalformedHeader(format!("bad date {s:?}")))
}

fn parse_times(h: &Header) -> Result<TimeAxis> {
    let n = h.time_count;
    let axis = match (h.time_kind.as_str(), &h.times, &h.time_start) {
        ("daily", Some(list), _) => {
            TimeAxis::Daily(list.iter().map(|s| parse_date(s)).collect::<Result<_>>()?)
        }
        ("daily", None, Some(start)) => {
            let step = h.time_step.unwrap_or(1) as u64;
            let start = parse_date(start)?;
            TimeAxis::Daily(
                (0..n as u64)
                    .map(|i| start + chrono::Days::new(i * step))
                    .collect(),
            )
        }
        ("monthly", Some(list), _) => TimeAxis::Monthly(
            list.iter()
                .map(|s| s.parse().map_err(|_| Error::MalformedHeader(format!("bad month {s:?}"))))
                .collect::<Result<_>>()?,
        ),
        ("monthly", None, Some(start)) => {
            let step = h.time_step.unwrap_or(1) as i32;
            let start: YearMonth = start
                .parse()
                .map_err(|_| Error::MalformedHeader(format!("bad month {start:?}")))?;
            TimeAxis::Monthly((0..n as i32).map(|i| start.add_months(i * step)).collect())
        }
        ("index", _, _) => TimeAxis::Index(n),
        (kind, _, _) => {
            return Err(Error::MalformedHeader(format!("unknown time kind {kind:?}")))
        }
    };
    if axis.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "time list has {} entries, header declares {n}",
            axis.len()
        )));
    }
    Ok(axis)
}

/// Writes `field` as a GRD1 file.
pub fn write_grid_file(field: &GridField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    field.validate()?;
    let (time_start, time_step, times) = time_header(&field.times);
    let mut lat = field.grid.lat;
    if field.lat_descending_on_disk {
        lat = Axis::new(lat.last(), -lat.step, lat.count);
    }
    let header = Header {
        magic: GRD_MAGIC.into(),
        variable: field.variable.tag(),
        units: field.units.clone(),
        domain: field.grid.domain.clone(),
        time_kind: field.times.kind().into(),
        time_start,
        time_step,
        time_count: field.n_times(),
        times,
        lat,
        lon: field.grid.lon,
        dtype: "f32le".into(),
        missing: field.missing,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let line = serde_json::to_string(&header).expect("header serializes");
    let io = |e| Error::io(path, e);
    w.write_all(line.as_bytes()).map_err(io)?;
    w.write_all(b"\n").map_err(io)?;
    let nlat = field.grid.lat.count;
    for slab in field.values.axis_iter(NdAxis(0)) {
        for r in 0..nlat {
            let row = if field.lat_descending_on_disk { nlat - 1 - r } else { r };
            for v in slab.row(row) {
                w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads a GRD1 file; latitude is normalized to ascending order.
pub fn read_grid_file(path: impl AsRef<Path>) -> Result<GridField> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(|e| Error::io(path, e))?;
    if line.last() != Some(&b'\n') {
        return Err(Error::MalformedHeader("header line not terminated".into()));
    }
    let raw: serde_json::Value = serde_json::from_slice(&line[..line.len() - 1])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let magic = raw
        .get("magic")
        .and_then(|m| m.as_str())
        .ok_or_else(|| Error::MalformedHeader("no magic".into()))?;
    if magic != GRD_MAGIC {
        return Err(if magic.starts_with("GRD") {
            Error::UnsupportedVersion {
                found: magic.into(),
            }
        } else {
            Error::BadMagic {
                found: magic.into(),
            }
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(Error::MalformedHeader(format!("dtype {:?}", header.dtype)));
    }
    let times = parse_times(&header)?;
    let descending = header.lat.count > 1 && header.lat.step < 0.0;
    let lat = if descending {
        Axis::new(header.lat.last(), -header.lat.step, header.lat.count)
    } else {
        header.lat
    };
    let grid = Grid::new(lat, header.lon, header.domain)?;
    let (nt, nlat, nlon) = (times.len(), lat.count, header.lon.count);
    let expected = nt * nlat * nlon * 4;
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch(format!(
            "payload has {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    let mut values = Array3::zeros((nt, nlat, nlon));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        let t = i / (nlat * nlon);
        let r = (i / nlon) % nlat;
        let c = i % nlon;
        let row = if descending { nlat - 1 - r } else { r };
        values[[t, row, c]] = v;
    }
    if !header.missing && values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidField("NaN payload without missing flag".into()));
    }
    let field = GridField {
        grid,
        times,
        values,
        variable: Variable::parse(&header.variable),
        units: header.units,
        missing: header.missing,
        lat_descending_on_disk: descending,
    };
    field.validate()?;
    Ok(field)
}

/// Writes a dated matrix as CSV: `date,<name1>,...,<nameK>`.
pub fn write_series_csv(
    path: impl AsRef<Path>,
    times: &TimeAxis,
    names: &[String],
    values: &Array2<f64>,
) -> Result<()> {
    let path = path.as_ref();
    if values.nrows() != times.len() || values.ncols() != names.len() {
        return Err(Error::DimensionMismatch(format!(
            "series {:?} vs {} times x {} names",
            values.shape(),
            times.len(),
            names.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut head = String::from("date");
    for n in names {
        head.push(',');
        head.push_str(n);
    }
    writeln!(w, "{head}").map_err(io)?;
    for (label, row) in times.labels().iter().zip(values.rows()) {
        let mut line = label.clone();
        for v in row {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a CSV written by [`write_series_csv`]. Dates of the form
/// `YYYY-MM-DD` give a daily axis, `YYYY-MM` a monthly one.
pub fn read_series_csv(path: impl AsRef<Path>) -> Result<(TimeAxis, Vec<String>, Array2<f64>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Csv("empty file".into()))?;
    let mut cols = head.split(',');
    if cols.next() != Some("date") {
        return Err(Error::Csv("first column must be `date`".into()));
    }
    let names: Vec<String> = cols.map(str::to_string).collect();
    let k = names.len();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut cells = line.split(',');
        labels.push(cells.next().unwrap_or_default().to_string());
        let row: Vec<f64> = cells
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Csv(format!("line {}: bad number {c:?}", i + 2)))
            })
            .collect::<Result<_>>()?;
        if row.len() != k {
            return Err(Error::Csv(format!("line {}: expected {k} values", i + 2)));
        }
        data.extend(row);
    }
    let times = if labels.iter().all(|l| l.len() == 7) {
        TimeAxis::Monthly(labels.iter().map(|l| l.parse()).collect::<Result<_>>()?)
    } else {
        TimeAxis::Daily(
            labels
                .iter()
                .map(|l| l.parse().map_err(|_| Error::Csv(format!("bad date {l:?}"))))
                .collect::<Result<_>>()?,
        )
    };
    let values = Array2::from_shape_vec((labels.len(), k), data)
        .map_err(|e| Error::Csv(e.to_string()))?;
    Ok((times, names, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Domain;

    fn field(nt: usize, nlat: usize, nlon: usize) -> GridField {
        let grid = Grid::new(
            Axis::new(30.0, 2.5, nlat),
            Axis::new(-20.0, 5.0, nlon),
            Domain::Europe,
        )
        .unwrap();
        let values = Array3::from_shape_fn((nt, nlat, nlon), |(t, i, j)| {
            (t * 100 + i * 10 + j) as f32 as f64 * 0.25 - 7.0
        });
        let start = NaiveDate::from_ymd_opt(2000, 2, 27).unwrap();
        let times = TimeAxis::Daily((0..nt as u64).map(|i| start + chrono::Days::new(i)).collect());
        GridField::new(grid, times, values, Variable::T2m, "K").unwrap()
    }

    #[test]
    fn roundtrip_small_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.grd");
        let f = field(2, 3, 4);
        write_grid_file(&f, &p).unwrap();
        let g = read_grid_file(&p).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn descending_latitudes_are_flipped_and_remembered() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.grd");
        let mut f = field(1, 3, 2);
        f.lat_descending_on_disk = true;
        write_grid_file(&f, &p).unwrap();
        let text = std::fs::read(&p).unwrap();
        let header = String::from_utf8_lossy(&text[..text.iter().position(|b| *b == b'\n').unwrap()]).to_string();
        assert!(header.contains("\"step\":-2.5"));
        let g = read_grid_file(&p).unwrap();
        assert_eq!(f, g);
        assert!(g.grid.lat.step > 0.0);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.grd");
        write_grid_file(&field(10, 2, 2), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(read_grid_file(&p), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn version_and_magic_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.grd");
        write_grid_file(&field(1, 2, 2), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let text = String::from_utf8_lossy(&bytes).replacen("GRD1", "GRD2", 1);
        std::fs::write(&p, text.as_bytes()).unwrap();
        assert!(matches!(read_grid_file(&p), Err(Error::UnsupportedVersion { .. })));
        let text = String::from_utf8_lossy(&bytes).replacen("GRD1", "NOPE", 1);
        std::fs::write(&p, text.as_bytes()).unwrap();
        assert!(matches!(read_grid_file(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn trailing_bytes_are_a_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.grd");
        write_grid_file(&field(1, 2, 2), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_grid_file(&p), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn missing_values_survive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.grd");
        let mut f = field(1, 2, 2);
        f.values[[0, 1, 0]] = f64::NAN;
        f.missing = true;
        write_grid_file(&f, &p).unwrap();
        let g = read_grid_file(&p).unwrap();
        assert!(g.missing && g.values[[0, 1, 0]].is_nan());
        assert_eq!(g.values[[0, 0, 1]], f.values[[0, 0, 1]]);
    }

    #[test]
    fn csv_roundtrip_monthly_and_daily() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let times = TimeAxis::monthly_range(YearMonth::new(2010, 11).unwrap(), YearMonth::new(2011, 2).unwrap());
        let names = vec!["R1".to_string(), "R2".to_string()];
        let values = Array2::from_shape_fn((4, 2), |(i, j)| (i as f64 + 0.1) / (j as f64 + 3.0));
        write_series_csv(&p, &times, &names, &values).unwrap();
        let (t, n, v) = read_series_csv(&p).unwrap();
        assert_eq!((t, n, v), (times, names, values.clone()));
        let days = TimeAxis::daily_range(
            NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            NaiveDate::from_ymd_opt(2000, 1, 4).unwrap(),
        );
        write_series_csv(&p, &days, &["x".into(), "y".into()], &values).unwrap();
        assert_eq!(read_series_csv(&p).unwrap().0, days);
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("date,x,y\n2000-01-01,"));
    }
}

//! Trip records, the columnar table used by every downstream stage, chunked
//! CSV ingestion and the seeded 80/20 split.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PICKUP_DATETIME: &str = "pickup_datetime";
pub const PICKUP_LONGITUDE: &str = "pickup_longitude";
pub const PICKUP_LATITUDE: &str = "pickup_latitude";
pub const DROPOFF_LONGITUDE: &str = "dropoff_longitude";
pub const DROPOFF_LATITUDE: &str = "dropoff_latitude";
pub const PASSENGER_COUNT: &str = "passenger_count";
pub const FARE_AMOUNT: &str = "fare_amount";

/// Column order of [`to_column_table`]. Timestamps are stored as Unix seconds.
pub const TRIP_COLUMNS: [&str; 7] = [
    PICKUP_DATETIME,
    PICKUP_LONGITUDE,
    PICKUP_LATITUDE,
    DROPOFF_LONGITUDE,
    DROPOFF_LATITUDE,
    PASSENGER_COUNT,
    FARE_AMOUNT,
];

pub const DEFAULT_CHUNK_ROWS: usize = 100_000;

/// One taxi trip. `None` marks a missing field.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TripRecord {
    pub pickup_datetime: Option<NaiveDateTime>,
    pub pickup_longitude: Option<f64>,
    pub pickup_latitude: Option<f64>,
    pub dropoff_longitude: Option<f64>,
    pub dropoff_latitude: Option<f64>,
    pub passenger_count: Option<u32>,
    pub fare_amount: Option<f64>,
}

/// Per-column mean and population standard deviation fitted on training rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    /// Set when the column was (near) constant and is passed through unscaled.
    pub constant: bool,
}

/// Columnar numeric dataset with explicit missing masks.
///
/// Missing cells hold `NaN` in `columns`, but the mask is authoritative.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    missing: Vec<Vec<bool>>,
    pub norm_stats: Option<Vec<ColumnStats>>,
}

impl ColumnTable {
    /// Builds a fully present table. Non-finite values are marked missing.
    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let missing = columns
            .iter()
            .map(|c| c.iter().map(|v| !v.is_finite()).collect())
            .collect();
        Self::with_masks(names, columns, missing)
    }

    pub fn with_masks(
        names: Vec<String>,
        mut columns: Vec<Vec<f64>>,
        missing: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if names.len() != columns.len() || names.len() != missing.len() {
            return Err(Error::Contract(format!(
                "{} names, {} columns, {} masks",
                names.len(),
                columns.len(),
                missing.len()
            )));
        }
        let n = columns.first().map_or(0, Vec::len);
        for (name, (c, m)) in names.iter().zip(columns.iter_mut().zip(&missing)) {
            if c.len() != n || m.len() != n {
                return Err(Error::Contract(format!(
                    "column `{name}` has length {} (mask {}), expected {n}",
                    c.len(),
                    m.len()
                )));
            }
            for (v, &miss) in c.iter_mut().zip(m) {
                if miss {
                    *v = f64::NAN;
                }
            }
        }
        Ok(Self {
            names,
            columns,
            missing,
            norm_stats: None,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.columns[self.require(name)?])
    }

    pub fn column_at(&self, idx: usize) -> &[f64] {
        &self.columns[idx]
    }

    pub fn mask(&self, name: &str) -> Result<&[bool]> {
        Ok(&self.missing[self.require(name)?])
    }

    pub fn mask_at(&self, idx: usize) -> &[bool] {
        &self.missing[idx]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn is_missing(&self, col: usize, row: usize) -> bool {
        self.missing[col][row]
    }

    pub fn missing_count(&self, name: &str) -> Result<usize> {
        Ok(self.mask(name)?.iter().filter(|m| **m).count())
    }

    pub fn is_complete(&self) -> bool {
        self.missing.iter().all(|m| m.iter().all(|x| !x))
    }

    /// Replaces a column's values; the mask is recomputed from finiteness.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let idx = self.require(name)?;
        self.set_column_at(idx, values)
    }

    pub fn set_column_at(&mut self, idx: usize, values: Vec<f64>) -> Result<()> {
        if values.len() != self.n_rows() {
            return Err(Error::Contract(format!(
                "column `{}`: {} values for {} rows",
                self.names[idx],
                values.len(),
                self.n_rows()
            )));
        }
        self.missing[idx] = values.iter().map(|v| !v.is_finite()).collect();
        self.columns[idx] = values;
        Ok(())
    }

    /// Appends a column, or replaces it when the name already exists.
    pub fn upsert_column(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if let Some(idx) = self.index_of(name) {
            return self.set_column_at(idx, values);
        }
        if self.n_cols() > 0 && values.len() != self.n_rows() {
            return Err(Error::Contract(format!(
                "new column `{name}`: {} values for {} rows",
                values.len(),
                self.n_rows()
            )));
        }
        self.missing.push(values.iter().map(|v| !v.is_finite()).collect());
        self.columns.push(values);
        self.names.push(name.to_string());
        self.norm_stats = None;
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> ColumnTable {
        ColumnTable {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|c| rows.iter().map(|&r| c[r]).collect())
                .collect(),
            missing: self
                .missing
                .iter()
                .map(|m| rows.iter().map(|&r| m[r]).collect())
                .collect(),
            norm_stats: self.norm_stats.clone(),
        }
    }

    pub fn select_columns(&self, names: &[&str]) -> Result<ColumnTable> {
        let idx = names
            .iter()
            .map(|n| self.require(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnTable {
            names: names.iter().map(|s| s.to_string()).collect(),
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
            missing: idx.iter().map(|&i| self.missing[i].clone()).collect(),
            norm_stats: self
                .norm_stats
                .as_ref()
                .map(|s| idx.iter().map(|&i| s[i]).collect()),
        })
    }

    /// Keeps rows where `keep[row]` is true.
    pub fn filter_rows(&self, keep: &[bool]) -> ColumnTable {
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&r| keep[r]).collect();
        self.select_rows(&rows)
    }

    /// Row-major values of the named columns. Errors on missing cells.
    pub fn row_major(&self, names: &[&str]) -> Result<Vec<f64>> {
        let idx = names
            .iter()
            .map(|n| self.require(n))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(self.n_rows() * idx.len());
        for r in 0..self.n_rows() {
            for &c in &idx {
                if self.missing[c][r] {
                    return Err(Error::Data(format!(
                        "missing value in `{}` at row {r}",
                        self.names[c]
                    )));
                }
                out.push(self.columns[c][r]);
            }
        }
        Ok(out)
    }

    /// Writes the table as CSV; missing cells are written as `NA`.
    /// Floats use the shortest round-trip representation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(&self.names)?;
        let mut row = Vec::with_capacity(self.n_cols());
        for r in 0..self.n_rows() {
            row.clear();
            for c in 0..self.n_cols() {
                if self.missing[c][r] {
                    row.push("NA".to_string());
                } else {
                    row.push(format!("{}", self.columns[c][r]));
                }
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<ColumnTable> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); names.len()];
        let mut missing = vec![Vec::new(); names.len()];
        for rec in rdr.records() {
            let rec = rec?;
            for (c, field) in rec.iter().enumerate() {
                if field.is_empty() || field == "NA" {
                    columns[c].push(f64::NAN);
                    missing[c].push(true);
                } else {
                    let v: f64 = field.parse().map_err(|_| {
                        Error::Data(format!("{}: unparseable value `{field}`", path.display()))
                    })?;
                    columns[c].push(v);
                    missing[c].push(false);
                }
            }
        }
        ColumnTable::with_masks(names, columns, missing)
    }
}

/// Deterministic train/test partition of row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub seed: u64,
}

/// Seeded uniform shuffle of `0..n_rows`; the first 80% (rounded down) train.
pub fn split_80_20(n_rows: usize, seed: u64) -> Result<SplitIndex> {
    if n_rows < 5 {
        return Err(Error::DegenerateSplit(n_rows));
    }
    let mut perm: Vec<usize> = (0..n_rows).collect();
    perm.shuffle(&mut rng::rng_from(seed));
    let n_train = n_rows * 8 / 10;
    let test_rows = perm.split_off(n_train);
    Ok(SplitIndex {
        train_rows: perm,
        test_rows,
        seed,
    })
}

pub fn to_column_table(records: &[TripRecord]) -> Result<ColumnTable> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = records.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); TRIP_COLUMNS.len()];
    for r in records {
        let vals = [
            r.pickup_datetime.map(|t| t.and_utc().timestamp() as f64),
            r.pickup_longitude,
            r.pickup_latitude,
            r.dropoff_longitude,
            r.dropoff_latitude,
            r.passenger_count.map(f64::from),
            r.fare_amount,
        ];
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v.unwrap_or(f64::NAN));
        }
    }
    let missing = cols
        .iter()
        .map(|c| c.iter().map(|v| v.is_nan()).collect())
        .collect();
    ColumnTable::with_masks(
        TRIP_COLUMNS.iter().map(|s| s.to_string()).collect(),
        cols,
        missing,
    )
}

/// Inverse of [`to_column_table`] for tables carrying the trip columns.
pub fn to_records(table: &ColumnTable) -> Result<Vec<TripRecord>> {
    let idx = TRIP_COLUMNS
        .iter()
        .map(|n| table.require(n))
        .collect::<Result<Vec<_>>>()?;
    let get = |c: usize, r: usize| {
        let col = idx[c];
        (!table.is_missing(col, r)).then(|| table.column_at(col)[r])
    };
    (0..table.n_rows())
        .map(|r| {
            let pickup_datetime = match get(0, r) {
                Some(ts) => Some(
                    DateTime::from_timestamp(ts as i64, 0)
                        .ok_or_else(|| Error::Data(format!("timestamp {ts} out of range")))?
                        .naive_utc(),
                ),
                None => None,
            };
            Ok(TripRecord {
                pickup_datetime,
                pickup_longitude: get(1, r),
                pickup_latitude: get(2, r),
                dropoff_longitude: get(3, r),
                dropoff_latitude: get(4, r),
                passenger_count: get(5, r).map(|v| v as u32),
                fare_amount: get(6, r),
            })
        })
        .collect()
}

/// Outcome of [`parse_csv_chunked`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub rows_read: usize,
    pub rows_rejected: usize,
    pub rejects_by_reason: BTreeMap<String, usize>,
}

impl IngestSummary {
    fn reject(&mut self, reason: &str) {
        self.rows_rejected += 1;
        *self.rejects_by_reason.entry(reason.to_string()).or_default() += 1;
    }
}

pub fn parse_timestamp(field: &str) -> Option<NaiveDateTime> {
    let s = field.trim();
    let s = s
        .strip_suffix(" UTC")
        .or_else(|| s.strip_suffix("UTC"))
        .or_else(|| s.strip_suffix('Z'))
        .unwrap_or(s)
        .trim_end();
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S").ok()
}

fn is_missing_field(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f == "NA"
}

fn parse_number(field: &str) -> std::result::Result<Option<f64>, &'static str> {
    if is_missing_field(field) {
        return Ok(None);
    }
    match field.trim().parse::<f64>() {
        Ok(v) => Ok(Some(v)),
        Err(_) => Err("unparseable number"),
    }
}

/// Field positions of the trip columns within the file's header.
struct HeaderMap([usize; 7]);

impl HeaderMap {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let lowered: Vec<String> = header.iter().map(|h| h.trim().to_lowercase()).collect();
        let missing: Vec<String> = TRIP_COLUMNS
            .iter()
            .filter(|c| !lowered.iter().any(|h| h == *c))
            .map(|c| c.to_string())
            .collect();
        let unknown: Vec<String> = lowered
            .iter()
            .filter(|h| !TRIP_COLUMNS.contains(&h.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() || !unknown.is_empty() {
            return Err(Error::Schema { missing, unknown });
        }
        let mut pos = [0; 7];
        for (i, c) in TRIP_COLUMNS.iter().enumerate() {
            pos[i] = lowered.iter().position(|h| h == c).unwrap_or_default();
        }
        Ok(HeaderMap(pos))
    }
}

fn parse_row(
    rec: &csv::StringRecord,
    map: &HeaderMap,
) -> std::result::Result<TripRecord, &'static str> {
    if rec.len() != TRIP_COLUMNS.len() {
        return Err("wrong field count");
    }
    let f = |i: usize| rec.get(map.0[i]).unwrap_or("");
    let pickup_datetime = if is_missing_field(f(0)) {
        None
    } else {
        Some(parse_timestamp(f(0)).ok_or("invalid timestamp")?)
    };
    let mut pickup_longitude = parse_number(f(1))?;
    let mut pickup_latitude = parse_number(f(2))?;
    let mut dropoff_longitude = parse_number(f(3))?;
    let mut dropoff_latitude = parse_number(f(4))?;
    for lon in [pickup_longitude, dropoff_longitude].into_iter().flatten() {
        if !(-180.0..=180.0).contains(&lon) {
            return Err("longitude out of range");
        }
    }
    for lat in [pickup_latitude, dropoff_latitude].into_iter().flatten() {
        if !(-90.0..=90.0).contains(&lat) {
            return Err("latitude out of range");
        }
    }
    // (0, 0) is the TLC placeholder for an unrecorded GPS fix.
    if pickup_longitude == Some(0.0) && pickup_latitude == Some(0.0) {
        pickup_longitude = None;
        pickup_latitude = None;
    }
    if dropoff_longitude == Some(0.0) && dropoff_latitude == Some(0.0) {
        dropoff_longitude = None;
        dropoff_latitude = None;
    }
    let passenger_count = match parse_number(f(5))? {
        None => None,
        Some(v) if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) => Some(v as u32),
        Some(_) => return Err("invalid passenger_count"),
    };
    let fare_amount = match parse_number(f(6))? {
        Some(v) if !v.is_finite() => return Err("non-finite fare"),
        other => other,
    };
    Ok(TripRecord {
        pickup_datetime,
        pickup_longitude,
        pickup_latitude,
        dropoff_longitude,
        dropoff_latitude,
        passenger_count,
        fare_amount,
    })
}

/// Streams a trip CSV in batches of at most `chunk_rows` accepted records.
///
/// `on_chunk` is called serially in file order. Rejected rows are counted by
/// reason and never reach a chunk.
pub fn parse_csv_chunked<F>(path: &Path, chunk_rows: usize, mut on_chunk: F) -> Result<IngestSummary>
where
    F: FnMut(Vec<TripRecord>) -> Result<()>,
{
    if chunk_rows == 0 {
        return Err(Error::Config("chunk_rows must be at least 1".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let map = HeaderMap::from_header(rdr.headers()?)?;
    let mut summary = IngestSummary::default();
    let mut chunk = Vec::with_capacity(chunk_rows.min(DEFAULT_CHUNK_ROWS));
    let mut rec = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {
                summary.rows_read += 1;
                match parse_row(&rec, &map) {
                    Ok(trip) => {
                        chunk.push(trip);
                        if chunk.len() == chunk_rows {
                            on_chunk(std::mem::take(&mut chunk))?;
                        }
                    }
                    Err(reason) => summary.reject(reason),
                }
            }
            Err(e) if matches!(e.kind(), csv::ErrorKind::Utf8 { .. }) => {
                summary.rows_read += 1;
                summary.reject("invalid utf-8");
            }
            Err(e) => return Err(e.into()),
        }
    }
    if !chunk.is_empty() {
        on_chunk(chunk)?;
    }
    Ok(summary)
}

/// Reads a whole file into memory through [`parse_csv_chunked`].
pub fn read_trips(path: &Path, chunk_rows: usize) -> Result<(Vec<TripRecord>, IngestSummary)> {
    let mut all = Vec::new();
    let summary = parse_csv_chunked(path, chunk_rows, |chunk| {
        all.extend(chunk);
        Ok(())
    })?;
    Ok((all, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const HEADER: &str = "pickup_datetime,pickup_longitude,pickup_latitude,dropoff_longitude,dropoff_latitude,passenger_count,fare_amount";

    fn write_file(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{HEADER}").unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn good_row(i: usize) -> String {
        format!(
            "2015-01-0{} 10:00:{:02} UTC,-73.98,40.75,-73.97,40.76,1,{}.5",
            1 + i % 9,
            i % 60,
            5 + i
        )
    }

    #[test]
    fn chunks_follow_file_order() {
        let f = write_file(&(0..10).map(good_row).collect::<Vec<_>>());
        let mut sizes = Vec::new();
        let mut fares = Vec::new();
        let s = parse_csv_chunked(f.path(), 4, |c| {
            sizes.push(c.len());
            fares.extend(c.iter().map(|r| r.fare_amount.unwrap()));
            Ok(())
        })
        .unwrap();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(s.rows_read, 10);
        assert_eq!(s.rows_rejected, 0);
        assert!(fares.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn out_of_range_latitude_is_rejected() {
        let mut lines: Vec<String> = (0..3).map(good_row).collect();
        lines.push("2015-01-01 10:00:00,-73.98,91.0,-73.97,40.76,1,5.0".into());
        let f = write_file(&lines);
        let (recs, s) = read_trips(f.path(), 100).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(s.rows_rejected, 1);
        assert_eq!(s.rejects_by_reason["latitude out of range"], 1);
    }

    #[test]
    fn missing_encodings_and_null_island() {
        let f = write_file(&[
            "2015-01-01 10:00:00,NA,40.75,-73.97,40.76,,5.0".into(),
            "2015-01-01 10:00:00,0,0,-73.97,40.76,2,5.0".into(),
            ",-73.9,40.7,-73.97,40.76,2,".into(),
        ]);
        let (recs, s) = read_trips(f.path(), 2).unwrap();
        assert_eq!(s.rows_rejected, 0);
        assert_eq!(recs[0].pickup_longitude, None);
        assert_eq!(recs[0].pickup_latitude, Some(40.75));
        assert_eq!(recs[0].passenger_count, None);
        assert_eq!(recs[1].pickup_longitude, None);
        assert_eq!(recs[1].pickup_latitude, None);
        assert_eq!(recs[1].dropoff_latitude, Some(40.76));
        assert_eq!(recs[2].pickup_datetime, None);
        assert_eq!(recs[2].fare_amount, None);
    }

    #[test]
    fn bad_timestamp_and_field_count() {
        let f = write_file(&[
            "2015/01/01 10:00:00,-73.9,40.7,-73.97,40.76,2,5".into(),
            "2015-01-01 10:00:00,-73.9,40.7,-73.97,40.76,2".into(),
            "2015-01-01 10:00:00,-73.9,40.7,-73.97,40.76,-1,5".into(),
            "2015-01-01 10:00:00,abc,40.7,-73.97,40.76,1,5".into(),
        ]);
        let (recs, s) = read_trips(f.path(), 10).unwrap();
        assert!(recs.is_empty());
        assert_eq!(s.rows_rejected, 4);
        assert_eq!(s.rejects_by_reason["invalid timestamp"], 1);
        assert_eq!(s.rejects_by_reason["wrong field count"], 1);
        assert_eq!(s.rejects_by_reason["invalid passenger_count"], 1);
        assert_eq!(s.rejects_by_reason["unparseable number"], 1);
    }

    #[test]
    fn header_is_case_insensitive_and_order_free() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "FARE_AMOUNT,Pickup_Datetime,pickup_longitude,pickup_latitude,dropoff_longitude,dropoff_latitude,passenger_count").unwrap();
        writeln!(f, "7.5,2015-01-01 10:00:00,-73.9,40.7,-73.97,40.76,2").unwrap();
        let (recs, _) = read_trips(f.path(), 10).unwrap();
        assert_eq!(recs[0].fare_amount, Some(7.5));
        assert_eq!(recs[0].passenger_count, Some(2));
    }

    #[test]
    fn header_mismatch_lists_columns() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "key,pickup_datetime,pickup_longitude,pickup_latitude,dropoff_longitude,dropoff_latitude,fare_amount").unwrap();
        match read_trips(f.path(), 10) {
            Err(Error::Schema { missing, unknown }) => {
                assert_eq!(missing, vec!["passenger_count".to_string()]);
                assert_eq!(unknown, vec!["key".to_string()]);
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_trips(Path::new("/nonexistent/trips.csv"), 10).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_80_20(10, 3).unwrap();
        assert_eq!((s.train_rows.len(), s.test_rows.len()), (8, 2));
        assert_eq!(s, split_80_20(10, 3).unwrap());
        assert!(matches!(split_80_20(4, 0), Err(Error::DegenerateSplit(4))));
        let a = split_80_20(100, 1).unwrap();
        let b = split_80_20(100, 2).unwrap();
        assert_ne!(a.train_rows, b.train_rows);
    }

    #[test]
    fn table_round_trip() {
        let t0 = parse_timestamp("2015-03-15 17:42:00").unwrap();
        let recs = vec![
            TripRecord {
                pickup_datetime: Some(t0),
                pickup_longitude: Some(-73.981_234_567_891),
                pickup_latitude: Some(40.75),
                dropoff_longitude: Some(-73.9),
                dropoff_latitude: Some(40.7),
                passenger_count: Some(2),
                fare_amount: Some(12.345),
            },
            TripRecord {
                pickup_longitude: None,
                ..TripRecord {
                    pickup_datetime: Some(t0),
                    pickup_longitude: Some(1.0),
                    pickup_latitude: Some(40.1),
                    dropoff_longitude: Some(-73.0),
                    dropoff_latitude: Some(40.2),
                    passenger_count: Some(1),
                    fare_amount: Some(3.0),
                }
            },
            TripRecord {
                pickup_datetime: None,
                pickup_longitude: Some(-74.0),
                pickup_latitude: Some(40.0),
                dropoff_longitude: Some(-74.1),
                dropoff_latitude: Some(40.3),
                passenger_count: Some(6),
                fare_amount: Some(52.0),
            },
        ];
        let table = to_column_table(&recs).unwrap();
        assert_eq!(table.n_rows(), 3);
        assert!(table.columns().iter().all(|c| c.len() == 3));
        assert_eq!(table.missing_count(PICKUP_LONGITUDE).unwrap(), 1);
        assert_eq!(to_records(&table).unwrap(), recs);
        assert!(matches!(to_column_table(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn csv_table_round_trip_is_exact() {
        let t = ColumnTable::from_columns(
            vec!["a".into(), "b".into()],
            vec![vec![0.1 + 0.2, f64::NAN, -1e-300], vec![1.0 / 3.0, 2.0, 3.0]],
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        t.write_csv(f.path()).unwrap();
        let back = ColumnTable::read_csv(f.path()).unwrap();
        assert_eq!(back.mask_at(0), t.mask_at(0));
        assert_eq!(back.column_at(0)[0].to_bits(), t.column_at(0)[0].to_bits());
        assert_eq!(back.column_at(1), t.column_at(1));
    }
}

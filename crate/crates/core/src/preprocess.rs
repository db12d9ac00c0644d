//! Cleaning and feature engineering: KNN imputation, IQR outlier removal
//! with NYC bounds, Haversine distance, calendar features and z-score
//! normalization fitted on training rows only.

use chrono::{DateTime, Datelike, NaiveDateTime, Timelike};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ColumnStats, ColumnTable, DROPOFF_LATITUDE, DROPOFF_LONGITUDE, FARE_AMOUNT, PICKUP_DATETIME,
    PICKUP_LATITUDE, PICKUP_LONGITUDE,
};
use crate::error::{Error, Result};
use crate::{par, rng};

/// Mean Earth radius (IUGG), kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

pub const HOUR_OF_DAY: &str = "hour_of_day";
pub const DAY_OF_WEEK: &str = "day_of_week";
pub const MONTH: &str = "month";
pub const HAVERSINE_KM: &str = "haversine_km";

const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnImputeConfig {
    pub k: usize,
    pub donor_cap: usize,
    pub seed: u64,
}

impl Default for KnnImputeConfig {
    fn default() -> Self {
        Self {
            k: 5,
            donor_cap: 10_000,
            seed: 0,
        }
    }
}

/// Axis-aligned latitude/longitude rectangle, degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl SpatialBounds {
    pub const NYC: SpatialBounds = SpatialBounds {
        lat_min: 40.5,
        lat_max: 41.0,
        lon_min: -74.3,
        lon_max: -73.7,
    };

    fn contains_lat(&self, lat: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat)
    }

    fn contains_lon(&self, lon: f64) -> bool {
        (self.lon_min..=self.lon_max).contains(&lon)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IqrFilterConfig {
    pub multiplier: f64,
    pub spatial_bounds: SpatialBounds,
    pub min_fare: f64,
}

impl Default for IqrFilterConfig {
    fn default() -> Self {
        Self {
            multiplier: 1.5,
            spatial_bounds: SpatialBounds::NYC,
            min_fare: 0.01,
        }
    }
}

impl IqrFilterConfig {
    pub fn validate(&self) -> Result<()> {
        let b = &self.spatial_bounds;
        if !(self.multiplier > 0.0) {
            return Err(Error::Config("IQR multiplier must be positive".into()));
        }
        if !(b.lat_min < b.lat_max && b.lon_min < b.lon_max) {
            return Err(Error::Config("spatial bounds rectangle is degenerate".into()));
        }
        Ok(())
    }
}

/// Per-criterion removal counts. A row failing several criteria is counted
/// once, under the first failing criterion in the order iqr, bounds, fare.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub iqr_removed: usize,
    pub bounds_removed: usize,
    pub fare_removed: usize,
    pub rows_remaining: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineeredFeatures {
    pub hour_of_day: u32,
    pub day_of_week: u32,
    pub month: u32,
    pub haversine_km: f64,
}

fn present_stats(values: &[f64], mask: &[bool]) -> (f64, f64, usize) {
    let mut n = 0usize;
    let mut sum = 0.0;
    for (v, m) in values.iter().zip(mask) {
        if !m {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for (v, m) in values.iter().zip(mask) {
        if !m {
            ss += (v - mean) * (v - mean);
        }
    }
    (mean, (ss / n as f64).sqrt(), n)
}

/// NaN-aware Euclidean distance: squared differences over jointly present
/// features, rescaled by `n_features / n_present`. Infinite when no feature
/// is jointly present.
fn nan_euclidean(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut present = 0usize;
    for (x, y) in a.iter().zip(b) {
        if x.is_nan() || y.is_nan() {
            continue;
        }
        sum += (x - y) * (x - y);
        present += 1;
    }
    if present == 0 {
        return f64::INFINITY;
    }
    (sum * a.len() as f64 / present as f64).sqrt()
}

/// Fills missing entries of `target_column` with the mean target of the `k`
/// nearest donor rows.
///
/// Distances are taken in the z-scored space of every other column (NaN
/// where missing). Ties break toward the lower row index. When there are
/// more than `donor_cap` donors, each missing row draws its own uniform
/// subset from a stream keyed by `(seed, row)`.
pub fn knn_impute(table: &ColumnTable, target_column: &str, cfg: &KnnImputeConfig) -> Result<ColumnTable> {
    let target_idx = table.require(target_column)?;
    if cfg.k == 0 || cfg.donor_cap < cfg.k {
        return Err(Error::Config(format!(
            "invalid KNN config: k = {}, donor_cap = {}",
            cfg.k, cfg.donor_cap
        )));
    }
    let target_mask = table.mask_at(target_idx);
    let queries: Vec<usize> = (0..table.n_rows()).filter(|&r| target_mask[r]).collect();
    if queries.is_empty() {
        return Ok(table.clone());
    }
    let donors: Vec<usize> = (0..table.n_rows()).filter(|&r| !target_mask[r]).collect();
    if donors.len() < cfg.k {
        return Err(Error::ImputationInfeasible {
            column: target_column.to_string(),
            donors: donors.len(),
            k: cfg.k,
        });
    }

    let feature_cols: Vec<usize> = (0..table.n_cols()).filter(|&c| c != target_idx).collect();
    let z: Vec<Vec<f64>> = feature_cols
        .iter()
        .map(|&c| {
            let (mean, std, _) = present_stats(table.column_at(c), table.mask_at(c));
            let scale = if std < STD_FLOOR { 1.0 } else { std };
            table
                .column_at(c)
                .iter()
                .zip(table.mask_at(c))
                .map(|(v, m)| if *m { f64::NAN } else { (v - mean) / scale })
                .collect()
        })
        .collect();
    let row = |r: usize| -> Vec<f64> { z.iter().map(|col| col[r]).collect() };
    let target = table.column_at(target_idx);

    let imputed = par::map_slice(&queries, |&q| {
        let qrow = row(q);
        let pool: Vec<usize> = if donors.len() > cfg.donor_cap {
            let mut rng = rng::rng_from(rng::keyed(cfg.seed, q as u64));
            let mut picked: Vec<usize> = index::sample(&mut rng, donors.len(), cfg.donor_cap)
                .into_iter()
                .map(|i| donors[i])
                .collect();
            picked.sort_unstable();
            picked
        } else {
            donors.clone()
        };
        let mut scored: Vec<(f64, usize)> = pool
            .iter()
            .map(|&d| (nan_euclidean(&qrow, &row(d)), d))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let sum: f64 = scored[..cfg.k].iter().map(|&(_, d)| target[d]).sum();
        sum / cfg.k as f64
    });

    let mut values = target.to_vec();
    for (&q, v) in queries.iter().zip(imputed) {
        values[q] = v;
    }
    let mut out = table.clone();
    out.set_column_at(target_idx, values)?;
    Ok(out)
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `[Q1 - m·IQR, Q3 + m·IQR]` for one column.
pub fn iqr_bounds(values: &[f64], multiplier: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    (q1 - multiplier * iqr, q3 + multiplier * iqr)
}

/// Removes IQR outliers in `columns`, rows outside the spatial rectangle and
/// rows with fare below `min_fare`. Quantiles come from the pre-filter data.
pub fn iqr_filter(
    table: &ColumnTable,
    columns: &[&str],
    cfg: &IqrFilterConfig,
) -> Result<(ColumnTable, RemovalReport)> {
    cfg.validate()?;
    let n = table.n_rows();
    let mut bounds = Vec::with_capacity(columns.len());
    for name in columns {
        let idx = table.require(name)?;
        if table.mask_at(idx).iter().any(|m| *m) {
            return Err(Error::Data(format!("IQR column `{name}` has missing values")));
        }
        if n < 4 {
            return Err(Error::QuantileUndefined {
                column: name.to_string(),
                n,
            });
        }
        bounds.push((idx, iqr_bounds(table.column_at(idx), cfg.multiplier)));
    }
    let lat_cols: Vec<usize> = [PICKUP_LATITUDE, DROPOFF_LATITUDE]
        .iter()
        .filter_map(|c| table.index_of(c))
        .collect();
    let lon_cols: Vec<usize> = [PICKUP_LONGITUDE, DROPOFF_LONGITUDE]
        .iter()
        .filter_map(|c| table.index_of(c))
        .collect();
    let fare_col = table.index_of(FARE_AMOUNT);

    let mut report = RemovalReport::default();
    let mut keep = vec![true; n];
    for (r, k) in keep.iter_mut().enumerate() {
        let iqr_fail = bounds.iter().any(|&(c, (lo, hi))| {
            let v = table.column_at(c)[r];
            v < lo || v > hi
        });
        // Missing coordinates or fares are not judged here.
        let bounds_fail = lat_cols.iter().any(|&c| {
            !table.is_missing(c, r) && !cfg.spatial_bounds.contains_lat(table.column_at(c)[r])
        }) || lon_cols.iter().any(|&c| {
            !table.is_missing(c, r) && !cfg.spatial_bounds.contains_lon(table.column_at(c)[r])
        });
        let fare_fail = fare_col
            .is_some_and(|c| !table.is_missing(c, r) && table.column_at(c)[r] < cfg.min_fare);
        if iqr_fail {
            report.iqr_removed += 1;
        } else if bounds_fail {
            report.bounds_removed += 1;
        } else if fare_fail {
            report.fare_removed += 1;
        }
        *k = !(iqr_fail || bounds_fail || fare_fail);
    }
    let out = table.filter_rows(&keep);
    report.rows_remaining = out.n_rows();
    Ok((out, report))
}

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> Result<f64> {
    if ![lat1, lon1, lat2, lon2].iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite coordinate in ({lat1}, {lon1}) -> ({lat2}, {lon2})"
        )));
    }
    let phi1 = lat1.to_radians();
    let phi2 = lat2.to_radians();
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin())
}

/// Hour, Monday-based weekday and month of a timestamp.
pub fn extract_temporal(ts: &NaiveDateTime) -> (u32, u32, u32) {
    (ts.hour(), ts.weekday().num_days_from_monday(), ts.month())
}

pub fn engineered_features(ts: &NaiveDateTime, pickup: (f64, f64), dropoff: (f64, f64)) -> Result<EngineeredFeatures> {
    let (hour_of_day, day_of_week, month) = extract_temporal(ts);
    Ok(EngineeredFeatures {
        hour_of_day,
        day_of_week,
        month,
        haversine_km: haversine_km(pickup.0, pickup.1, dropoff.0, dropoff.1)?,
    })
}

/// Recomputes `haversine_km` from the coordinate columns.
pub fn add_haversine(table: &mut ColumnTable) -> Result<()> {
    let plat = table.column(PICKUP_LATITUDE)?;
    let plon = table.column(PICKUP_LONGITUDE)?;
    let dlat = table.column(DROPOFF_LATITUDE)?;
    let dlon = table.column(DROPOFF_LONGITUDE)?;
    let d = (0..table.n_rows())
        .map(|r| haversine_km(plat[r], plon[r], dlat[r], dlon[r]))
        .collect::<Result<Vec<_>>>()?;
    table.upsert_column(HAVERSINE_KM, d)
}

/// Adds hour/day-of-week/month (from Unix-second timestamps) and Haversine
/// distance columns. Requires a complete timestamp and coordinate set.
pub fn add_engineered_features(table: &mut ColumnTable) -> Result<()> {
    let ts = table.column(PICKUP_DATETIME)?;
    let mut hour = Vec::with_capacity(ts.len());
    let mut dow = Vec::with_capacity(ts.len());
    let mut month = Vec::with_capacity(ts.len());
    for &t in ts {
        let dt = DateTime::from_timestamp(t as i64, 0)
            .ok_or_else(|| Error::Data(format!("invalid timestamp {t}")))?
            .naive_utc();
        let (h, d, m) = extract_temporal(&dt);
        hour.push(f64::from(h));
        dow.push(f64::from(d));
        month.push(f64::from(m));
    }
    table.upsert_column(HOUR_OF_DAY, hour)?;
    table.upsert_column(DAY_OF_WEEK, dow)?;
    table.upsert_column(MONTH, month)?;
    add_haversine(table)
}

/// Normalization statistics keyed by column name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub columns: Vec<String>,
    pub stats: Vec<ColumnStats>,
}

impl NormStats {
    pub fn get(&self, name: &str) -> Option<&ColumnStats> {
        self.columns.iter().position(|c| c == name).map(|i| &self.stats[i])
    }

    /// Columns passed through unscaled because their training std was ~0.
    pub fn flagged(&self) -> Vec<&str> {
        self.columns
            .iter()
            .zip(&self.stats)
            .filter(|(_, s)| s.constant)
            .map(|(c, _)| c.as_str())
            .collect()
    }
}

/// Population mean/std of every column over `train_rows`.
pub fn fit_normalizer(table: &ColumnTable, train_rows: &[usize]) -> Result<NormStats> {
    if train_rows.is_empty() {
        return Err(Error::Fit("normalizer needs at least one training row".into()));
    }
    let stats = (0..table.n_cols())
        .map(|c| {
            let col = table.column_at(c);
            let mask = table.mask_at(c);
            let vals: Vec<f64> = train_rows.iter().filter(|&&r| !mask[r]).map(|&r| col[r]).collect();
            let ones = vec![false; vals.len()];
            let (mean, std, _) = present_stats(&vals, &ones);
            ColumnStats {
                mean,
                std,
                constant: std < STD_FLOOR,
            }
        })
        .collect();
    Ok(NormStats {
        columns: table.names().to_vec(),
        stats,
    })
}

/// `(x - mean) / std` for every column present in `stats`; flagged columns
/// pass through unchanged.
pub fn apply_normalizer(table: &ColumnTable, stats: &NormStats) -> Result<ColumnTable> {
    map_normalized(table, stats, |v, s| (v - s.mean) / s.std)
}

pub fn denormalize(table: &ColumnTable, stats: &NormStats) -> Result<ColumnTable> {
    let mut out = map_normalized(table, stats, |v, s| v * s.std + s.mean)?;
    out.norm_stats = None;
    Ok(out)
}

fn map_normalized(
    table: &ColumnTable,
    stats: &NormStats,
    f: impl Fn(f64, &ColumnStats) -> f64,
) -> Result<ColumnTable> {
    let mut out = table.clone();
    let mut applied = Vec::with_capacity(table.n_cols());
    for c in 0..table.n_cols() {
        let name = &table.names()[c];
        match stats.get(name) {
            Some(s) if !s.constant => {
                let vals = table
                    .column_at(c)
                    .iter()
                    .zip(table.mask_at(c))
                    .map(|(v, m)| if *m { f64::NAN } else { f(*v, s) })
                    .collect();
                out.set_column_at(c, vals)?;
                applied.push(*s);
            }
            Some(s) => applied.push(*s),
            None => applied.push(ColumnStats {
                mean: 0.0,
                std: 1.0,
                constant: true,
            }),
        }
    }
    out.norm_stats = Some(applied);
    Ok(out)
}

/// Inverse transform of a single normalized value.
pub fn denormalize_value(v: f64, s: &ColumnStats) -> f64 {
    if s.constant {
        v
    } else {
        v * s.std + s.mean
    }
}

pub fn normalize_value(v: f64, s: &ColumnStats) -> f64 {
    if s.constant {
        v
    } else {
        (v - s.mean) / s.std
    }
}

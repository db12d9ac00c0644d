//! Seeded synthetic data: a realistic raw trip file, a deterministic fare
//! function and a low-rank feature benchmark for the denoiser.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};

use crate::dataset::{ColumnTable, TRIP_COLUMNS};
use crate::error::{Error, Result};
use crate::preprocess::haversine_km;
use crate::rng;

/// Pickup/dropoff clusters: (lat, lon, spread in degrees, weight).
const HOTSPOTS: [(f64, f64, f64, f64); 8] = [
    (40.7549, -73.9840, 0.010, 0.30), // Midtown
    (40.7150, -74.0080, 0.008, 0.14), // Downtown
    (40.7736, -73.9566, 0.008, 0.14), // Upper East Side
    (40.7870, -73.9754, 0.008, 0.10), // Upper West Side
    (40.7265, -73.9815, 0.007, 0.10), // East Village
    (40.6900, -73.9600, 0.015, 0.08), // Brooklyn
    (40.6450, -73.7850, 0.003, 0.07), // JFK
    (40.7740, -73.8720, 0.002, 0.07), // LaGuardia
];
const JFK: usize = 6;
const JFK_FLAT_FARE: f64 = 52.0;

/// Relative trip rate by hour of day.
const HOURLY_RATE: [f64; 24] = [
    0.55, 0.40, 0.30, 0.22, 0.18, 0.22, 0.45, 0.80, 1.00, 1.00, 0.95, 0.95, //
    1.00, 1.00, 1.00, 1.05, 1.10, 1.20, 1.35, 1.40, 1.30, 1.20, 1.05, 0.80,
];

fn pick_hotspot(r: &mut ChaCha8Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, h) in HOTSPOTS.iter().enumerate() {
        acc += h.3;
        if u < acc {
            return i;
        }
    }
    HOTSPOTS.len() - 1
}

fn point_near(r: &mut ChaCha8Rng, spot: usize) -> (f64, f64) {
    let (lat, lon, sd, _) = HOTSPOTS[spot];
    let z1: f64 = StandardNormal.sample(r);
    let z2: f64 = StandardNormal.sample(r);
    (lat + sd * z1, lon + sd * 1.3 * z2)
}

fn passenger_count(r: &mut ChaCha8Rng) -> u32 {
    let u: f64 = r.random();
    match u {
        u if u < 0.70 => 1,
        u if u < 0.84 => 2,
        u if u < 0.88 => 3,
        u if u < 0.90 => 4,
        u if u < 0.96 => 5,
        _ => 6,
    }
}

fn metered_fare(km: f64, ts: &NaiveDateTime, congestion: f64, r: &mut ChaCha8Rng) -> f64 {
    let h = ts.hour();
    let street_km = km * 1.3;
    let minutes = street_km / (18.0 / congestion) * 60.0;
    let mut fare = 2.5 + 1.55 * street_km + 0.3 * minutes;
    if h >= 20 || h < 6 {
        fare += 0.5;
    }
    if (16..20).contains(&h) {
        fare += 1.0;
    }
    fare *= 1.0 + 0.03 * Normal::new(0.0, 1.0).expect("unit normal").sample(r);
    // Meters tick in fifty-cent steps.
    ((fare * 2.0).round() / 2.0).max(2.5)
}

/// Clean synthetic trip records in pickup-time order.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrip {
    pub pickup: NaiveDateTime,
    pub pickup_lat: f64,
    pub pickup_lon: f64,
    pub dropoff_lat: f64,
    pub dropoff_lon: f64,
    pub passengers: u32,
    pub fare: f64,
}

/// `n` trips over consecutive days starting 2015-01-05, with an hour-of-day
/// arrival rate, clustered locations, a slowly varying congestion level and
/// metered fares (flat fare between JFK and Manhattan).
pub fn generate_trips(n: usize, seed: u64) -> Vec<SyntheticTrip> {
    let mut r = rng::rng_from(rng::derive_seed(seed, "synth.trips"));
    let start = NaiveDate::from_ymd_opt(2015, 1, 5)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let per_day = 1440.0;
    let mean_gap_s = 86_400.0 / per_day;
    let mut t = start;
    let mut congestion: f64 = 1.0;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let rate = HOURLY_RATE[t.hour() as usize];
        let gap: f64 = Exp::new(rate / mean_gap_s).expect("positive rate").sample(&mut r);
        t += Duration::seconds(gap.ceil() as i64);
        let shock: f64 = StandardNormal.sample(&mut r);
        congestion = (1.0 + 0.9 * (congestion - 1.0) + 0.05 * shock).clamp(0.6, 2.0);
        let rush = matches!(t.hour(), 7..=9 | 16..=19);
        let level = congestion * if rush { 1.35 } else { 1.0 };
        let ps = pick_hotspot(&mut r);
        let mut ds = pick_hotspot(&mut r);
        if ds == ps && r.random::<f64>() < 0.5 {
            ds = pick_hotspot(&mut r);
        }
        let (plat, plon) = point_near(&mut r, ps);
        let (dlat, dlon) = point_near(&mut r, ds);
        let km = haversine_km(plat, plon, dlat, dlon).expect("in-range coordinates");
        let airport_run = (ps == JFK) != (ds == JFK) && (ps.min(ds) <= 4);
        let fare = if airport_run {
            JFK_FLAT_FARE
        } else {
            metered_fare(km, &t, level, &mut r)
        };
        out.push(SyntheticTrip {
            pickup: t,
            pickup_lat: plat,
            pickup_lon: plon,
            dropoff_lat: dlat,
            dropoff_lon: dlon,
            passengers: passenger_count(&mut r),
            fare,
        });
    }
    out
}

/// Counts of the corruptions written into a raw sample file.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct CorruptionSummary {
    pub rows: usize,
    pub missing_fields: usize,
    pub zero_coordinates: usize,
    pub fare_outliers: usize,
    pub malformed_rows: usize,
}

/// Raw CSV text in the trip schema with realistic defects: `NA` and empty
/// fields, `(0, 0)` GPS fixes, implausible fares and a few malformed rows.
/// Row count excludes the header.
pub fn raw_trip_csv(n: usize, seed: u64) -> (String, CorruptionSummary) {
    let trips = generate_trips(n, seed);
    let mut r = rng::rng_from(rng::derive_seed(seed, "synth.corrupt"));
    let mut s = TRIP_COLUMNS.join(",");
    s.push('\n');
    let mut summary = CorruptionSummary {
        rows: n,
        ..Default::default()
    };
    for trip in &trips {
        let u: f64 = r.random();
        if u < 0.002 {
            summary.malformed_rows += 1;
            let line = match r.random_range(0..3) {
                0 => format!(
                    "{},{:.6},91.000000,{:.6},{:.6},1,{:.2}",
                    trip.pickup.format("%Y-%m-%d %H:%M:%S UTC"),
                    trip.pickup_lon,
                    trip.dropoff_lon,
                    trip.dropoff_lat,
                    trip.fare
                ),
                1 => format!(
                    "{},{:.6},{:.6},{:.6},{:.6},1,{:.2}",
                    trip.pickup.format("%d/%m/%Y %H:%M"),
                    trip.pickup_lon,
                    trip.pickup_lat,
                    trip.dropoff_lon,
                    trip.dropoff_lat,
                    trip.fare
                ),
                _ => format!("{},n/a,n/a,,,one,", trip.pickup.format("%Y-%m-%d %H:%M:%S UTC")),
            };
            s.push_str(&line);
            s.push('\n');
            continue;
        }
        let mut fields = vec![
            trip.pickup.format("%Y-%m-%d %H:%M:%S UTC").to_string(),
            format!("{:.6}", trip.pickup_lon),
            format!("{:.6}", trip.pickup_lat),
            format!("{:.6}", trip.dropoff_lon),
            format!("{:.6}", trip.dropoff_lat),
            trip.passengers.to_string(),
            format!("{:.2}", trip.fare),
        ];
        let u: f64 = r.random();
        if u < 0.002 {
            summary.zero_coordinates += 1;
            let base = if r.random::<bool>() { 1 } else { 3 };
            fields[base] = "0".into();
            fields[base + 1] = "0".into();
        } else if u < 0.006 {
            summary.fare_outliers += 1;
            fields[6] = match r.random_range(0..3) {
                0 => format!("{:.2}", -trip.fare),
                1 => format!("{:.2}", trip.fare * 20.0),
                _ => "0.01".into(),
            };
        }
        for f in fields.iter_mut() {
            if r.random::<f64>() < 0.002 {
                summary.missing_fields += 1;
                *f = if r.random::<bool>() { "NA".into() } else { String::new() };
            }
        }
        let _ = writeln!(s, "{}", fields.join(","));
    }
    (s, summary)
}

pub fn write_raw_trip_csv(path: &Path, n: usize, seed: u64) -> Result<CorruptionSummary> {
    let (text, summary) = raw_trip_csv(n, seed);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(summary)
}

/// Trip table whose fare is exactly `2.5 + 1.8 · haversine_km`, with pickup
/// times one minute apart.
pub fn deterministic_fare_table(n: usize, seed: u64) -> Result<ColumnTable> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut r = rng::rng_from(rng::derive_seed(seed, "synth.deterministic"));
    let t0 = 1_420_070_400.0;
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); TRIP_COLUMNS.len()];
    for i in 0..n {
        let (ps, ds) = (pick_hotspot(&mut r), pick_hotspot(&mut r));
        let (plat, plon) = point_near(&mut r, ps);
        let (dlat, dlon) = point_near(&mut r, ds);
        let fare = 2.5 + 1.8 * haversine_km(plat, plon, dlat, dlon)?;
        let row = [t0 + 60.0 * i as f64, plon, plat, dlon, dlat, f64::from(passenger_count(&mut r)), fare];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    ColumnTable::from_columns(TRIP_COLUMNS.iter().map(|s| s.to_string()).collect(), cols)
}

pub const RANK2_COLUMNS: [&str; 5] = ["f0", "f1", "f2", "f3", "f4"];

/// Five standardized-scale features driven by two latent factors:
/// `x = z A` with `z ~ N(0, I₂)` and a fixed loading matrix.
pub fn rank2_table(n: usize, seed: u64) -> Result<ColumnTable> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    const LOADINGS: [[f64; 5]; 2] = [[1.0, 0.8, -0.6, 0.3, 0.5], [0.2, -0.5, 0.7, 1.0, -0.4]];
    let mut r = rng::rng_from(rng::derive_seed(seed, "synth.rank2"));
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 5];
    for _ in 0..n {
        let z: [f64; 2] = [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)];
        for (c, col) in cols.iter_mut().enumerate() {
            col.push(z[0] * LOADINGS[0][c] + z[1] * LOADINGS[1][c]);
        }
    }
    ColumnTable::from_columns(RANK2_COLUMNS.iter().map(|s| s.to_string()).collect(), cols)
}

/// Clean raw trip CSV whose four coordinates are linear in a two-factor
/// latent, so the denoised columns have structure an autoencoder can use.
/// Arrival times and passenger counts follow [`generate_trips`]; fares are
/// `2.5 + 1.8 · haversine_km`.
pub fn rank2_trip_csv(n: usize, seed: u64) -> String {
    const CENTER: [f64; 4] = [-73.97, 40.75, -73.97, 40.75];
    const LOADINGS: [[f64; 4]; 2] = [[0.030, 0.020, -0.010, 0.010], [0.010, -0.010, 0.030, 0.025]];
    let trips = generate_trips(n, seed);
    let mut r = rng::rng_from(rng::derive_seed(seed, "synth.rank2_trips"));
    let mut s = TRIP_COLUMNS.join(",");
    s.push('\n');
    for trip in &trips {
        let z: [f64; 2] = [
            StandardNormal.sample(&mut r),
            StandardNormal.sample(&mut r),
        ];
        let z = z.map(|v: f64| v.clamp(-3.0, 3.0));
        let c: Vec<f64> = (0..4)
            .map(|j| CENTER[j] + z[0] * LOADINGS[0][j] + z[1] * LOADINGS[1][j])
            .collect();
        let km = haversine_km(c[1], c[0], c[3], c[2]).expect("in-range coordinates");
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{},{:.2}",
            trip.pickup.format("%Y-%m-%d %H:%M:%S UTC"),
            c[0],
            c[1],
            c[2],
            c[3],
            trip.passengers,
            2.5 + 1.8 * km
        );
    }
    s
}

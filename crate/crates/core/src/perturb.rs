//! Keyed Gaussian noise injection and two-sample Kolmogorov–Smirnov checks.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnTable, PASSENGER_COUNT};
use crate::error::{Error, Result};
use crate::{par, rng};

pub const KS_ALPHA: f64 = 0.05;
pub const KS_MIN_SAMPLE: usize = 8;

/// Noise at `level` times the column's clean standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub column: String,
    pub level: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub n1: usize,
    pub n2: usize,
}

/// Standard normal draw for one cell, keyed by `(seed, column, row)`.
fn cell_noise(seed: u64, column: &str, row: usize) -> f64 {
    let key = rng::keyed(seed ^ rng::label_hash(column), row as u64);
    rng::rng_from(key).sample(StandardNormal)
}

fn population_std(values: &[f64], mask: &[bool]) -> f64 {
    let present: Vec<f64> = values.iter().zip(mask).filter(|(_, m)| !**m).map(|(v, _)| *v).collect();
    moments(&present).1
}

/// Adds `N(0, (level·std)²)` to every present cell of each listed column.
///
/// The noise stream is keyed by `(seed, column label, row index)`, so the
/// result is independent of evaluation order and chunking. `passenger_count`
/// is rounded to the nearest non-negative integer afterwards.
pub fn inject_gaussian(table: &ColumnTable, specs: &[NoiseSpec]) -> Result<ColumnTable> {
    let mut out = table.clone();
    for spec in specs {
        let idx = table.require(&spec.column)?;
        if !(spec.level >= 0.0) || !spec.level.is_finite() {
            return Err(Error::Config(format!(
                "noise level for `{}` must be a non-negative number",
                spec.column
            )));
        }
        if spec.level == 0.0 {
            continue;
        }
        let clean = table.column_at(idx);
        let mask = table.mask_at(idx);
        let sigma = spec.level * population_std(clean, mask);
        let round = spec.column == PASSENGER_COUNT;
        let noisy = par::map_range(clean.len(), |r| {
            if mask[r] {
                return f64::NAN;
            }
            let v = clean[r] + sigma * cell_noise(spec.seed, &spec.column, r);
            if round {
                v.round().max(0.0)
            } else {
                v
            }
        });
        out.set_column_at(idx, noisy)?;
    }
    Ok(out)
}

/// `sup |F_a - F_b|` by a merge scan over both sorted samples.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n1 - j as f64 / n2).abs());
    }
    d
}

/// Kolmogorov survival function `Q(λ) = 2 Σ (-1)^(j-1) exp(-2 j² λ²)`.
///
/// For small λ the alternating series converges slowly, so the equivalent
/// Jacobi-theta form `1 - √(2π)/λ Σ exp(-(2j-1)² π² / (8 λ²))` is used.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.0 {
        let mut sum = 0.0;
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        for j in 1..=100u32 {
            let k = f64::from(2 * j - 1);
            let term = (-k * k * c).exp();
            sum += term;
            if term <= f64::EPSILON * sum {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * sum
    } else {
        let mut sum = 0.0;
        let mut sign = 1.0;
        for j in 1..=100u32 {
            let jf = f64::from(j);
            let term = (-2.0 * jf * jf * lambda * lambda).exp();
            sum += sign * term;
            if term <= f64::EPSILON * sum.abs() {
                break;
            }
            sign = -sign;
        }
        2.0 * sum
    };
    p.clamp(0.0, 1.0)
}

/// Asymptotic p-value of statistic `d` for sample sizes `n1`, `n2`.
pub fn ks_p_value(d: f64, n1: usize, n2: usize) -> f64 {
    let ne = (n1 * n2) as f64 / (n1 + n2) as f64;
    let sq = ne.sqrt();
    kolmogorov_survival((sq + 0.12 + 0.11 / sq) * d)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let small = a.len().min(b.len());
    if small < KS_MIN_SAMPLE {
        return Err(Error::InsufficientData {
            needed: KS_MIN_SAMPLE,
            got: small,
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("KS samples must be finite".into()));
    }
    let statistic = ks_statistic(a, b);
    let p_value = ks_p_value(statistic, a.len(), b.len());
    Ok(KsResult {
        statistic,
        p_value,
        significant: p_value < KS_ALPHA,
        n1: a.len(),
        n2: b.len(),
    })
}

/// Mean, population std and skewness `m3 / m2^{3/2}` (0 for constant data).
pub fn moments(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let skew = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    (mean, m2.sqrt(), skew)
}

pub fn skewness(values: &[f64]) -> f64 {
    moments(values).2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnPerturbation {
    pub column: String,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub significant: bool,
    pub n1: usize,
    pub n2: usize,
    pub skew_before: f64,
    pub skew_after: f64,
    pub mean_before: f64,
    pub mean_after: f64,
    pub std_before: f64,
    pub std_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    /// Where in the pipeline noise was applied.
    pub noise_units: String,
    pub alpha: f64,
    pub columns: Vec<ColumnPerturbation>,
}

impl PerturbationReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.columns {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// KS result plus before/after moments for each listed column. Only rows
/// present in both tables are compared.
pub fn perturbation_report(
    clean: &ColumnTable,
    noisy: &ColumnTable,
    columns: &[&str],
) -> Result<PerturbationReport> {
    if clean.n_rows() != noisy.n_rows() {
        return Err(Error::Alignment(format!(
            "clean has {} rows, noisy has {}",
            clean.n_rows(),
            noisy.n_rows()
        )));
    }
    let columns = columns
        .iter()
        .map(|name| {
            let (c, cm) = (clean.column(name)?, clean.mask(name)?);
            let (n, nm) = (noisy.column(name)?, noisy.mask(name)?);
            let rows: Vec<usize> = (0..c.len()).filter(|&r| !cm[r] && !nm[r]).collect();
            let before: Vec<f64> = rows.iter().map(|&r| c[r]).collect();
            let after: Vec<f64> = rows.iter().map(|&r| n[r]).collect();
            let ks = ks_two_sample(&before, &after)?;
            let (mean_before, std_before, skew_before) = moments(&before);
            let (mean_after, std_after, skew_after) = moments(&after);
            Ok(ColumnPerturbation {
                column: name.to_string(),
                ks_statistic: ks.statistic,
                p_value: ks.p_value,
                significant: ks.significant,
                n1: ks.n1,
                n2: ks.n2,
                skew_before,
                skew_after,
                mean_before,
                mean_after,
                std_before,
                std_after,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationReport {
        noise_units: "original units, injected after cleaning and before normalization".into(),
        alpha: KS_ALPHA,
        columns,
    })
}

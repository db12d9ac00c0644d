//! Regression metrics, ±tolerance accuracy, equal-frequency bin diagnostics,
//! calibration error, interval coverage and the clean/noisy/denoised
//! comparison reports.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows whose actual value is below this magnitude are excluded from the
/// relative accuracy metric.
pub const NEAR_ZERO_ACTUAL: f64 = 0.01;

pub const CALIBRATION_DEFINITION: &str =
    "mean prediction vs mean actual within equal-frequency bins of the prediction";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Clean,
    Noisy,
    Denoised,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Clean, Variant::Noisy, Variant::Denoised];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Clean => "clean",
            Variant::Noisy => "noisy",
            Variant::Denoised => "denoised",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Variant::Clean),
            "noisy" => Ok(Variant::Noisy),
            "denoised" => Ok(Variant::Denoised),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected clean, noisy or denoised)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    InDistribution,
    Ood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// `None` when the actual values are constant.
    pub r2: Option<f64>,
}

fn check_pair(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.len() != actual.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} actual values",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("no predictions to evaluate".into()));
    }
    Ok(())
}

pub fn regression_metrics(pred: &[f64], actual: &[f64]) -> Result<RegressionMetrics> {
    check_pair(pred, actual)?;
    let n = pred.len() as f64;
    let mae = pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / n;
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    let mse = ss_res / n;
    Ok(RegressionMetrics {
        mae,
        mse,
        rmse: mse.sqrt(),
        r2: (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// `None` when every row was excluded.
    pub accuracy: Option<f64>,
    pub excluded: usize,
}

/// Fraction of rows with `|pred - actual| <= tol * |actual|`, ignoring rows
/// whose actual value is below [`NEAR_ZERO_ACTUAL`] in magnitude.
pub fn custom_accuracy(pred: &[f64], actual: &[f64], tol: f64) -> Result<Accuracy> {
    check_pair(pred, actual)?;
    let mut hit = 0usize;
    let mut used = 0usize;
    for (p, a) in pred.iter().zip(actual) {
        if a.abs() < NEAR_ZERO_ACTUAL {
            continue;
        }
        used += 1;
        if (p - a).abs() <= tol * a.abs() {
            hit += 1;
        }
    }
    Ok(Accuracy {
        accuracy: (used > 0).then(|| hit as f64 / used as f64),
        excluded: pred.len() - used,
    })
}

/// Equal-frequency bin index of every value. The upper edge of bin `b` is
/// the sorted value at position `ceil((b+1)·n/n_bins) - 1`; each value goes
/// to the first bin whose edge is `>=` it, so values tied with an edge fall
/// into the lower bin.
pub fn equal_frequency_bins(values: &[f64], n_bins: usize) -> Result<Vec<usize>> {
    if n_bins == 0 || values.len() < n_bins {
        return Err(Error::InsufficientData {
            needed: n_bins.max(1),
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("cannot bin non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let edges: Vec<f64> = (0..n_bins).map(|b| sorted[((b + 1) * n).div_ceil(n_bins) - 1]).collect();
    Ok(values
        .iter()
        .map(|v| edges.partition_point(|e| e < v).min(n_bins - 1))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinMae {
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mae: f64,
}

/// MAE within equal-frequency bins of the actual value. Bins left empty by
/// ties are omitted.
pub fn binwise_mae(pred: &[f64], actual: &[f64], n_bins: usize) -> Result<Vec<BinMae>> {
    check_pair(pred, actual)?;
    let bins = equal_frequency_bins(actual, n_bins)?;
    let mut acc = vec![(f64::INFINITY, f64::NEG_INFINITY, 0usize, 0.0); n_bins];
    for ((p, a), &b) in pred.iter().zip(actual).zip(&bins) {
        let e = &mut acc[b];
        e.0 = e.0.min(*a);
        e.1 = e.1.max(*a);
        e.2 += 1;
        e.3 += (p - a).abs();
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, e)| e.2 > 0)
        .map(|(bin, (lo, hi, count, s))| BinMae {
            bin,
            lo,
            hi,
            count,
            mae: s / count as f64,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub bin: usize,
    pub mean_pred: f64,
    pub mean_actual: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

/// `Σ count/n · |mean_pred - mean_actual|` over the bins of a curve.
pub fn ece_from_curve(bins: &[CalibrationBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    bins.iter()
        .map(|b| b.count as f64 / n as f64 * (b.mean_pred - b.mean_actual).abs())
        .sum()
}

/// Reliability curve over equal-frequency bins of the prediction.
pub fn calibration_curve(pred: &[f64], actual: &[f64], n_bins: usize) -> Result<Calibration> {
    check_pair(pred, actual)?;
    let assign = equal_frequency_bins(pred, n_bins)?;
    let mut acc = vec![(0.0, 0.0, 0usize); n_bins];
    for ((p, a), &b) in pred.iter().zip(actual).zip(&assign) {
        acc[b].0 += p;
        acc[b].1 += a;
        acc[b].2 += 1;
    }
    let bins: Vec<CalibrationBin> = acc
        .into_iter()
        .enumerate()
        .filter(|(_, e)| e.2 > 0)
        .map(|(bin, (sp, sa, count))| CalibrationBin {
            bin,
            mean_pred: sp / count as f64,
            mean_actual: sa / count as f64,
            count,
        })
        .collect();
    let ece = ece_from_curve(&bins);
    Ok(Calibration { bins, ece })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub mean_interval_width: f64,
    pub coverage_2sigma: f64,
}

/// Coverage of `mean ± 2σ` (inclusive) and the mean width `4σ`.
pub fn uncertainty_eval(mean: &[f64], variance: &[f64], actual: &[f64]) -> Result<UncertaintySummary> {
    check_pair(mean, actual)?;
    check_pair(variance, actual)?;
    if let Some(v) = variance.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("variance must be non-negative, got {v}")));
    }
    let n = mean.len() as f64;
    let mut covered = 0usize;
    let mut width = 0.0;
    for ((m, v), a) in mean.iter().zip(variance).zip(actual) {
        let s = v.sqrt();
        if (a - m).abs() <= 2.0 * s {
            covered += 1;
        }
        width += 4.0 * s;
    }
    Ok(UncertaintySummary {
        mean_interval_width: width / n,
        coverage_2sigma: covered as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_bins: usize,
    pub accuracy_tolerance: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_bins: 10,
            accuracy_tolerance: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub trained_on: Variant,
    pub dataset_variant: Variant,
    pub protocol: Protocol,
    pub n: usize,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub custom_acc_10pct: Option<f64>,
    pub custom_acc_excluded: usize,
    pub bin_mae: Vec<BinMae>,
    pub calibration: Vec<CalibrationBin>,
    pub ece: f64,
    pub calibration_definition: String,
    pub uncertainty: Option<UncertaintySummary>,
}

/// Identifies what produced a set of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportLabel {
    pub model: String,
    pub trained_on: Variant,
    pub dataset_variant: Variant,
}

impl ReportLabel {
    pub fn protocol(&self) -> Protocol {
        if self.trained_on == self.dataset_variant {
            Protocol::InDistribution
        } else {
            Protocol::Ood
        }
    }
}

pub fn evaluate(
    label: &ReportLabel,
    pred: &[f64],
    actual: &[f64],
    variance: Option<&[f64]>,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let m = regression_metrics(pred, actual)?;
    let acc = custom_accuracy(pred, actual, cfg.accuracy_tolerance)?;
    let bin_mae = binwise_mae(pred, actual, cfg.n_bins)?;
    let cal = calibration_curve(pred, actual, cfg.n_bins)?;
    let uncertainty = variance.map(|v| uncertainty_eval(pred, v, actual)).transpose()?;
    Ok(EvalReport {
        model: label.model.clone(),
        trained_on: label.trained_on,
        dataset_variant: label.dataset_variant,
        protocol: label.protocol(),
        n: pred.len(),
        mae: m.mae,
        mse: m.mse,
        rmse: m.rmse,
        r2: m.r2,
        custom_acc_10pct: acc.accuracy,
        custom_acc_excluded: acc.excluded,
        bin_mae,
        calibration: cal.bins,
        ece: cal.ece,
        calibration_definition: CALIBRATION_DEFINITION.to_string(),
        uncertainty,
    })
}

/// Predictions and actual values for one test variant.
#[derive(Debug, Clone, Copy)]
pub struct VariantPredictions<'a> {
    pub pred: &'a [f64],
    pub actual: &'a [f64],
    pub variance: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub r2: Option<f64>,
    pub custom_acc_10pct: Option<f64>,
    pub ece: f64,
}

impl MetricDeltas {
    pub fn between(to: &EvalReport, from: &EvalReport) -> Self {
        let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
        Self {
            mae: to.mae - from.mae,
            mse: to.mse - from.mse,
            rmse: to.rmse - from.rmse,
            r2: diff(to.r2, from.r2),
            custom_acc_10pct: diff(to.custom_acc_10pct, from.custom_acc_10pct),
            ece: to.ece - from.ece,
        }
    }
}

/// Clean, noisy and denoised test reports of one clean-trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodComparison {
    pub model: String,
    pub reports: Vec<EvalReport>,
    pub noisy_minus_clean: MetricDeltas,
    pub denoised_minus_clean: MetricDeltas,
}

/// Evaluates a clean-trained model once per test variant and records the
/// metric shifts relative to the clean test set.
pub fn ood_protocol(
    model: &str,
    clean: VariantPredictions<'_>,
    noisy: VariantPredictions<'_>,
    denoised: VariantPredictions<'_>,
    cfg: &EvalConfig,
) -> Result<OodComparison> {
    let n = clean.pred.len();
    for (v, p) in [(Variant::Noisy, &noisy), (Variant::Denoised, &denoised)] {
        if p.pred.len() != n || p.actual.len() != n {
            return Err(Error::Alignment(format!(
                "{v} test set has {} rows, clean has {n}",
                p.pred.len()
            )));
        }
    }
    let mut reports = Vec::with_capacity(3);
    for (variant, p) in [(Variant::Clean, clean), (Variant::Noisy, noisy), (Variant::Denoised, denoised)] {
        let label = ReportLabel {
            model: model.to_string(),
            trained_on: Variant::Clean,
            dataset_variant: variant,
        };
        reports.push(evaluate(&label, p.pred, p.actual, p.variance, cfg)?);
    }
    Ok(OodComparison {
        model: model.to_string(),
        noisy_minus_clean: MetricDeltas::between(&reports[1], &reports[0]),
        denoised_minus_clean: MetricDeltas::between(&reports[2], &reports[0]),
        reports,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_calibration_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut s = String::from("bin,mean_pred,mean_actual,count\n");
    for b in &report.calibration {
        s.push_str(&format!("{},{},{},{}\n", b.bin, b.mean_pred, b.mean_actual, b.count));
    }
    write_text(path, &s)
}

pub fn write_bin_mae_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut s = String::from("bin,lo,hi,count,mae\n");
    for b in &report.bin_mae {
        s.push_str(&format!("{},{},{},{},{}\n", b.bin, b.lo, b.hi, b.count, b.mae));
    }
    write_text(path, &s)
}

pub fn write_uncertainty_csv(mean: &[f64], variance: &[f64], actual: &[f64], path: &Path) -> Result<()> {
    let mut s = String::from("row,mean,std,actual\n");
    for (i, ((m, v), a)) in mean.iter().zip(variance).zip(actual).enumerate() {
        s.push_str(&format!("{i},{m},{},{a}\n", v.sqrt()));
    }
    write_text(path, &s)
}

pub const COMPARISON_HEADER: &str =
    "model,variant,n,mae,mse,rmse,r2,custom_acc_10pct,ece,coverage_2sigma,mean_interval_width";

fn comparison_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.model,
        r.dataset_variant,
        r.n,
        r.mae,
        r.mse,
        r.rmse,
        opt(r.r2),
        opt(r.custom_acc_10pct),
        r.ece,
        opt(r.uncertainty.map(|u| u.coverage_2sigma)),
        opt(r.uncertainty.map(|u| u.mean_interval_width)),
    )
}

/// One row per in-distribution (model, variant) report, in the given order.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{COMPARISON_HEADER}\n");
    for r in reports.iter().filter(|r| r.protocol == Protocol::InDistribution) {
        s.push_str(&comparison_row(r));
        s.push('\n');
    }
    s
}

/// One row per clean-trained model and test variant, with deltas against
/// the clean test set.
pub fn ood_comparison_csv(comparisons: &[OodComparison]) -> String {
    let mut s = format!("{COMPARISON_HEADER},delta_mae,delta_mse,delta_r2\n");
    for c in comparisons {
        for r in &c.reports {
            let d = match r.dataset_variant {
                Variant::Clean => None,
                Variant::Noisy => Some(c.noisy_minus_clean),
                Variant::Denoised => Some(c.denoised_minus_clean),
            };
            s.push_str(&format!(
                "{},{},{},{}\n",
                comparison_row(r),
                opt(d.map(|d| d.mae)),
                opt(d.map(|d| d.mse)),
                opt(d.and_then(|d| d.r2)),
            ));
        }
    }
    s
}

//! Period-folding temporal regressor over sliding windows of trips.
//!
//! Each block detects a dominant period `p` from the channel-averaged FFT
//! amplitude of its input window, folds the zero-padded sequence into a
//! `segments x p` grid per channel, mixes along the segment axis and then
//! along the period axis (with tanh), unfolds, and adds the result back as a
//! residual. Dense mixing stands in for 2-D convolution.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor2, Var};
use crate::dataset::{ColumnTable, PICKUP_DATETIME};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Dense, Mode, Model, ParamId, Params, TrainConfig, TrainHistory};
use crate::{par, rng};

pub const WINDOW_LEN: usize = 10;

/// Sliding windows over a time-ordered table, stored flat as
/// `n_windows x window_len x n_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    pub window_len: usize,
    pub n_features: usize,
    pub windows: Vec<f64>,
    pub targets: Vec<f64>,
    /// Source row of each window's target.
    pub end_rows: Vec<usize>,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Window `i` as a `window_len x n_features` matrix.
    pub fn window(&self, i: usize) -> Tensor2 {
        let sz = self.window_len * self.n_features;
        Tensor2::new(self.window_len, self.n_features, self.windows[i * sz..(i + 1) * sz].to_vec())
            .expect("sized buffer")
    }

    /// Appends `other`'s windows; shapes must agree.
    pub fn concat(&self, other: &WindowDataset) -> Result<WindowDataset> {
        if (self.window_len, self.n_features) != (other.window_len, other.n_features) {
            return Err(Error::Contract("window datasets have different shapes".into()));
        }
        let mut out = self.clone();
        out.windows.extend_from_slice(&other.windows);
        out.targets.extend_from_slice(&other.targets);
        out.end_rows.extend_from_slice(&other.end_rows);
        Ok(out)
    }
}

/// Rows reordered by pickup time; ties keep their original order.
pub fn sort_by_time(table: &ColumnTable) -> Result<(ColumnTable, Vec<usize>)> {
    let t = table.column(PICKUP_DATETIME)?;
    let mut order: Vec<usize> = (0..table.n_rows()).collect();
    order.sort_by(|&a, &b| t[a].total_cmp(&t[b]));
    Ok((table.select_rows(&order), order))
}

/// Window `i` covers rows `[i, i + window_len)` of `feature_columns`; its
/// target is `target_column` at row `i + window_len`. When the table has a
/// pickup time column it must already be sorted by it.
pub fn make_windows(
    table: &ColumnTable,
    feature_columns: &[&str],
    target_column: &str,
    window_len: usize,
) -> Result<WindowDataset> {
    if window_len < 2 {
        return Err(Error::Config("window length must be at least 2".into()));
    }
    let n = table.n_rows();
    if n <= window_len {
        return Err(Error::InsufficientData {
            needed: window_len + 1,
            got: n,
        });
    }
    if let Ok(t) = table.column(PICKUP_DATETIME) {
        if t.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Contract("table must be sorted by pickup time".into()));
        }
    }
    let f = feature_columns.len();
    let rows = table.row_major(feature_columns)?;
    let target = table.column(target_column)?;
    let n_windows = n - window_len;
    let sz = window_len * f;
    let parts = par::map_range(n_windows, |i| rows[i * f..i * f + sz].to_vec());
    Ok(WindowDataset {
        window_len,
        n_features: f,
        windows: parts.concat(),
        targets: target[window_len..].to_vec(),
        end_rows: (window_len..n).collect(),
    })
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// `|X_f|` for `f = 1..=len/2` of a real sequence.
pub fn amplitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n).process(&mut buf));
    buf[1..=n / 2].iter().map(|c| c.norm()).collect()
}

/// Period from an amplitude spectrum indexed from frequency 1. The peak
/// frequency `f` gives `round(len / f)`; ties go to the lower frequency. A
/// spectrum that is negligible against `scale` gives `len / 2`.
pub fn period_from_spectrum(amplitude: &[f64], len: usize, scale: f64) -> usize {
    let fallback = (len / 2).max(2);
    let mut best = 0;
    for (k, &a) in amplitude.iter().enumerate() {
        if a > amplitude[best] {
            best = k;
        }
    }
    match amplitude.get(best) {
        Some(&a) if a > 1e-10 * scale => {
            let f = (best + 1) as f64;
            ((len as f64 / f).round() as usize).clamp(2, len)
        }
        _ => fallback,
    }
}

/// Dominant period of one channel.
pub fn dominant_period(window: &[f64]) -> usize {
    let scale = window.iter().map(|v| v.abs()).sum::<f64>();
    period_from_spectrum(&amplitude_spectrum(window), window.len(), scale)
}

/// Block-level period of a `len x channels` window: the peak of the
/// channel-averaged amplitude spectrum.
pub fn block_period(window: &Tensor2) -> usize {
    let (len, ch) = window.shape();
    let mut avg = vec![0.0; len / 2];
    let mut column = vec![0.0; len];
    let mut scale = 0.0;
    for c in 0..ch {
        for (t, v) in column.iter_mut().enumerate() {
            *v = window.get(t, c);
            scale += v.abs();
        }
        for (a, s) in avg.iter_mut().zip(amplitude_spectrum(&column)) {
            *a += s / ch as f64;
        }
    }
    period_from_spectrum(&avg, len, scale / ch.max(1) as f64)
}

pub fn n_segments(len: usize, p: usize) -> usize {
    len.div_ceil(p)
}

/// Flat source index for each cell of the folded layout. Rows run over
/// `(window, channel, phase)` and columns over segments; cell `(b, c, q), j`
/// reads time step `j·p + q` of channel `c` in window `b`, or padding.
pub fn fold_index(n_windows: usize, len: usize, channels: usize, p: usize) -> Vec<Option<usize>> {
    let s = n_segments(len, p);
    let mut idx = Vec::with_capacity(n_windows * channels * p * s);
    for b in 0..n_windows {
        for c in 0..channels {
            for q in 0..p {
                for j in 0..s {
                    let t = j * p + q;
                    idx.push((t < len).then(|| (b * len + t) * channels + c));
                }
            }
        }
    }
    idx
}

/// Swaps the last two axes of a `(n·channels, a, b)` layout: rows
/// `(n, c, x)` by columns `y` becomes rows `(n, c, y)` by columns `x`.
pub fn swap_index(groups: usize, a: usize, b: usize) -> Vec<Option<usize>> {
    let mut idx = Vec::with_capacity(groups * a * b);
    for g in 0..groups {
        for y in 0..b {
            for x in 0..a {
                idx.push(Some((g * a + x) * b + y));
            }
        }
    }
    idx
}

/// Inverse of [`fold_index`] after [`swap_index`]: reads the
/// `(window, channel, segment) x phase` layout back into time-major rows,
/// dropping padding.
pub fn unfold_index(n_windows: usize, len: usize, channels: usize, p: usize) -> Vec<Option<usize>> {
    let s = n_segments(len, p);
    let mut idx = Vec::with_capacity(n_windows * len * channels);
    for b in 0..n_windows {
        for t in 0..len {
            for c in 0..channels {
                let (j, q) = (t / p, t % p);
                idx.push(Some(((b * channels + c) * s + j) * p + q));
            }
        }
    }
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsLiteConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub dropout: f64,
    pub window_len: usize,
}

impl Default for TsLiteConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_blocks: 2,
            dropout: 0.3,
            window_len: WINDOW_LEN,
        }
    }
}

/// Mixing weights of one block, indexed by period.
#[derive(Debug, Clone, PartialEq)]
pub struct TimesBlockLite {
    pub segment_mix: BTreeMap<usize, ParamId>,
    pub period_mix: BTreeMap<usize, ParamId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsLiteModel {
    pub config: TsLiteConfig,
    pub seed: u64,
    pub n_features: usize,
    embed: Dense,
    blocks: Vec<TimesBlockLite>,
    head: Dense,
    params: Params,
}

impl TsLiteModel {
    pub fn new(n_features: usize, config: TsLiteConfig, seed: u64) -> Result<Self> {
        if n_features == 0 || config.d_model == 0 || config.window_len < 2 {
            return Err(Error::Config("tslite needs features, d_model > 0 and window_len ≥ 2".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        let mut params = Params::new();
        let mut r = rng::rng_from(rng::derive_seed(seed, "tslite.init"));
        let embed = Dense::new(&mut params, "embed", n_features, config.d_model, Activation::Identity, &mut r);
        let len = config.window_len;
        let blocks = (0..config.n_blocks)
            .map(|b| {
                let mut segment_mix = BTreeMap::new();
                let mut period_mix = BTreeMap::new();
                for p in 2..=len {
                    let s = n_segments(len, p);
                    segment_mix.insert(p, params.add(format!("block{b}.p{p}.segment"), nn::xavier_uniform(s, s, &mut r)));
                    period_mix.insert(p, params.add(format!("block{b}.p{p}.period"), nn::xavier_uniform(p, p, &mut r)));
                }
                TimesBlockLite { segment_mix, period_mix }
            })
            .collect();
        let head = Dense::new(&mut params, "head", config.d_model, 1, Activation::Identity, &mut r);
        Ok(Self {
            config,
            seed,
            n_features,
            embed,
            blocks,
            head,
            params,
        })
    }

    pub fn head(&self) -> Dense {
        self.head
    }

    pub fn set_params(&mut self, params: Params) -> Result<()> {
        if params.names() != self.params.names()
            || params.tensors().iter().zip(self.params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Contract("parameter layout does not match the architecture".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Block transform for windows sharing period `p`; `h` is their
    /// `(n·len) x d` input and the output has the same shape.
    fn block_group(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        block: &TimesBlockLite,
        h: Var,
        n: usize,
        p: usize,
    ) -> std::result::Result<Var, AutodiffError> {
        let (len, d) = (self.config.window_len, self.config.d_model);
        let s = n_segments(len, p);
        let folded = tape.gather(h, fold_index(n, len, d, p), n * d * p, s)?;
        let mixed = tape.matmul(folded, vars[block.segment_mix[&p].0])?;
        let swapped = tape.gather(mixed, swap_index(n * d, p, s), n * d * s, p)?;
        let mixed = tape.matmul(swapped, vars[block.period_mix[&p].0])?;
        let mixed = tape.tanh(mixed)?;
        tape.gather(mixed, unfold_index(n, len, d, p), n * len, d)
    }

    /// Predictions (`n x 1`) for windows `items` of `data`.
    pub fn forward_windows(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        data: &WindowDataset,
        items: &[usize],
        mode: Mode,
    ) -> std::result::Result<Var, AutodiffError> {
        let (len, d) = (self.config.window_len, self.config.d_model);
        if data.n_features != self.n_features || data.window_len != len {
            return Err(AutodiffError::Shape {
                op: "tslite_forward",
                left: (data.window_len, data.n_features),
                right: (len, self.n_features),
            });
        }
        let n = items.len();
        let sz = len * data.n_features;
        let mut x = Vec::with_capacity(n * sz);
        for &i in items {
            x.extend_from_slice(&data.windows[i * sz..(i + 1) * sz]);
        }
        let x = tape.constant(Tensor2::new(n * len, data.n_features, x)?);
        let mut h = self.embed.forward(tape, vars, x)?;
        for (bi, block) in self.blocks.iter().enumerate() {
            let hv = tape.value(h);
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for b in 0..n {
                let w = Tensor2::new(len, d, hv.data()[b * len * d..(b + 1) * len * d].to_vec())?;
                groups.entry(block_period(&w)).or_default().push(b);
            }
            let mut out: Option<Var> = None;
            for (&p, members) in &groups {
                let rows: Vec<usize> = members.iter().flat_map(|&b| b * len..(b + 1) * len).collect();
                let hg = tape.gather_rows(h, &rows)?;
                let g = self.block_group(tape, vars, block, hg, members.len(), p)?;
                let g = tape.scatter_add_rows(g, rows, n * len)?;
                out = Some(match out {
                    Some(acc) => tape.add(acc, g)?,
                    None => g,
                });
            }
            let out = out.expect("non-empty batch");
            let seed = mode.seed_for(&format!("tslite.block{bi}"));
            let out = tape.dropout(out, self.config.dropout, seed, mode.is_train())?;
            h = tape.add(h, out)?;
        }
        let pooled = tape.scatter_add_rows(h, (0..n * len).map(|r| r / len).collect(), n)?;
        let pooled = tape.scale(pooled, 1.0 / len as f64)?;
        self.head.forward(tape, vars, pooled)
    }

    /// Eval-mode predictions, parallel over batches.
    pub fn predict(&self, data: &WindowDataset, items: &[usize]) -> Result<Vec<f64>> {
        let chunks: Vec<&[usize]> = items.chunks(PREDICT_CHUNK).collect();
        let parts = par::map_slice(&chunks, |c| nn::predict(self, data, c, PREDICT_CHUNK));
        let mut out = Vec::with_capacity(items.len());
        for p in parts {
            out.extend_from_slice(p?.data());
        }
        Ok(out)
    }
}

const PREDICT_CHUNK: usize = 512;

impl Model for TsLiteModel {
    type Data = WindowDataset;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        data: &WindowDataset,
        items: &[usize],
        mode: Mode,
    ) -> std::result::Result<Var, AutodiffError> {
        self.forward_windows(tape, vars, data, items, mode)
    }

    fn targets(&self, data: &WindowDataset, items: &[usize]) -> Tensor2 {
        Tensor2::column(items.iter().map(|&i| data.targets[i]).collect())
    }
}

/// Trains on `train` and early-stops on `val`.
pub fn fit_tslite(
    train: &WindowDataset,
    val: &WindowDataset,
    ts_cfg: &TsLiteConfig,
    cfg: &TrainConfig,
) -> Result<(TsLiteModel, TrainHistory)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: train.len().min(val.len()),
        });
    }
    let all = train.concat(val)?;
    let train_items: Vec<usize> = (0..train.len()).collect();
    let val_items: Vec<usize> = (train.len()..all.len()).collect();
    let mut model = TsLiteModel::new(train.n_features, ts_cfg.clone(), cfg.seed)?;
    let history = nn::train(&mut model, &all, &train_items, &val_items, cfg)?;
    Ok((model, history))
}

/// Splits a chronological window set into leading train and trailing
/// validation parts.
pub fn chronological_split(data: &WindowDataset, val_fraction: f64) -> Result<(WindowDataset, WindowDataset)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let cut = n - n_val;
    let sz = data.window_len * data.n_features;
    let part = |lo: usize, hi: usize| WindowDataset {
        window_len: data.window_len,
        n_features: data.n_features,
        windows: data.windows[lo * sz..hi * sz].to_vec(),
        targets: data.targets[lo..hi].to_vec(),
        end_rows: data.end_rows[lo..hi].to_vec(),
    };
    Ok((part(0, cut), part(cut, n)))
}

pub fn write_predictions_csv(path: &Path, data: &WindowDataset, predictions: &[f64]) -> Result<()> {
    if predictions.len() != data.len() {
        return Err(Error::Alignment(format!(
            "{} predictions for {} windows",
            predictions.len(),
            data.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window_end_row", "prediction", "target"])?;
    for i in 0..data.len() {
        w.write_record([data.end_rows[i].to_string(), predictions[i].to_string(), data.targets[i].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

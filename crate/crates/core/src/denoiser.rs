//! Denoising autoencoder trained on (noisy, clean) row pairs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor2, Var};
use crate::dataset::ColumnTable;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Dense, Mode, Model, Params, TrainConfig, TrainHistory};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderSpec {
    pub encoder_dims: Vec<usize>,
    pub validation_fraction: f64,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self {
            encoder_dims: vec![32, 16],
            validation_fraction: 0.1,
        }
    }
}

/// Training defaults for the autoencoder: a larger step and more patience
/// than the temporal model.
pub fn default_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        max_epochs: 200,
        patience: 10,
        ..TrainConfig::default()
    };
    cfg.optimizer.learning_rate = 1e-3;
    cfg
}

/// Row-aligned noisy inputs and clean targets, `n x d` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub noisy: Tensor2,
    pub clean: Tensor2,
}

fn select_rows(t: &Tensor2, items: &[usize]) -> Tensor2 {
    let mut data = Vec::with_capacity(items.len() * t.cols());
    for &i in items {
        data.extend_from_slice(t.row(i));
    }
    Tensor2::new(items.len(), t.cols(), data).expect("sized buffer")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub columns: Vec<String>,
    pub spec: AutoencoderSpec,
    pub seed: u64,
    layers: Vec<Dense>,
    params: Params,
}

impl DenoiserModel {
    /// Layer widths `d → e1 → … → ek → … → e1 → d`, relu hidden, identity out.
    pub fn new(columns: Vec<String>, spec: AutoencoderSpec, seed: u64) -> Result<Self> {
        if columns.is_empty() || spec.encoder_dims.is_empty() || spec.encoder_dims.contains(&0) {
            return Err(Error::Config("autoencoder needs input columns and non-zero widths".into()));
        }
        let d = columns.len();
        let mut dims = vec![d];
        dims.extend(&spec.encoder_dims);
        dims.extend(spec.encoder_dims.iter().rev().skip(1));
        dims.push(d);
        let mut params = Params::new();
        let mut r = rng::rng_from(rng::derive_seed(seed, "denoiser.init"));
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Relu };
                Dense::new(&mut params, &format!("layer{i}"), w[0], w[1], act, &mut r)
            })
            .collect();
        Ok(Self {
            columns,
            spec,
            seed,
            layers,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.columns.len()
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in];
        w.extend(self.layers.iter().map(|l| l.fan_out));
        w
    }

    /// Reconstruction of a `n x d` input on an existing tape.
    pub fn reconstruct(&self, tape: &mut Tape, vars: &[Var], x: Var) -> std::result::Result<Var, AutodiffError> {
        self.layers.iter().try_fold(x, |h, l| l.forward(tape, vars, h))
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
}

impl Model for DenoiserModel {
    type Data = PairData;

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
        data: &PairData,
        items: &[usize],
        _mode: Mode,
    ) -> std::result::Result<Var, AutodiffError> {
        let x = tape.constant(select_rows(&data.noisy, items));
        self.reconstruct(tape, vars, x)
    }

    fn targets(&self, data: &PairData, items: &[usize]) -> Tensor2 {
        select_rows(&data.clean, items)
    }
}

fn complete_matrix(t: &ColumnTable, what: &str) -> Result<Tensor2> {
    if !t.is_complete() {
        return Err(Error::Data(format!("{what} table has missing values")));
    }
    let names: Vec<&str> = t.names().iter().map(String::as_str).collect();
    Ok(Tensor2::new(t.n_rows(), t.n_cols(), t.row_major(&names)?)?)
}

/// Fits the autoencoder with noisy rows as input and clean rows as target.
/// Both tables must be normalized, complete and row-aligned with identical
/// columns. A seeded `validation_fraction` of rows is held out for early
/// stopping.
pub fn fit_denoiser(
    noisy: &ColumnTable,
    clean: &ColumnTable,
    spec: &AutoencoderSpec,
    cfg: &TrainConfig,
) -> Result<(DenoiserModel, TrainHistory)> {
    if noisy.names() != clean.names() {
        return Err(Error::Alignment(format!(
            "noisy columns {:?} differ from clean columns {:?}",
            noisy.names(),
            clean.names()
        )));
    }
    if noisy.n_rows() != clean.n_rows() {
        return Err(Error::Alignment(format!(
            "noisy table has {} rows, clean has {}",
            noisy.n_rows(),
            clean.n_rows()
        )));
    }
    let n = noisy.n_rows();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    if !(0.0..1.0).contains(&spec.validation_fraction) || spec.validation_fraction == 0.0 {
        return Err(Error::Config("validation_fraction must be in (0, 1)".into()));
    }
    let data = PairData {
        noisy: complete_matrix(noisy, "noisy")?,
        clean: complete_matrix(clean, "clean")?,
    };
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(&mut rng::rng_from(rng::derive_seed(cfg.seed, "denoiser.validation")));
    let n_val = ((n as f64 * spec.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val, train) = rows.split_at(n_val);
    let mut model = DenoiserModel::new(noisy.names().to_vec(), spec.clone(), cfg.seed)?;
    let history = nn::train(&mut model, &data, train, val, cfg)?;
    Ok((model, history))
}

const DENOISE_CHUNK: usize = 4096;

/// Eval-mode reconstruction of every row. The output keeps the input's
/// columns, order and row count.
pub fn denoise(model: &DenoiserModel, noisy: &ColumnTable) -> Result<ColumnTable> {
    if noisy.names() != model.columns.as_slice() {
        return Err(Error::Contract(format!(
            "denoiser expects columns {:?}, got {:?}",
            model.columns,
            noisy.names()
        )));
    }
    let x = complete_matrix(noisy, "noisy")?;
    let data = PairData {
        clean: Tensor2::zeros(0, x.cols()),
        noisy: x,
    };
    let n = noisy.n_rows();
    let chunks: Vec<usize> = (0..n.div_ceil(DENOISE_CHUNK)).collect();
    let parts = par::map_slice(&chunks, |&c| {
        let items: Vec<usize> = (c * DENOISE_CHUNK..((c + 1) * DENOISE_CHUNK).min(n)).collect();
        nn::predict(model, &data, &items, DENOISE_CHUNK)
    });
    let d = model.input_dim();
    let mut columns = vec![Vec::with_capacity(n); d];
    for part in parts {
        let part = part?;
        for r in 0..part.rows() {
            for (c, col) in columns.iter_mut().enumerate() {
                col.push(part.get(r, c));
            }
        }
    }
    let mut out = noisy.clone();
    for (c, values) in columns.into_iter().enumerate() {
        out.set_column_at(c, values)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cols: &[(&str, Vec<f64>)]) -> ColumnTable {
        ColumnTable::from_columns(
            cols.iter().map(|c| c.0.to_string()).collect(),
            cols.iter().map(|c| c.1.clone()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn architecture_is_symmetric() {
        let m = DenoiserModel::new(vec!["a".into(), "b".into(), "c".into()], AutoencoderSpec::default(), 1).unwrap();
        assert_eq!(m.widths(), vec![3, 32, 16, 32, 3]);
    }

    #[test]
    fn misaligned_tables_are_rejected() {
        let a = table(&[("x", vec![1.0, 2.0, 3.0])]);
        let b = table(&[("y", vec![1.0, 2.0, 3.0])]);
        let cfg = default_train_config();
        assert!(matches!(
            fit_denoiser(&a, &b, &AutoencoderSpec::default(), &cfg),
            Err(Error::Alignment(_))
        ));
        let c = table(&[("x", vec![1.0, 2.0])]);
        assert!(matches!(
            fit_denoiser(&a, &c, &AutoencoderSpec::default(), &cfg),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn constant_data_is_reproduced() {
        let n = 300;
        let t = table(&[("x", vec![0.5; n]), ("y", vec![-0.25; n])]);
        let cfg = TrainConfig {
            max_epochs: 200,
            batch_size: 64,
            seed: 3,
            ..default_train_config()
        };
        let (m, _) = fit_denoiser(&t, &t, &AutoencoderSpec::default(), &cfg).unwrap();
        let out = denoise(&m, &t).unwrap();
        for (col, target) in [(0, 0.5), (1, -0.25)] {
            for v in out.column_at(col) {
                assert!((v - target).abs() < 1e-2, "{v} vs {target}");
            }
        }
        let again = denoise(&m, &t).unwrap();
        assert_eq!(out, again);
        let wrong = table(&[("y", vec![0.0; 3]), ("x", vec![0.0; 3])]);
        assert!(matches!(denoise(&m, &wrong), Err(Error::Contract(_))));
    }
}

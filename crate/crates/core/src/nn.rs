//! Layers, AdamW, gradient clipping, learning-rate plateaus, early stopping
//! and the generic training loop shared by the neural models.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Named trainable tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor2] {
        &mut self.tensors
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor2::len).sum()
    }

    /// Inserts every parameter as a trainable leaf, in order.
    pub fn attach(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites values from a flat vector laid out as [`Params::flat`].
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.count() {
            return Err(Error::Contract(format!(
                "expected {} parameter values, got {}",
                self.count(),
                values.len()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Uniform initialization in ±√(6/(fan_in+fan_out)).
pub fn xavier_uniform<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor2 {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor2::new(fan_in, fan_out, data).expect("sized buffer")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> std::result::Result<Var, AutodiffError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Fully connected layer `act(x W + b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier_uniform(fan_in, fan_out, rng));
        let bias = params.add(format!("{name}.bias"), Tensor2::zeros(1, fan_out));
        Self {
            weight,
            bias,
            activation,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> std::result::Result<Var, AutodiffError> {
        let h = tape.matmul(x, vars[self.weight.0])?;
        let h = tape.broadcast_add_row(h, vars[self.bias.0])?;
        self.activation.apply(tape, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// First and second moment accumulators.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor2]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect(),
            step: 0,
        }
    }
}

/// One AdamW update at learning rate `lr`. Weight decay is applied to the
/// parameter directly, separately from the adaptive gradient term.
pub fn adamw_step(
    params: &mut [Tensor2],
    grads: &[Tensor2],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Contract(format!(
                "adamw: parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            *w -= lr * cfg.weight_decay * *w;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor2], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor2::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Validation improvement must exceed this absolute amount.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

/// Patience-based stopping on a monitored loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    /// Records the loss of `epoch`; returns whether it improved on the best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - MIN_IMPROVEMENT {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// improvement, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - MIN_IMPROVEMENT {
            self.best = loss;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            (lr * self.factor).max(self.min_lr)
        } else {
            lr
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    Mse,
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub clip_max_norm: f64,
    pub patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub monitor: Monitor,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            batch_size: 256,
            clip_max_norm: 1.0,
            patience: 7,
            plateau_factor: 0.5,
            plateau_patience: 3,
            min_lr: 1e-6,
            seed: 0,
            monitor: Monitor::Mse,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        let ok = self.max_epochs >= 1
            && self.batch_size >= 1
            && self.clip_max_norm > 0.0
            && self.patience >= 1
            && self.plateau_patience >= 1
            && self.plateau_factor > 0.0
            && self.plateau_factor < 1.0
            && self.min_lr >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    /// Dropout seed for one call site, or 0 in eval mode.
    pub fn seed_for(self, site: &str) -> u64 {
        match self {
            Mode::Train { seed } => rng::derive_seed(seed, site),
            Mode::Eval => 0,
        }
    }
}

/// A differentiable regressor over items of some dataset.
pub trait Model {
    type Data: ?Sized;

    fn params(&self) -> &Params;
    fn params_mut(&mut self) -> &mut Params;

    /// Predictions for `items`, built on `tape` from the attached `vars`.
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        data: &Self::Data,
        items: &[usize],
        mode: Mode,
    ) -> std::result::Result<Var, AutodiffError>;

    /// Targets aligned with the output of [`Model::forward`].
    fn targets(&self, data: &Self::Data, items: &[usize]) -> Tensor2;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn numeric_error(err: AutodiffError, epoch: usize, batch: usize) -> Error {
    match err {
        AutodiffError::NumericFailure { op } => Error::Numeric(format!(
            "non-finite value in {op} at epoch {epoch}, batch {batch}"
        )),
        other => Error::Autodiff(other),
    }
}

/// Eval-mode predictions for `items`, in `batch_size` chunks.
pub fn predict<M: Model>(model: &M, data: &M::Data, items: &[usize], batch_size: usize) -> Result<Tensor2> {
    let mut rows = 0;
    let mut cols = 0;
    let mut out = Vec::new();
    for chunk in items.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let vars = model.params().attach(&mut tape);
        let pred = model.forward(&mut tape, &vars, data, chunk, Mode::Eval)?;
        let v = tape.value(pred);
        rows += v.rows();
        cols = v.cols();
        out.extend_from_slice(v.data());
    }
    Ok(Tensor2::new(rows, cols, out)?)
}

/// Mean loss of `items` under `monitor`, in eval mode.
pub fn evaluate_loss<M: Model>(
    model: &M,
    data: &M::Data,
    items: &[usize],
    batch_size: usize,
    monitor: Monitor,
) -> Result<f64> {
    let pred = predict(model, data, items, batch_size)?;
    let target = model.targets(data, items);
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} differs from target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| match monitor {
            Monitor::Mse => (p - t) * (p - t),
            Monitor::Mae => (p - t).abs(),
        })
        .sum();
    Ok(s / n)
}

/// Mini-batch training with AdamW, clipping, plateau decay and early
/// stopping. On return the model holds the best-validation parameters.
pub fn train<M: Model>(
    model: &mut M,
    data: &M::Data,
    train_items: &[usize],
    val_items: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_items.is_empty() || val_items.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: train_items.len().min(val_items.len()),
        });
    }
    let mut state = AdamWState::new(model.params().tensors());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut scheduler = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
    let mut lr = cfg.optimizer.learning_rate;
    let mut best = model.params().clone();
    let mut epochs = Vec::new();
    let mut order = train_items.to_vec();
    let shuffle_seed = rng::derive_seed(cfg.seed, "train.shuffle");
    let dropout_seed = rng::derive_seed(cfg.seed, "train.dropout");

    for epoch in 1..=cfg.max_epochs {
        order.copy_from_slice(train_items);
        order.shuffle(&mut rng::rng_from(rng::keyed(shuffle_seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut tape = Tape::new();
            let vars = model.params().attach(&mut tape);
            let mode = Mode::Train {
                seed: rng::keyed(rng::keyed(dropout_seed, epoch as u64), b as u64),
            };
            let step = (|| {
                let pred = model.forward(&mut tape, &vars, data, batch, mode)?;
                let target = tape.constant(model.targets(data, batch));
                let loss = tape.mse(pred, target)?;
                tape.backward(loss)?;
                Ok(tape.value(loss).data()[0])
            })();
            let loss = step.map_err(|e| numeric_error(e, epoch, b))?;
            let mut grads: Vec<Tensor2> = vars.iter().map(|v| tape.take_grad(*v)).collect();
            clip_global_norm(&mut grads, cfg.clip_max_norm);
            adamw_step(model.params_mut().tensors_mut(), &grads, &mut state, &cfg.optimizer, lr)?;
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let val_loss = evaluate_loss(model, data, val_items, cfg.batch_size, cfg.monitor)
            .map_err(|e| match e {
                Error::Autodiff(a) => numeric_error(a, epoch, usize::MAX),
                other => other,
            })?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss,
            lr,
        });
        if stopper.observe(epoch, val_loss) {
            best = model.params().clone();
        }
        lr = scheduler.step(val_loss, lr);
        if stopper.should_stop() {
            *model.params_mut() = best;
            return Ok(TrainHistory {
                epochs,
                best_epoch: stopper.best_epoch,
                best_val_loss: stopper.best,
                stopped_early: true,
            });
        }
    }
    *model.params_mut() = best;
    Ok(TrainHistory {
        epochs,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        stopped_early: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// JSON side of a checkpoint; values live in a sibling `.bin` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `<stem>.json` and `<stem>.bin` (little-endian f64 in manifest order).
pub fn save_checkpoint(
    stem: &Path,
    architecture: &str,
    config: serde_json::Value,
    seed: u64,
    params: &Params,
) -> Result<()> {
    let manifest = CheckpointManifest {
        architecture: architecture.to_string(),
        config,
        seed,
        tensors: params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    std::fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&json_path, e))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?);
    for v in params.flat() {
        f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
    }
    f.flush().map_err(|e| Error::io(&bin_path, e))
}

pub fn load_checkpoint(stem: &Path) -> Result<(CheckpointManifest, Params)> {
    let json_path = stem.with_extension("json");
    let bin_path = stem.with_extension("bin");
    let raw = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&raw)?;
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    if bytes.len() != expected * 8 {
        return Err(Error::Data(format!(
            "{} holds {} bytes, manifest expects {}",
            bin_path.display(),
            bytes.len(),
            expected * 8
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = Params::new();
    let mut off = 0;
    for t in &manifest.tensors {
        let n = t.rows * t.cols;
        params.add(t.name.clone(), Tensor2::new(t.rows, t.cols, values[off..off + n].to_vec())?);
        off += n;
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_hand_step() {
        let mut p = vec![Tensor2::scalar(1.0)];
        let g = vec![Tensor2::scalar(1.0)];
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut st, &cfg, 0.1).unwrap();
        // m = 0.1, v = 0.001; corrected both to 1.
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert_eq!(p[0].data()[0], expected);
    }

    #[test]
    fn adamw_fixed_point_and_decay() {
        let mut p = vec![Tensor2::filled(2, 2, 0.7)];
        let g = vec![Tensor2::zeros(2, 2)];
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &g, &mut st, &cfg, 0.1).unwrap();
        assert!(p[0].data().iter().all(|v| *v == 0.7));

        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = vec![Tensor2::scalar(2.0)];
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &[Tensor2::scalar(0.0)], &mut st, &cfg, 0.1).unwrap();
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);

        let bad = adamw_step(&mut p, &[Tensor2::zeros(1, 2)], &mut st, &cfg, 0.1);
        assert!(matches!(bad, Err(Error::Contract(_))));
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![Tensor2::new(1, 2, vec![3.0, 4.0]).unwrap()];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[0].data()[1] - 0.8).abs() < 1e-15);
        let mut g = vec![Tensor2::new(1, 1, vec![0.5]).unwrap()];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data(), &[0.5]);
    }

    #[test]
    fn early_stopping_patience() {
        let mut s = EarlyStopping::new(2);
        let mut stopped_at = None;
        for (e, l) in [1.0, 1.1, 1.2, 0.5].into_iter().enumerate() {
            s.observe(e + 1, l);
            if s.should_stop() {
                stopped_at = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(3));
        assert_eq!(s.best_epoch, 1);
    }

    #[test]
    fn plateau_halves_each_stagnant_epoch() {
        let mut p = PlateauScheduler::new(0.5, 1, 1e-3);
        let mut lr = 1e-2;
        lr = p.step(1.0, lr);
        assert_eq!(lr, 1e-2);
        let mut seen = vec![];
        for _ in 0..6 {
            lr = p.step(1.0, lr);
            seen.push(lr);
        }
        assert_eq!(seen, vec![5e-3, 2.5e-3, 1.25e-3, 1e-3, 1e-3, 1e-3]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = Params::new();
        params.add("a", Tensor2::new(1, 3, vec![1.5, -0.25, 1e-300]).unwrap());
        params.add("b", Tensor2::zeros(2, 2));
        let stem = dir.path().join("model");
        save_checkpoint(&stem, "test", serde_json::json!({"k": 1}), 9, &params).unwrap();
        let (m, back) = load_checkpoint(&stem).unwrap();
        assert_eq!(back, params);
        assert_eq!(m.seed, 9);
    }
}

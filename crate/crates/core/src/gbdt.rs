//! Gradient-boosted regression trees with second-order split gain, L2 leaf
//! regularization, histogram split finding and validation early stopping.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtConfig {
    pub max_depth: usize,
    pub lambda: f64,
    pub eta: f64,
    pub gamma: f64,
    pub n_rounds: usize,
    pub early_stop_rounds: usize,
    pub n_bins: usize,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            max_depth: 6,
            lambda: 1.0,
            eta: 0.1,
            gamma: 0.0,
            n_rounds: 500,
            early_stop_rounds: 20,
            n_bins: 256,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_depth >= 1
            && self.lambda >= 0.0
            && self.eta >= 0.0
            && self.eta <= 1.0
            && self.gamma >= 0.0
            && self.n_rounds >= 1
            && self.early_stop_rounds >= 1
            && self.n_bins >= 2
            && self.min_child_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid boosting settings: {self:?}")))
        }
    }
}

/// Column-major numeric feature matrix without missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n_rows: usize,
    columns: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n_rows) {
            return Err(Error::Contract("feature columns differ in length".into()));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        Ok(Self { n_rows, columns })
    }

    /// Builds from row-major values with `n_features` per row.
    pub fn from_row_major(values: &[f64], n_features: usize) -> Result<Self> {
        if n_features == 0 || values.len() % n_features != 0 {
            return Err(Error::Contract(format!(
                "{} values do not form rows of {n_features}",
                values.len()
            )));
        }
        let n = values.len() / n_features;
        let columns = (0..n_features)
            .map(|j| (0..n).map(|i| values[i * n_features + j]).collect())
            .collect();
        Self::from_columns(columns)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.columns[feature][row]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        gain: f64,
        left: usize,
        right: usize,
    },
    Leaf { weight: f64 },
}

/// A regression tree stored as a node arena rooted at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: &FeatureMatrix, row: usize) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { weight } => return weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x.value(row, feature) <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_weights(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { weight } => Some(*weight),
                Node::Split { .. } => None,
            })
            .collect()
    }
}

/// Sorted per-feature bin upper edges. A value falls into the first bin
/// whose edge is `>=` it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinCuts {
    pub edges: Vec<Vec<f64>>,
}

impl BinCuts {
    /// Distinct values when there are at most `n_bins` of them, otherwise
    /// equal-frequency quantile edges.
    pub fn fit(x: &FeatureMatrix, n_bins: usize) -> Self {
        let edges = par::map_range(x.n_features(), |j| {
            let mut v = x.column(j).to_vec();
            v.sort_by(f64::total_cmp);
            let mut distinct = v.clone();
            distinct.dedup();
            if distinct.len() <= n_bins {
                return distinct;
            }
            let n = v.len();
            let mut e: Vec<f64> = (1..=n_bins).map(|b| v[(b * n).div_ceil(n_bins) - 1]).collect();
            e.dedup();
            e
        });
        Self { edges }
    }

    pub fn bin(&self, feature: usize, value: f64) -> usize {
        let e = &self.edges[feature];
        e.partition_point(|c| *c < value).min(e.len() - 1)
    }
}

/// Second-order gain of splitting (G, H) into left/right parts.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    let g = gl + gr;
    let h = hl + hr;
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - g * g / (h + lambda)) - gamma
}

pub fn leaf_weight(g: f64, h: f64, lambda: f64) -> f64 {
    -g / (h + lambda)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    feature: usize,
    bin: usize,
    gain: f64,
}

fn best_split_for_feature(
    bins: &[u16],
    rows: &[usize],
    grad: &[f64],
    n_bins: usize,
    feature: usize,
    cfg: &GbdtConfig,
) -> Option<Candidate> {
    let mut hg = vec![0.0; n_bins];
    let mut hh = vec![0.0; n_bins];
    for &r in rows {
        let b = bins[r] as usize;
        hg[b] += grad[r];
        hh[b] += 1.0;
    }
    let g: f64 = hg.iter().sum();
    let h: f64 = hh.iter().sum();
    let (mut gl, mut hl) = (0.0, 0.0);
    let mut best: Option<Candidate> = None;
    for b in 0..n_bins.saturating_sub(1) {
        gl += hg[b];
        hl += hh[b];
        let (gr, hr) = (g - gl, h - hl);
        if hh[b] == 0.0 || hr <= 0.0 {
            continue;
        }
        if hl < cfg.min_child_weight || hr < cfg.min_child_weight {
            continue;
        }
        let gain = split_gain(gl, hl, gr, hr, cfg.lambda, cfg.gamma);
        if gain > 0.0 && best.is_none_or(|c| gain > c.gain) {
            best = Some(Candidate { feature, bin: b, gain });
        }
    }
    best
}

fn grow_tree(
    binned: &[Vec<u16>],
    cuts: &BinCuts,
    grad: &[f64],
    cfg: &GbdtConfig,
    leaf_of_row: &mut [f64],
) -> Tree {
    let n = grad.len();
    let mut nodes = vec![Node::Leaf { weight: 0.0 }];
    let mut frontier: Vec<(usize, Vec<usize>)> = vec![(0, (0..n).collect())];
    for depth in 0..=cfg.max_depth {
        let mut next = Vec::new();
        for (id, rows) in frontier {
            let split = if depth < cfg.max_depth {
                let per_feature = par::map_range(binned.len(), |j| {
                    best_split_for_feature(&binned[j], &rows, grad, cuts.edges[j].len(), j, cfg)
                });
                per_feature
                    .into_iter()
                    .flatten()
                    .fold(None, |acc: Option<Candidate>, c| match acc {
                        Some(a) if a.gain >= c.gain => Some(a),
                        _ => Some(c),
                    })
            } else {
                None
            };
            match split {
                Some(c) => {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| binned[c.feature][i] as usize <= c.bin);
                    let left = nodes.len();
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes.push(Node::Leaf { weight: 0.0 });
                    nodes[id] = Node::Split {
                        feature: c.feature,
                        threshold: cuts.edges[c.feature][c.bin],
                        gain: c.gain,
                        left,
                        right: left + 1,
                    };
                    next.push((left, l));
                    next.push((left + 1, r));
                }
                None => {
                    let g: f64 = rows.iter().map(|&i| grad[i]).sum();
                    let w = leaf_weight(g, rows.len() as f64, cfg.lambda);
                    nodes[id] = Node::Leaf { weight: w };
                    for &i in &rows {
                        leaf_of_row[i] = w;
                    }
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    Tree { nodes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Booster {
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub cuts: BinCuts,
    pub config: GbdtConfig,
    pub n_features: usize,
}

/// Fitted booster plus validation RMSE after each round.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub booster: Booster,
    pub val_rmse: Vec<f64>,
    pub best_round: usize,
}

fn rmse(pred: &[f64], y: &[f64]) -> f64 {
    let s: f64 = pred.iter().zip(y).map(|(p, t)| (p - t) * (p - t)).sum();
    (s / y.len() as f64).sqrt()
}

/// Squared-error boosting. Trees are grown level by level over histogram
/// bins; training stops once validation RMSE has not improved for
/// `early_stop_rounds` rounds and the booster is truncated to its best round.
pub fn fit(
    train_x: &FeatureMatrix,
    train_y: &[f64],
    valid_x: &FeatureMatrix,
    valid_y: &[f64],
    cfg: &GbdtConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let n = train_x.n_rows();
    if n < 2 || train_y.len() != n {
        return Err(Error::Fit(format!(
            "need at least 2 aligned training rows, got {n} rows and {} targets",
            train_y.len()
        )));
    }
    if train_x.n_features() == 0 {
        return Err(Error::Fit("no features".into()));
    }
    if valid_x.n_rows() == 0 || valid_y.len() != valid_x.n_rows() || valid_x.n_features() != train_x.n_features() {
        return Err(Error::Fit("validation set is empty or misaligned".into()));
    }
    if train_y.iter().chain(valid_y).any(|v| !v.is_finite()) {
        return Err(Error::Fit("targets contain non-finite values".into()));
    }
    let n_bins = cfg.n_bins.min(u16::MAX as usize + 1);
    let cuts = BinCuts::fit(train_x, n_bins);
    let binned: Vec<Vec<u16>> = par::map_range(train_x.n_features(), |j| {
        train_x.column(j).iter().map(|&v| cuts.bin(j, v) as u16).collect()
    });

    let base_score = train_y.iter().sum::<f64>() / n as f64;
    let mut booster = Booster {
        base_score,
        trees: Vec::new(),
        cuts,
        config: cfg.clone(),
        n_features: train_x.n_features(),
    };
    let mut train_sum = vec![0.0; n];
    let mut valid_sum = vec![0.0; valid_x.n_rows()];
    let mut grad = vec![0.0; n];
    let mut leaf_of_row = vec![0.0; n];
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize);

    for round in 0..cfg.n_rounds {
        for i in 0..n {
            grad[i] = base_score + cfg.eta * train_sum[i] - train_y[i];
        }
        let tree = grow_tree(&binned, &booster.cuts, &grad, cfg, &mut leaf_of_row);
        for (s, w) in train_sum.iter_mut().zip(&leaf_of_row) {
            *s += w;
        }
        let tree_out = par::map_range(valid_x.n_rows(), |i| tree.predict_row(valid_x, i));
        for (s, w) in valid_sum.iter_mut().zip(&tree_out) {
            *s += w;
        }
        booster.trees.push(tree);
        let pred: Vec<f64> = valid_sum.iter().map(|s| base_score + cfg.eta * s).collect();
        let r = rmse(&pred, valid_y);
        if !r.is_finite() {
            return Err(Error::Numeric(format!("validation RMSE is non-finite at round {round}")));
        }
        history.push(r);
        if r < best.0 {
            best = (r, round);
        } else if round - best.1 >= cfg.early_stop_rounds {
            break;
        }
    }
    booster.trees.truncate(best.1 + 1);
    Ok(FitResult {
        booster,
        val_rmse: history,
        best_round: best.1,
    })
}

impl Booster {
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        if x.n_features() != self.n_features {
            return Err(Error::Contract(format!(
                "booster expects {} features, got {}",
                self.n_features,
                x.n_features()
            )));
        }
        Ok(par::map_range(x.n_rows(), |i| {
            let s: f64 = self.trees.iter().map(|t| t.predict_row(x, i)).sum();
            self.base_score + self.config.eta * s
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&raw)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub max_depth: usize,
    pub lambda: f64,
    pub val_rmse: f64,
    pub best_round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best: GridCell,
    pub scores: Vec<GridCell>,
    pub fit: FitResult,
}

pub const DEFAULT_DEPTHS: [usize; 3] = [4, 6, 8];
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.1, 1.0, 10.0];

/// Fits one booster per (depth, lambda) and keeps the lowest validation
/// RMSE; ties go to the smaller depth, then the larger lambda.
pub fn grid_search(
    train_x: &FeatureMatrix,
    train_y: &[f64],
    valid_x: &FeatureMatrix,
    valid_y: &[f64],
    depths: &[usize],
    lambdas: &[f64],
    cfg: &GbdtConfig,
) -> Result<GridResult> {
    if depths.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("grid search needs at least one depth and one lambda".into()));
    }
    let cells: Vec<(usize, f64)> = depths
        .iter()
        .flat_map(|&d| lambdas.iter().map(move |&l| (d, l)))
        .collect();
    let fits = par::try_map_range(cells.len(), |k| {
        let (d, l) = cells[k];
        let c = GbdtConfig {
            max_depth: d,
            lambda: l,
            ..cfg.clone()
        };
        fit(train_x, train_y, valid_x, valid_y, &c).map_err(|e| match e {
            Error::Fit(m) => Error::Fit(format!("grid cell depth={d} lambda={l}: {m}")),
            other => other,
        })
    })?;
    let scores: Vec<GridCell> = fits
        .iter()
        .zip(&cells)
        .map(|(f, &(d, l))| GridCell {
            max_depth: d,
            lambda: l,
            val_rmse: f.val_rmse[f.best_round],
            best_round: f.best_round,
        })
        .collect();
    let better = |a: &GridCell, b: &GridCell| {
        a.val_rmse < b.val_rmse
            || (a.val_rmse == b.val_rmse
                && (a.max_depth < b.max_depth || (a.max_depth == b.max_depth && a.lambda > b.lambda)))
    };
    let mut best = 0;
    for k in 1..scores.len() {
        if better(&scores[k], &scores[best]) {
            best = k;
        }
    }
    let fit = fits.into_iter().nth(best).expect("non-empty grid");
    Ok(GridResult {
        best: scores[best],
        scores,
        fit,
    })
}

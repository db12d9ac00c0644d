#![allow(dead_code)]

use farebench::autodiff::{grad_check, AdResult, GradCheckReport, Tape, Tensor2, Var};
use farebench::dataset::ColumnTable;
use farebench::denoiser::{AutoencoderSpec, DenoiserModel};
use farebench::gat::{self, GatConfig, GatModel, GraphConfig, TripGraph};
use farebench::nn::{Mode, Model};
use farebench::rng;
use farebench::tslite::{TsLiteConfig, TsLiteModel, WindowDataset};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-6;

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    rng::rng_from(seed)
}

/// Uniform values with magnitude in [0.2, 1], away from activation kinks.
pub fn rand_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| {
            let m: f64 = r.random_range(0.2..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor2::new(rows, cols, data).unwrap()
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output element matters.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> AdResult<Var> {
    let (rows, cols) = tape.value(out).shape();
    let w = tape.constant(rand_tensor(&mut rng_for(seed), rows, cols));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> AdResult<Var>>;

/// One finite-difference check per tape primitive: (name, report).
pub fn primitive_grad_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut r = rng_for(11);
    let mut t = |rows, cols| rand_tensor(&mut r, rows, cols);
    let cases: Vec<(&'static str, LossFn, Vec<Tensor2>)> = vec![
        ("add", Box::new(|tp, v| { let o = tp.add(v[0], v[1])?; weighted(tp, o, 1) }), vec![t(3, 4), t(3, 4)]),
        ("sub", Box::new(|tp, v| { let o = tp.sub(v[0], v[1])?; weighted(tp, o, 2) }), vec![t(3, 4), t(3, 4)]),
        ("mul", Box::new(|tp, v| { let o = tp.mul(v[0], v[1])?; weighted(tp, o, 3) }), vec![t(3, 4), t(3, 4)]),
        ("scale_rows", Box::new(|tp, v| { let o = tp.scale_rows(v[0], v[1])?; weighted(tp, o, 4) }), vec![t(5, 3), t(5, 1)]),
        ("matmul", Box::new(|tp, v| { let o = tp.matmul(v[0], v[1])?; weighted(tp, o, 5) }), vec![t(3, 4), t(4, 2)]),
        ("matmul_column", Box::new(|tp, v| { let o = tp.matmul(v[0], v[1])?; weighted(tp, o, 6) }), vec![t(6, 3), t(3, 1)]),
        ("broadcast_add_row", Box::new(|tp, v| { let o = tp.broadcast_add_row(v[0], v[1])?; weighted(tp, o, 7) }), vec![t(3, 4), t(1, 4)]),
        ("relu", Box::new(|tp, v| { let o = tp.relu(v[0])?; weighted(tp, o, 8) }), vec![t(3, 4)]),
        ("leaky_relu", Box::new(|tp, v| { let o = tp.leaky_relu(v[0], 0.2)?; weighted(tp, o, 9) }), vec![t(3, 4)]),
        ("tanh", Box::new(|tp, v| { let o = tp.tanh(v[0])?; weighted(tp, o, 10) }), vec![t(3, 4)]),
        ("sigmoid", Box::new(|tp, v| { let o = tp.sigmoid(v[0])?; weighted(tp, o, 11) }), vec![t(3, 4)]),
        ("softmax_rows", Box::new(|tp, v| { let o = tp.softmax_rows(v[0])?; weighted(tp, o, 12) }), vec![t(3, 4)]),
        ("dropout", Box::new(|tp, v| { let o = tp.dropout(v[0], 0.3, 77, true)?; weighted(tp, o, 13) }), vec![t(4, 5)]),
        ("mse", Box::new(|tp, v| tp.mse(v[0], v[1])), vec![t(4, 1), t(4, 1)]),
        ("mean", Box::new(|tp, v| { let sq = tp.mul(v[0], v[0])?; tp.mean(sq) }), vec![t(3, 4)]),
        ("sum", Box::new(|tp, v| { let sq = tp.mul(v[0], v[0])?; tp.sum(sq) }), vec![t(3, 4)]),
        ("scale", Box::new(|tp, v| { let o = tp.scale(v[0], 1.7)?; weighted(tp, o, 14) }), vec![t(3, 4)]),
        ("concat_cols", Box::new(|tp, v| { let o = tp.concat_cols(&[v[0], v[1]])?; weighted(tp, o, 15) }), vec![t(3, 2), t(3, 3)]),
        (
            "gather",
            Box::new(|tp, v| {
                let idx = vec![Some(0), Some(5), None, Some(5), Some(11), Some(2)];
                let o = tp.gather(v[0], idx, 2, 3)?;
                weighted(tp, o, 16)
            }),
            vec![t(3, 4)],
        ),
        ("gather_rows", Box::new(|tp, v| { let o = tp.gather_rows(v[0], &[2, 0, 2, 1])?; weighted(tp, o, 17) }), vec![t(3, 4)]),
        (
            "scatter_add_rows",
            Box::new(|tp, v| {
                let o = tp.scatter_add_rows(v[0], vec![1, 0, 1, 3, 1], 4)?;
                weighted(tp, o, 18)
            }),
            vec![t(5, 3)],
        ),
        (
            "segment_softmax",
            Box::new(|tp, v| {
                let o = tp.segment_softmax(v[0], vec![0, 1, 4, 6])?;
                weighted(tp, o, 19)
            }),
            vec![t(6, 1)],
        ),
    ];
    cases
        .into_iter()
        .map(|(name, f, params)| (name, grad_check(f, &params, GRAD_STEP, GRAD_TOL).unwrap()))
        .collect()
}

/// `n` nodes, each linked to two random partners in both directions.
pub fn small_graph(n: usize, n_features: usize, seed: u64) -> TripGraph {
    let mut r = rng_for(seed);
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for _ in 0..2 {
            let j = r.random_range(0..n);
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    let features = rand_tensor(&mut r, n, n_features);
    let names = (0..n_features).map(|j| format!("x{j}")).collect();
    TripGraph::new(features, names, adj, GraphConfig::default()).unwrap()
}

pub fn model_grad_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();

    let mut r = rng_for(21);
    let ae = DenoiserModel::new((0..5).map(|j| format!("f{j}")).collect(), AutoencoderSpec::default(), 3).unwrap();
    let noisy = rand_tensor(&mut r, 8, 5);
    let clean = rand_tensor(&mut r, 8, 5);
    let f = |tp: &mut Tape, v: &[Var]| {
        let x = tp.constant(noisy.clone());
        let y = tp.constant(clean.clone());
        let rec = ae.reconstruct(tp, v, x)?;
        tp.mse(rec, y)
    };
    out.push(("autoencoder", grad_check(f, ae.params().tensors(), GRAD_STEP, GRAD_TOL).unwrap()));

    let graph = small_graph(10, 4, 22);
    let targets = Tensor2::column((0..10).map(|i| (i as f64 * 0.7).sin()).collect());
    let model = GatModel::new(4, GatConfig::default(), 5).unwrap();
    let plan = gat::plan_full(&graph);
    for (name, mode) in [("gat_eval", Mode::Eval), ("gat_train_dropout", Mode::Train { seed: 9 })] {
        let f = |tp: &mut Tape, v: &[Var]| {
            let (_, pred) = model.forward_plan(tp, v, &graph, &plan, mode)?;
            let y = tp.constant(targets.clone());
            tp.mse(pred, y)
        };
        out.push((name, grad_check(f, model.params().tensors(), GRAD_STEP, GRAD_TOL).unwrap()));
    }

    let mut r = rng_for(23);
    let cfg = TsLiteConfig::default();
    let windows = rand_tensor(&mut r, 3 * cfg.window_len, 4).into_data();
    let data = WindowDataset {
        window_len: cfg.window_len,
        n_features: 4,
        windows,
        targets: vec![0.3, -0.5, 1.1],
        end_rows: vec![10, 11, 12],
    };
    let ts = TsLiteModel::new(4, cfg, 6).unwrap();
    let f = |tp: &mut Tape, v: &[Var]| {
        let pred = ts.forward_windows(tp, v, &data, &[0, 1, 2], Mode::Eval)?;
        let y = tp.constant(Tensor2::column(data.targets.clone()));
        tp.mse(pred, y)
    };
    out.push(("tslite", grad_check(f, ts.params().tensors(), GRAD_STEP, GRAD_TOL).unwrap()));
    out
}

/// Result of running one oracle over many random instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRun {
    pub instances: usize,
    pub mismatches: usize,
    pub max_abs_error: f64,
}

impl OracleRun {
    fn new() -> Self {
        Self {
            instances: 0,
            mismatches: 0,
            max_abs_error: 0.0,
        }
    }

    fn real(&mut self, got: f64, want: f64) {
        let e = (got - want).abs();
        let e = if got == want { 0.0 } else if e.is_nan() { f64::INFINITY } else { e };
        self.max_abs_error = self.max_abs_error.max(e);
        if e > 1e-9 {
            self.mismatches += 1;
        }
    }

    fn exact(&mut self, ok: bool) {
        if !ok {
            self.mismatches += 1;
        }
    }

    pub fn passed(&self, min_instances: usize) -> bool {
        self.instances >= min_instances && self.mismatches == 0
    }
}

fn table_from_rows(rows: &[Vec<Option<f64>>], names: &[&str]) -> ColumnTable {
    let cols = names.len();
    let values: Vec<Vec<f64>> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].unwrap_or(f64::NAN)).collect())
        .collect();
    let masks: Vec<Vec<bool>> = (0..cols).map(|c| rows.iter().map(|r| r[c].is_none()).collect()).collect();
    ColumnTable::with_masks(names.iter().map(|s| s.to_string()).collect(), values, masks).unwrap()
}

/// KNN imputation against exhaustive distance enumeration with repeated
/// minimum selection.
pub fn knn_oracle(instances: usize, seed: u64) -> OracleRun {
    use farebench::preprocess::{knn_impute, KnnImputeConfig};
    let names = ["a", "b", "c", "target"];
    let mut run = OracleRun::new();
    let mut r = rng_for(seed);
    while run.instances < instances {
        let n = r.random_range(6..16);
        let k = r.random_range(1..4);
        let rows: Vec<Vec<Option<f64>>> = (0..n)
            .map(|_| {
                (0..4)
                    .map(|_| (r.random::<f64>() > 0.2).then(|| f64::from(r.random_range(-5..6)) * 0.5))
                    .collect()
            })
            .collect();
        let donors: Vec<usize> = (0..n).filter(|&i| rows[i][3].is_some()).collect();
        if donors.len() < k || donors.len() == n {
            continue;
        }
        run.instances += 1;
        let table = table_from_rows(&rows, &names);
        let got = knn_impute(&table, "target", &KnnImputeConfig { k, donor_cap: 10_000, seed: 1 }).unwrap();
        // z-scores from present values, population std.
        let stats: Vec<(f64, f64)> = (0..3)
            .map(|c| {
                let vals: Vec<f64> = rows.iter().filter_map(|row| row[c]).collect();
                let m = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
                let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len().max(1) as f64;
                (m, if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() })
            })
            .collect();
        let z = |i: usize, c: usize| rows[i][c].map(|v| (v - stats[c].0) / stats[c].1);
        for q in (0..n).filter(|&i| rows[i][3].is_none()) {
            let dist = |d: usize| {
                let mut s = 0.0;
                let mut present = 0;
                for c in 0..3 {
                    if let (Some(x), Some(y)) = (z(q, c), z(d, c)) {
                        s += (x - y) * (x - y);
                        present += 1;
                    }
                }
                if present == 0 {
                    f64::INFINITY
                } else {
                    (s * 3.0 / present as f64).sqrt()
                }
            };
            let mut pool = donors.clone();
            let mut chosen = Vec::new();
            for _ in 0..k {
                let mut best = 0;
                for p in 1..pool.len() {
                    let (dp, db) = (dist(pool[p]), dist(pool[best]));
                    if dp < db || (dp == db && pool[p] < pool[best]) {
                        best = p;
                    }
                }
                chosen.push(pool.remove(best));
            }
            let want = chosen.iter().map(|&d| rows[d][3].unwrap()).sum::<f64>() / k as f64;
            run.real(got.column("target").unwrap()[q], want);
        }
    }
    run
}

/// Type-7 quantile by its 1-based textbook definition.
fn quantile_textbook(values: &[f64], p: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 1.0 + (s.len() as f64 - 1.0) * p;
    let j = pos.floor() as usize;
    let g = pos - j as f64;
    if j >= s.len() {
        return s[s.len() - 1];
    }
    (1.0 - g) * s[j - 1] + g * s[j]
}

pub fn iqr_oracle(instances: usize, seed: u64) -> OracleRun {
    use farebench::preprocess::iqr_bounds;
    let mut run = OracleRun::new();
    let mut r = rng_for(seed);
    for _ in 0..instances {
        run.instances += 1;
        let n = r.random_range(4..40);
        let v: Vec<f64> = (0..n)
            .map(|_| if r.random::<bool>() { f64::from(r.random_range(0..8)) } else { r.random_range(-10.0..10.0) })
            .collect();
        let m = [0.5, 1.5, 3.0][r.random_range(0..3)];
        let (lo, hi) = iqr_bounds(&v, m);
        let (q1, q3) = (quantile_textbook(&v, 0.25), quantile_textbook(&v, 0.75));
        run.real(lo, q1 - m * (q3 - q1));
        run.real(hi, q3 + m * (q3 - q1));
    }
    run
}

/// KS statistic by evaluating both empirical CDFs at every sample point.
pub fn ks_oracle(instances: usize, seed: u64) -> OracleRun {
    use farebench::perturb::ks_statistic;
    let mut run = OracleRun::new();
    let mut r = rng_for(seed);
    for _ in 0..instances {
        run.instances += 1;
        let (n1, n2) = (r.random_range(1..30), r.random_range(1..30));
        let discrete = r.random::<bool>();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if discrete { f64::from(r.random_range(0..6)) } else { r.random_range(-1.0..1.0) })
                .collect()
        };
        let (a, b) = (draw(n1), draw(n2));
        let cdf = |s: &[f64], x: f64| s.iter().filter(|v| **v <= x).count() as f64 / s.len() as f64;
        let want = a
            .iter()
            .chain(&b)
            .map(|&x| (cdf(&a, x) - cdf(&b, x)).abs())
            .fold(0.0, f64::max);
        run.real(ks_statistic(&a, &b), want);
    }
    run
}

/// Equal-frequency bin of each value by linear edge scan.
fn bins_by_scan(values: &[f64], n_bins: usize) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    values
        .iter()
        .map(|&v| {
            (0..n_bins)
                .find(|&b| {
                    let pos = ((b + 1) * n + n_bins - 1) / n_bins - 1;
                    v <= sorted[pos]
                })
                .unwrap_or(n_bins - 1)
        })
        .collect()
}

fn random_pairs(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize) {
    let n_bins = r.random_range(1..8);
    let n = r.random_range(n_bins..n_bins + 40);
    let ties = r.random::<bool>();
    let actual: Vec<f64> = (0..n)
        .map(|_| if ties { f64::from(r.random_range(0..5)) } else { r.random_range(0.0..50.0) })
        .collect();
    let pred: Vec<f64> = actual
        .iter()
        .map(|a| if ties { f64::from(r.random_range(0..5)) } else { a + r.random_range(-5.0..5.0) })
        .collect();
    (pred, actual, n_bins)
}

pub fn binwise_mae_oracle(instances: usize, seed: u64) -> OracleRun {
    use farebench::eval::binwise_mae;
    let mut run = OracleRun::new();
    let mut r = rng_for(seed);
    for _ in 0..instances {
        run.instances += 1;
        let (pred, actual, n_bins) = random_pairs(&mut r);
        let got = binwise_mae(&pred, &actual, n_bins).unwrap();
        let bins = bins_by_scan(&actual, n_bins);
        let mut want = Vec::new();
        for b in 0..n_bins {
            let members: Vec<usize> = (0..actual.len()).filter(|&i| bins[i] == b).collect();
            if !members.is_empty() {
                let mae = members.iter().map(|&i| (pred[i] - actual[i]).abs()).sum::<f64>() / members.len() as f64;
                want.push((b, members.len(), mae));
            }
        }
        run.exact(got.len() == want.len());
        for (g, w) in got.iter().zip(&want) {
            run.exact(g.bin == w.0 && g.count == w.1);
            run.real(g.mae, w.2);
        }
    }
    run
}

pub fn ece_oracle(instances: usize, seed: u64) -> OracleRun {
    use farebench::eval::calibration_curve;
    let mut run = OracleRun::new();
    let mut r = rng_for(seed);
    for _ in 0..instances {
        run.instances += 1;
        let (pred, actual, n_bins) = random_pairs(&mut r);
        let got = calibration_curve(&pred, &actual, n_bins).unwrap().ece;
        let bins = bins_by_scan(&pred, n_bins);
        let n = pred.len() as f64;
        let want: f64 = (0..n_bins)
            .map(|b| {
                let members: Vec<usize> = (0..pred.len()).filter(|&i| bins[i] == b).collect();
                let sp: f64 = members.iter().map(|&i| pred[i]).sum();
                let sa: f64 = members.iter().map(|&i| actual[i]).sum();
                (sp - sa).abs() / n
            })
            .sum();
        run.real(got, want);
    }
    run
}

/// First-round depth-1 split against every (feature, threshold) pair. The
/// chosen split must attain the exhaustive maximum gain.
pub fn gbdt_split_oracle(instances: usize, seed: u64) -> OracleRun {
    use farebench::gbdt::{fit, FeatureMatrix, GbdtConfig, Node};
    let mut run = OracleRun::new();
    let mut r = rng_for(seed);
    while run.instances < instances {
        let n = r.random_range(6..40);
        let d = r.random_range(1..4);
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..n).map(|_| f64::from(r.random_range(0..12)) * 0.25).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let lambda = [0.0, 0.1, 1.0, 10.0][r.random_range(0..4)];
        let cfg = GbdtConfig {
            max_depth: 1,
            n_rounds: 1,
            lambda,
            min_child_weight: 1.0,
            ..GbdtConfig::default()
        };
        let x = FeatureMatrix::from_columns(cols.clone()).unwrap();
        let booster = fit(&x, &y, &x, &y, &cfg).unwrap().booster;
        run.instances += 1;
        let base = y.iter().sum::<f64>() / n as f64;
        let g: Vec<f64> = y.iter().map(|t| base - t).collect();
        let score = |set: &[usize]| {
            let s: f64 = set.iter().map(|&i| g[i]).sum();
            s * s / (set.len() as f64 + lambda)
        };
        let all: Vec<usize> = (0..n).collect();
        let mut best: Option<(f64, usize, f64)> = None;
        for (j, col) in cols.iter().enumerate() {
            let mut thresholds = col.clone();
            thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
            thresholds.dedup();
            for &t in &thresholds[..thresholds.len() - 1] {
                let (left, right): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| col[i] <= t);
                let gain = 0.5 * (score(&left) + score(&right) - score(&all));
                if gain > 0.0 && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, j, t));
                }
            }
        }
        match (&booster.trees[0].nodes[0], best) {
            (Node::Leaf { .. }, None) => {}
            (Node::Leaf { .. }, Some((gain, _, _))) => run.exact(gain < 1e-9),
            (Node::Split { gain, .. }, None) => run.exact(*gain < 1e-9),
            (Node::Split { feature, threshold, gain, .. }, Some((best_gain, _, _))) => {
                let col = &cols[*feature];
                let (left, right): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| col[i] <= *threshold);
                let own = 0.5 * (score(&left) + score(&right) - score(&all));
                run.real(*gain, own);
                run.real(own, best_gain);
            }
        }
    }
    run
}

/// Exact greedy tree over raw feature values, grown recursively.
#[derive(Debug)]
enum ExactNode {
    Split { feature: usize, threshold: f64, left: Box<ExactNode>, right: Box<ExactNode> },
    Leaf(f64),
}

fn exact_grow(cols: &[Vec<f64>], grad: &[f64], rows: &[usize], depth: usize, cfg: &farebench::gbdt::GbdtConfig) -> ExactNode {
    let leaf = || {
        let g: f64 = rows.iter().map(|&i| grad[i]).sum();
        ExactNode::Leaf(-g / (rows.len() as f64 + cfg.lambda))
    };
    if depth == cfg.max_depth {
        return leaf();
    }
    let score = |set: &[usize]| {
        let g: f64 = set.iter().map(|&i| grad[i]).sum();
        g * g / (set.len() as f64 + cfg.lambda)
    };
    let mut best: Option<(f64, usize, f64)> = None;
    for (j, col) in cols.iter().enumerate() {
        let mut values: Vec<f64> = rows.iter().map(|&i| col[i]).collect();
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        for &t in values.iter().take(values.len().saturating_sub(1)) {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| col[i] <= t);
            if (l.len() as f64) < cfg.min_child_weight || (r.len() as f64) < cfg.min_child_weight {
                continue;
            }
            let gain = 0.5 * (score(&l) + score(&r) - score(rows)) - cfg.gamma;
            if gain > 0.0 && best.is_none_or(|b| gain > b.0) {
                best = Some((gain, j, t));
            }
        }
    }
    match best {
        None => leaf(),
        Some((_, feature, threshold)) => {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| cols[feature][i] <= threshold);
            ExactNode::Split {
                feature,
                threshold,
                left: Box::new(exact_grow(cols, grad, &l, depth + 1, cfg)),
                right: Box::new(exact_grow(cols, grad, &r, depth + 1, cfg)),
            }
        }
    }
}

fn exact_predict(node: &ExactNode, cols: &[Vec<f64>], i: usize) -> f64 {
    match node {
        ExactNode::Leaf(w) => *w,
        ExactNode::Split { feature, threshold, left, right } => {
            if cols[*feature][i] <= *threshold {
                exact_predict(left, cols, i)
            } else {
                exact_predict(right, cols, i)
            }
        }
    }
}

/// Walks both trees together over the rows reaching each node. Splits
/// match when they induce the same partition, possibly with the children
/// swapped (equal-gain splits on different features).
fn same_tree(
    exact: &ExactNode,
    tree: &farebench::gbdt::Tree,
    id: usize,
    cols: &[Vec<f64>],
    rows: &[usize],
    run: &mut OracleRun,
) -> bool {
    use farebench::gbdt::Node;
    match (exact, &tree.nodes[id]) {
        (ExactNode::Leaf(w), Node::Leaf { weight }) => {
            run.real(*weight, *w);
            true
        }
        (
            ExactNode::Split { feature, threshold, left, right },
            Node::Split { feature: f, threshold: t, left: l, right: r, .. },
        ) => {
            let (el, er): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| cols[*feature][i] <= *threshold);
            let (tl, _): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| cols[*f][i] <= *t);
            if tl == el {
                same_tree(left, tree, *l, cols, &el, run) && same_tree(right, tree, *r, cols, &er, run)
            } else if tl == er {
                same_tree(right, tree, *l, cols, &er, run) && same_tree(left, tree, *r, cols, &el, run)
            } else {
                false
            }
        }
        _ => false,
    }
}

/// Histogram boosting with at least as many bins as distinct values against
/// exact greedy boosting: identical splits, leaf weights within 1e-9.
pub fn gbdt_exact_oracle(instances: usize, seed: u64) -> OracleRun {
    use farebench::gbdt::{fit, FeatureMatrix, GbdtConfig};
    let mut run = OracleRun::new();
    let mut r = rng_for(seed);
    for _ in 0..instances {
        run.instances += 1;
        let n = r.random_range(10..120);
        let d = r.random_range(1..4);
        let cols: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..n).map(|_| f64::from(r.random_range(0..30)) * 0.1).collect())
            .collect();
        let y: Vec<f64> = (0..n).map(|i| cols[0][i] * 2.0 + r.random_range(-1.0..1.0)).collect();
        let cfg = GbdtConfig {
            max_depth: r.random_range(1..4),
            n_rounds: 3,
            early_stop_rounds: 10,
            lambda: [0.1, 1.0, 10.0][r.random_range(0..3)],
            min_child_weight: [1.0, 3.0][r.random_range(0..2)],
            ..GbdtConfig::default()
        };
        let x = FeatureMatrix::from_columns(cols.clone()).unwrap();
        let booster = fit(&x, &y, &x, &y, &cfg).unwrap().booster;
        let base = y.iter().sum::<f64>() / n as f64;
        run.real(booster.base_score, base);
        let mut sum = vec![0.0; n];
        let rows: Vec<usize> = (0..n).collect();
        for tree in &booster.trees {
            let grad: Vec<f64> = (0..n).map(|i| base + cfg.eta * sum[i] - y[i]).collect();
            let exact = exact_grow(&cols, &grad, &rows, 0, &cfg);
            let ok = same_tree(&exact, tree, 0, &cols, &rows, &mut run);
            run.exact(ok);
            if !ok {
                break;
            }
            for (i, s) in sum.iter_mut().enumerate() {
                *s += exact_predict(&exact, &cols, i);
            }
        }
    }
    run
}

/// Trip graph over `n` rows of the deterministic fare table: default edge
/// rule on raw keys, z-scored coordinate and distance features, z-scored
/// fare targets.
pub fn trip_graph(n: usize, seed: u64) -> (TripGraph, Vec<f64>) {
    use farebench::preprocess::{add_haversine, apply_normalizer, fit_normalizer};
    let mut t = farebench::synth::deterministic_fare_table(n, seed).unwrap();
    add_haversine(&mut t).unwrap();
    let all: Vec<usize> = (0..n).collect();
    let z = apply_normalizer(&t, &fit_normalizer(&t, &all).unwrap()).unwrap();
    let features = ["pickup_longitude", "pickup_latitude", "dropoff_longitude", "dropoff_latitude", "haversine_km"];
    let graph = gat::build_graph_split(&t, &z, &features, &GraphConfig::default()).unwrap();
    (graph, z.column("fare_amount").unwrap().to_vec())
}

/// Largest prediction change after relabeling the nodes of a `n`-node graph.
pub fn permutation_gap(n: usize, seed: u64) -> f64 {
    use rand::seq::SliceRandom;
    let (graph, _) = trip_graph(n, seed);
    let model = GatModel::new(graph.n_features(), GatConfig::default(), seed).unwrap();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed));
    let base = model.predict_full(&graph).unwrap();
    let moved = model.predict_full(&graph.permuted(&perm).unwrap()).unwrap();
    perm.iter()
        .enumerate()
        .map(|(new, &old)| (moved[new] - base[old]).abs())
        .fold(0.0, f64::max)
}

/// Whether sampled predictions with fan-out at the maximum degree equal the
/// full-graph predictions bit for bit, for the whole graph and for random
/// batches.
pub fn minibatch_matches_full(n: usize, seed: u64) -> bool {
    use rand::seq::index;
    let (graph, _) = trip_graph(n, seed);
    let model = GatModel::new(graph.n_features(), GatConfig::default(), seed).unwrap();
    let full = model.predict_full(&graph).unwrap();
    let fanout = Some(graph.max_degree());
    let all: Vec<usize> = (0..n).collect();
    if model.predict_sampled(&graph, &all, fanout, seed).unwrap() != full {
        return false;
    }
    let mut r = rng_for(seed);
    (0..20).all(|b| {
        let size = r.random_range(1..n);
        let mut batch = index::sample(&mut r, n, size).into_vec();
        batch.sort_unstable();
        let got = model.predict_sampled(&graph, &batch, fanout, seed + b).unwrap();
        batch.iter().zip(&got).all(|(&i, p)| p.to_bits() == full[i].to_bits())
    })
}

/// Trains GAT ensembles on a 300-node graph; returns the largest variance
/// of an identical-seed ensemble and the fraction of nodes with positive
/// variance under distinct seeds.
pub fn ensemble_variance_check() -> (f64, f64) {
    use farebench::gat::{ensemble_predict, fit_ensemble, GatData};
    use farebench::nn::TrainConfig;
    let (graph, targets) = trip_graph(300, 17);
    let nodes: Vec<usize> = (0..300).collect();
    let (train, val): (Vec<usize>, Vec<usize>) = nodes.iter().partition(|&&i| i % 10 != 0);
    let data = GatData { graph, targets };
    let mut cfg = TrainConfig { max_epochs: 3, batch_size: 64, ..TrainConfig::default() };
    cfg.optimizer.learning_rate = 1e-2;
    let members = |seeds: &[u64]| -> Vec<GatModel> {
        fit_ensemble(&data, &train, &val, &GatConfig::default(), &cfg, seeds)
            .unwrap()
            .into_iter()
            .map(|(m, _)| m)
            .collect()
    };
    let same = ensemble_predict(&members(&[7, 7, 7]), &data.graph, &nodes).unwrap();
    let distinct = ensemble_predict(&members(&[1, 2, 3, 4, 5]), &data.graph, &nodes).unwrap();
    let max_same = same.variance.iter().copied().fold(0.0, f64::max);
    let positive = distinct.variance.iter().filter(|v| **v > 0.0).count() as f64 / nodes.len() as f64;
    (max_same, positive)
}

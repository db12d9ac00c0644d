//! Trip graphs and a two-layer graph-attention regressor.
//!
//! Nodes are trips. Edges join trips whose pickups fall within a time window
//! of each other, choosing the `k` nearest by pickup distance (or by fare
//! gap in [`EdgeMode::FareSimilarity`]). Every adjacency list is sorted and
//! carries a self-loop.
//!
//! A forward pass runs over a [`BatchPlan`]: the two-hop neighbourhood of the
//! batch, optionally sampled. Per-node arithmetic depends only on the node's
//! own (ordered) neighbour list, so a plan built without sampling reproduces
//! the full-graph output bit for bit.

use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Tensor2, Var};
use crate::dataset::{ColumnTable, FARE_AMOUNT, PICKUP_DATETIME, PICKUP_LATITUDE, PICKUP_LONGITUDE};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Dense, Mode, Model, ParamId, Params, TrainConfig, TrainHistory};
use crate::preprocess::haversine_km;
use crate::{par, rng};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    #[default]
    TemporalSpatial,
    FareSimilarity,
}

impl EdgeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EdgeMode::TemporalSpatial => "temporal_spatial",
            EdgeMode::FareSimilarity => "fare_similarity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub mode: EdgeMode,
    pub k: usize,
    pub time_window_s: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            mode: EdgeMode::TemporalSpatial,
            k: 8,
            time_window_s: 900.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripGraph {
    pub node_features: Tensor2,
    pub feature_names: Vec<String>,
    adjacency: Vec<Vec<usize>>,
    pub edge_rule: GraphConfig,
}

impl TripGraph {
    /// Validates and normalizes `adjacency`: lists are sorted, deduplicated
    /// and given a self-loop.
    pub fn new(
        node_features: Tensor2,
        feature_names: Vec<String>,
        mut adjacency: Vec<Vec<usize>>,
        edge_rule: GraphConfig,
    ) -> Result<Self> {
        let n = node_features.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if adjacency.len() != n || feature_names.len() != node_features.cols() {
            return Err(Error::Contract(format!(
                "graph has {n} feature rows, {} adjacency lists, {} names for {} columns",
                adjacency.len(),
                feature_names.len(),
                node_features.cols()
            )));
        }
        for (i, list) in adjacency.iter_mut().enumerate() {
            if let Some(&bad) = list.iter().find(|&&j| j >= n) {
                return Err(Error::Contract(format!("edge {i} -> {bad} out of range")));
            }
            list.push(i);
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self {
            node_features,
            feature_names,
            adjacency,
            edge_rule,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn n_features(&self) -> usize {
        self.node_features.cols()
    }

    /// Sorted neighbours of `i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// The same graph with nodes relabeled: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Contract("not a permutation".into()));
            }
            inverse[old] = new;
        }
        if perm.len() != n {
            return Err(Error::Contract("not a permutation".into()));
        }
        let mut data = Vec::with_capacity(self.node_features.len());
        for &old in perm {
            data.extend_from_slice(self.node_features.row(old));
        }
        let adjacency = perm
            .iter()
            .map(|&old| self.adjacency[old].iter().map(|&j| inverse[j]).collect())
            .collect();
        TripGraph::new(
            Tensor2::new(n, self.n_features(), data)?,
            self.feature_names.clone(),
            adjacency,
            self.edge_rule.clone(),
        )
    }

    /// Edge list as `src,dst` rows; message flow is `src → dst`.
    pub fn write_edges_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["src", "dst"])?;
        for (dst, list) in self.adjacency.iter().enumerate() {
            for src in list {
                w.write_record([src.to_string(), dst.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_node_features_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["node".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n_nodes() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.node_features.row(i).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Neighbour lists before symmetric closure and self-loops. `keys` must hold
/// pickup time, latitude and longitude, plus fare in fare-similarity mode.
/// Ties in distance go to the lower row index.
pub fn build_edges(keys: &ColumnTable, cfg: &GraphConfig) -> Result<Vec<Vec<usize>>> {
    if cfg.k == 0 {
        return Err(Error::Config("graph k must be at least 1".into()));
    }
    if !(cfg.time_window_s >= 0.0) {
        return Err(Error::Config("time window must be non-negative".into()));
    }
    let n = keys.n_rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let time = keys.column(PICKUP_DATETIME)?;
    let lat = keys.column(PICKUP_LATITUDE)?;
    let lon = keys.column(PICKUP_LONGITUDE)?;
    let fare = match cfg.mode {
        EdgeMode::FareSimilarity => Some(keys.column(FARE_AMOUNT)?),
        EdgeMode::TemporalSpatial => None,
    };
    let mut by_time: Vec<usize> = (0..n).collect();
    by_time.sort_by(|&a, &b| time[a].total_cmp(&time[b]).then(a.cmp(&b)));
    let sorted_t: Vec<f64> = by_time.iter().map(|&i| time[i]).collect();

    par::try_map_range(n, |i| {
        let lo = sorted_t.partition_point(|&t| t < time[i] - cfg.time_window_s);
        let hi = sorted_t.partition_point(|&t| t <= time[i] + cfg.time_window_s);
        let mut cands = Vec::with_capacity(hi - lo);
        for &j in &by_time[lo..hi] {
            if j == i {
                continue;
            }
            let d = match fare {
                Some(f) => (f[i] - f[j]).abs(),
                None => haversine_km(lat[i], lon[i], lat[j], lon[j])?,
            };
            cands.push((d, j));
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cands.truncate(cfg.k);
        Ok(cands.into_iter().map(|c| c.1).collect())
    })
}

/// Builds the graph over every row of `table`. Edge keys are read from the
/// raw trip columns; node features are `feature_columns`.
pub fn build_graph(table: &ColumnTable, feature_columns: &[&str], cfg: &GraphConfig) -> Result<TripGraph> {
    build_graph_split(table, table, feature_columns, cfg)
}

/// As [`build_graph`], with edge keys and node features taken from
/// row-aligned tables (typically raw and normalized).
pub fn build_graph_split(
    keys: &ColumnTable,
    features: &ColumnTable,
    feature_columns: &[&str],
    cfg: &GraphConfig,
) -> Result<TripGraph> {
    if keys.n_rows() != features.n_rows() {
        return Err(Error::Alignment(format!(
            "edge keys have {} rows, features {}",
            keys.n_rows(),
            features.n_rows()
        )));
    }
    let directed = build_edges(keys, cfg)?;
    let n = directed.len();
    let mut adjacency = directed.clone();
    for (i, list) in directed.iter().enumerate() {
        for &j in list {
            adjacency[j].push(i);
        }
    }
    let x = Tensor2::new(n, feature_columns.len(), features.row_major(feature_columns)?)?;
    TripGraph::new(
        x,
        feature_columns.iter().map(|s| s.to_string()).collect(),
        adjacency,
        cfg.clone(),
    )
}

/// Message routing for one attention layer. Input rows are indexed locally;
/// edges are grouped by output row, in each row's neighbour order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    /// Input row holding each output node's own state.
    pub dst: Vec<usize>,
    /// Input row of each edge's source.
    pub src: Vec<usize>,
    /// Output row of each edge.
    pub edge_dst: Vec<usize>,
    /// Segment starts per output row, plus a final edge count.
    pub offsets: Vec<usize>,
}

/// The two-hop computation behind a batch of predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    /// Global ids of the feature rows fed to the first layer.
    pub input_nodes: Vec<usize>,
    pub layers: [LayerPlan; 2],
}

fn sampled_neighbors(graph: &TripGraph, v: usize, fanout: Option<usize>, seed: u64, hop: u64) -> Vec<usize> {
    let all = graph.neighbors(v);
    let Some(f) = fanout else {
        return all.to_vec();
    };
    let others: Vec<usize> = all.iter().copied().filter(|&j| j != v).collect();
    if others.len() <= f {
        return all.to_vec();
    }
    let mut r = rng::rng_from(rng::keyed(rng::keyed(seed, hop), v as u64));
    let mut picked: Vec<usize> = index::sample(&mut r, others.len(), f).into_iter().map(|k| others[k]).collect();
    picked.push(v);
    picked.sort_unstable();
    picked
}

fn layer_plan(outputs: &[usize], lists: &[Vec<usize>], local: &[usize]) -> LayerPlan {
    let mut plan = LayerPlan {
        dst: outputs.iter().map(|&g| local[g]).collect(),
        src: Vec::with_capacity(lists.iter().map(Vec::len).sum()),
        edge_dst: Vec::new(),
        offsets: Vec::with_capacity(lists.len() + 1),
    };
    plan.offsets.push(0);
    for (row, list) in lists.iter().enumerate() {
        for &g in list {
            plan.src.push(local[g]);
            plan.edge_dst.push(row);
        }
        plan.offsets.push(plan.src.len());
    }
    plan
}

/// Sorted distinct members of `lists`, and each member's position.
fn union_index(lists: &[Vec<usize>], n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut mark = vec![false; n];
    for &g in lists.iter().flatten() {
        mark[g] = true;
    }
    let mut members = Vec::new();
    let mut local = vec![usize::MAX; n];
    for (g, _) in mark.iter().enumerate().filter(|(_, m)| **m) {
        local[g] = members.len();
        members.push(g);
    }
    (members, local)
}

/// Plans the two-hop neighbourhood of `batch`. With `fanout = Some(f)` each
/// node keeps its self-loop plus at most `f` other neighbours, drawn from
/// `seed`, the hop and the node id; `None` keeps every neighbour.
pub fn plan_batch(graph: &TripGraph, batch: &[usize], fanout: Option<usize>, seed: u64) -> Result<BatchPlan> {
    let n = graph.n_nodes();
    if let Some(&bad) = batch.iter().find(|&&v| v >= n) {
        return Err(Error::Contract(format!("batch node {bad} out of range for {n} nodes")));
    }
    let top: Vec<Vec<usize>> = batch.iter().map(|&v| sampled_neighbors(graph, v, fanout, seed, 1)).collect();
    let (mid, mid_local) = union_index(&top, n);
    let low: Vec<Vec<usize>> = mid.iter().map(|&v| sampled_neighbors(graph, v, fanout, seed, 0)).collect();
    let (input, input_local) = union_index(&low, n);
    Ok(BatchPlan {
        layers: [layer_plan(&mid, &low, &input_local), layer_plan(batch, &top, &mid_local)],
        input_nodes: input,
    })
}

/// Plan covering every node with its full neighbourhood.
pub fn plan_full(graph: &TripGraph) -> BatchPlan {
    let all: Vec<usize> = (0..graph.n_nodes()).collect();
    let lists: Vec<Vec<usize>> = all.iter().map(|&v| graph.neighbors(v).to_vec()).collect();
    let layer = layer_plan(&all, &lists, &all);
    BatchPlan {
        input_nodes: all,
        layers: [layer.clone(), layer],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatConfig {
    pub hidden_dim: usize,
    pub attention_dropout: f64,
    pub fanout: usize,
}

impl Default for GatConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            attention_dropout: 0.3,
            fanout: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatLayer {
    pub weight: ParamId,
    /// `1 x 2·out`: destination half, then source half.
    pub attention: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Attention coefficients and layer output for one plan layer.
pub struct LayerOutput {
    pub alpha: Var,
    pub h: Var,
}

impl GatLayer {
    fn new(params: &mut Params, name: &str, in_dim: usize, out_dim: usize, r: &mut rand_chacha::ChaCha8Rng) -> Self {
        let weight = params.add(format!("{name}.weight"), nn::xavier_uniform(in_dim, out_dim, r));
        let attention = params.add(format!("{name}.attention"), nn::xavier_uniform(1, 2 * out_dim, r));
        Self {
            weight,
            attention,
            in_dim,
            out_dim,
        }
    }

    /// `h'_i = tanh(Σ_j α_ij W h_j)` with
    /// `α_i· = softmax_j(leaky_relu(a_dst·W h_i + a_src·W h_j))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        h: Var,
        plan: &LayerPlan,
        dropout: f64,
        seed: u64,
        train: bool,
    ) -> std::result::Result<LayerOutput, AutodiffError> {
        let out = self.out_dim;
        let wh = tape.matmul(h, vars[self.weight.0])?;
        let a = vars[self.attention.0];
        let a_dst = tape.gather(a, (0..out).map(Some).collect(), out, 1)?;
        let a_src = tape.gather(a, (out..2 * out).map(Some).collect(), out, 1)?;
        let s_dst = tape.matmul(wh, a_dst)?;
        let s_src = tape.matmul(wh, a_src)?;
        let dst_of_edge: Vec<usize> = plan.edge_dst.iter().map(|&r| plan.dst[r]).collect();
        let e_dst = tape.gather_rows(s_dst, &dst_of_edge)?;
        let e_src = tape.gather_rows(s_src, &plan.src)?;
        let e = tape.add(e_dst, e_src)?;
        let e = tape.leaky_relu(e, LEAKY_SLOPE)?;
        let alpha = tape.segment_softmax(e, plan.offsets.clone())?;
        let dropped = tape.dropout(alpha, dropout, seed, train)?;
        let msg_src = tape.gather_rows(wh, &plan.src)?;
        let msg = tape.scale_rows(msg_src, dropped)?;
        let agg = tape.scatter_add_rows(msg, plan.edge_dst.clone(), plan.dst.len())?;
        Ok(LayerOutput {
            alpha,
            h: tape.tanh(agg)?,
        })
    }
}

/// Node features plus regression targets, one per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GatData {
    pub graph: TripGraph,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatModel {
    pub config: GatConfig,
    pub seed: u64,
    pub in_dim: usize,
    layers: [GatLayer; 2],
    head: Dense,
    params: Params,
}

impl GatModel {
    pub fn new(in_dim: usize, config: GatConfig, seed: u64) -> Result<Self> {
        if in_dim == 0 || config.hidden_dim == 0 {
            return Err(Error::Config("GAT needs input features and a non-zero hidden width".into()));
        }
        if !(0.0..1.0).contains(&config.attention_dropout) {
            return Err(Error::Config("attention dropout must be in [0, 1)".into()));
        }
        let mut params = Params::new();
        let mut r = rng::rng_from(rng::derive_seed(seed, "gat.init"));
        let hd = config.hidden_dim;
        let layers = [
            GatLayer::new(&mut params, "gat0", in_dim, hd, &mut r),
            GatLayer::new(&mut params, "gat1", hd, hd, &mut r),
        ];
        let head = Dense::new(&mut params, "head", hd, 1, Activation::Identity, &mut r);
        Ok(Self {
            config,
            seed,
            in_dim,
            layers,
            head,
            params,
        })
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

    /// Runs a plan on `tape`. Returns the per-layer attention coefficients
    /// and the `batch x 1` predictions.
    pub fn forward_plan(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        graph: &TripGraph,
        plan: &BatchPlan,
        mode: Mode,
    ) -> std::result::Result<(Vec<Var>, Var), AutodiffError> {
        if graph.n_features() != self.in_dim {
            return Err(AutodiffError::Shape {
                op: "gat_forward",
                left: (graph.n_nodes(), graph.n_features()),
                right: (self.in_dim, self.config.hidden_dim),
            });
        }
        let x = tape.constant(select_rows(&graph.node_features, &plan.input_nodes));
        let mut h = x;
        let mut alphas = Vec::with_capacity(2);
        for (l, (layer, lp)) in self.layers.iter().zip(&plan.layers).enumerate() {
            let seed = mode.seed_for(&format!("gat.attention{l}"));
            let out = layer.forward(tape, vars, h, lp, self.config.attention_dropout, seed, mode.is_train())?;
            alphas.push(out.alpha);
            h = out.h;
        }
        let pred = self.head.forward(tape, vars, h)?;
        Ok((alphas, pred))
    }

    /// Eval-mode predictions for `nodes` through `plan_batch` with the given
    /// fan-out.
    pub fn predict_sampled(&self, graph: &TripGraph, nodes: &[usize], fanout: Option<usize>, seed: u64) -> Result<Vec<f64>> {
        let plan = plan_batch(graph, nodes, fanout, seed)?;
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let (_, pred) = self.forward_plan(&mut tape, &vars, graph, &plan, Mode::Eval)?;
        Ok(tape.value(pred).data().to_vec())
    }

    /// Eval-mode predictions for every node, computed over the whole graph.
    pub fn predict_full(&self, graph: &TripGraph) -> Result<Vec<f64>> {
        let plan = plan_full(graph);
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let (_, pred) = self.forward_plan(&mut tape, &vars, graph, &plan, Mode::Eval)?;
        Ok(tape.value(pred).data().to_vec())
    }

    /// Eval-mode predictions for `nodes` in parallel chunks, each over its
    /// full two-hop neighbourhood.
    pub fn predict(&self, graph: &TripGraph, nodes: &[usize]) -> Result<Vec<f64>> {
        let chunks: Vec<&[usize]> = nodes.chunks(PREDICT_CHUNK).collect();
        let parts = par::map_slice(&chunks, |c| self.predict_sampled(graph, c, None, 0));
        let mut out = Vec::with_capacity(nodes.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

const PREDICT_CHUNK: usize = 512;

fn select_rows(t: &Tensor2, rows: &[usize]) -> Tensor2 {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor2::new(rows.len(), t.cols(), data).expect("sized buffer")
}

impl Model for GatModel {
    type Data = GatData;

    fn params(&self) -> &Params {
        &self.params
    }

    fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Train mode samples neighbours with the configured fan-out; eval mode
    /// uses full neighbourhoods.
    fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        data: &GatData,
        items: &[usize],
        mode: Mode,
    ) -> std::result::Result<Var, AutodiffError> {
        let (fanout, seed) = match mode {
            Mode::Train { .. } => (Some(self.config.fanout), mode.seed_for("gat.sample")),
            Mode::Eval => (None, 0),
        };
        let plan = plan_batch(&data.graph, items, fanout, seed).map_err(|e| AutodiffError::InvalidArgument {
            op: "gat_plan",
            detail: e.to_string(),
        })?;
        Ok(self.forward_plan(tape, vars, &data.graph, &plan, mode)?.1)
    }

    fn targets(&self, data: &GatData, items: &[usize]) -> Tensor2 {
        Tensor2::column(items.iter().map(|&i| data.targets[i]).collect())
    }
}

fn check_splits(n: usize, train: &[usize], val: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in train {
        if i >= n {
            return Err(Error::Contract(format!("node {i} out of range for {n} nodes")));
        }
        seen[i] = true;
    }
    for &i in val {
        if i >= n {
            return Err(Error::Contract(format!("node {i} out of range for {n} nodes")));
        }
        if seen[i] {
            return Err(Error::Contract(format!("node {i} is in both train and validation splits")));
        }
    }
    Ok(())
}

/// Trains one model with `cfg.seed` for initialization, shuffling, sampling
/// and dropout.
pub fn fit_gat(
    data: &GatData,
    train_nodes: &[usize],
    val_nodes: &[usize],
    gat_cfg: &GatConfig,
    cfg: &TrainConfig,
) -> Result<(GatModel, TrainHistory)> {
    if data.targets.len() != data.graph.n_nodes() {
        return Err(Error::Alignment(format!(
            "{} targets for {} nodes",
            data.targets.len(),
            data.graph.n_nodes()
        )));
    }
    check_splits(data.graph.n_nodes(), train_nodes, val_nodes)?;
    let mut model = GatModel::new(data.graph.n_features(), gat_cfg.clone(), cfg.seed)?;
    let history = nn::train(&mut model, data, train_nodes, val_nodes, cfg)?;
    Ok((model, history))
}

/// Trains one member per seed, in parallel.
pub fn fit_ensemble(
    data: &GatData,
    train_nodes: &[usize],
    val_nodes: &[usize],
    gat_cfg: &GatConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<(GatModel, TrainHistory)>> {
    par::try_map_range(seeds.len(), |m| {
        let c = TrainConfig {
            seed: seeds[m],
            ..cfg.clone()
        };
        fit_gat(data, train_nodes, val_nodes, gat_cfg, &c)
    })
}

/// Per-node mean and population variance across ensemble members.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Mean and population variance of member predictions. The variance uses
/// the pairwise form `Σ_ij (p_i − p_j)² / 2M²`, which is exactly zero when
/// all members agree.
pub fn combine_predictions(members: &[Vec<f64>]) -> Result<EnsemblePrediction> {
    let m = members.len();
    if m < 2 {
        return Err(Error::Ensemble(format!("ensemble needs at least 2 members, got {m}")));
    }
    let n = members[0].len();
    if members.iter().any(|p| p.len() != n) {
        return Err(Error::Alignment("ensemble members predicted different node counts".into()));
    }
    let mf = m as f64;
    let mut mean = vec![0.0; n];
    let mut variance = vec![0.0; n];
    for i in 0..n {
        mean[i] = members.iter().map(|p| p[i]).sum::<f64>() / mf;
        let mut s = 0.0;
        for a in 0..m {
            for b in a + 1..m {
                let d = members[a][i] - members[b][i];
                s += d * d;
            }
        }
        variance[i] = s / (mf * mf);
    }
    Ok(EnsemblePrediction { mean, variance })
}

pub fn ensemble_predict(models: &[GatModel], graph: &TripGraph, nodes: &[usize]) -> Result<EnsemblePrediction> {
    if models.len() < 2 {
        return Err(Error::Ensemble(format!("ensemble needs at least 2 members, got {}", models.len())));
    }
    let preds = models.iter().map(|m| m.predict(graph, nodes)).collect::<Result<Vec<_>>>()?;
    combine_predictions(&preds)
}

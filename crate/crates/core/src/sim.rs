//! Desk-scale training simulator for cell DAGs.
//!
//! Every node holds a feature vector; node 0 is the input (dimension
//! `d_in`), every other node has width `m`. A parameterized edge computes
//! `sqrt(c_σ/m) · s ⊙ relu(W x)` with `W` drawn i.i.d. `N(0, 1)`, which keeps
//! `⟨X_i, X_j⟩` on the NNGP scale (unit-norm inputs give unit-norm features).
//! `s` is a fixed random ±1 vector per edge; it makes branches meeting at a
//! node uncorrelated in expectation, so the init-time Gram matrix matches the
//! summed NNGP kernel. With `sign_mixing` off every `s` is all ones.
//! Skip and pooling edges are identities; a skip leaving node 0 zero-pads the
//! input up to width `m`. Incoming edges are summed, and a linear readout
//! maps the output node to class scores.
//!
//! Training is plain minibatch SGD, single threaded and fully determined by
//! the seed.

use std::fmt::Write as _;
use std::io::Read;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::graph::{enumerate_paths, ArchGraph, OpKind};
use crate::nngp::C_SIGMA;

/// Default synthetic task: 10 classes of 100 samples in 32 dimensions.
pub const DEFAULT_CLASSES: usize = 10;
pub const DEFAULT_PER_CLASS: usize = 100;
pub const DEFAULT_INPUT_DIM: usize = 32;
pub const DEFAULT_BLOB_NOISE: f64 = 1.5;
/// Training-accuracy threshold for convergence comparisons.
pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("output node is unreachable")]
    Unreachable,
    #[error("skip from the input needs d_in <= width, got d_in={input_dim}, width={width}")]
    DimensionMismatch { input_dim: usize, width: usize },
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize, trace: RunTrace },
}

impl SimError {
    pub fn code(&self) -> &'static str {
        match self {
            SimError::Unreachable => "Unreachable",
            SimError::DimensionMismatch { .. } => "DimensionMismatch",
            SimError::InvalidConfig(_) => "InvalidConfig",
            SimError::Dataset(_) => "Dataset",
            SimError::Divergence { .. } => "Divergence",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Loss {
    /// `½‖y − u‖²` against one-hot targets, averaged over the batch.
    #[default]
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub width: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss: Loss,
    pub sign_mixing: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            width: 256,
            lr: 0.15,
            batch_size: 128,
            epochs: 30,
            seed: 0,
            loss: Loss::Mse,
            sign_mixing: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.width == 0 {
            return Err(SimError::InvalidConfig("width must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(SimError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(SimError::InvalidConfig(
                "lr must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Labeled features, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self, SimError> {
        if features.nrows() != labels.len() {
            return Err(SimError::Dataset(format!(
                "{} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(SimError::Dataset("no samples".into()));
        }
        let num_classes = labels.iter().max().unwrap() + 1;
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Gaussian blobs around random unit-norm class centers; every sample is
    /// renormalized to unit norm.
    pub fn synthetic_blobs(
        num_classes: usize,
        per_class: usize,
        input_dim: usize,
        noise: f64,
        seed: u64,
    ) -> Result<Self, SimError> {
        if num_classes == 0 || per_class == 0 || input_dim == 0 {
            return Err(SimError::Dataset("blob sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers = Array2::from_shape_simple_fn((num_classes, input_dim), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        normalize_rows(&mut centers);
        let n = num_classes * per_class;
        let mut features = Array2::zeros((n, input_dim));
        let mut labels = Vec::with_capacity(n);
        let per_dim = noise / (input_dim as f64).sqrt();
        for i in 0..n {
            let class = i % num_classes;
            for j in 0..input_dim {
                features[(i, j)] =
                    centers[(class, j)] + per_dim * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(class);
        }
        normalize_rows(&mut features);
        Dataset::new(features, labels)
    }

    /// The default synthetic task with data drawn from `seed`.
    pub fn default_synthetic(seed: u64) -> Self {
        Dataset::synthetic_blobs(
            DEFAULT_CLASSES,
            DEFAULT_PER_CLASS,
            DEFAULT_INPUT_DIM,
            DEFAULT_BLOB_NOISE,
            seed,
        )
        .expect("default sizes are positive")
    }

    /// Rows of `label,feat0,feat1,...` with no header. Features are expected
    /// to be unit norm already and are used as given.
    pub fn from_csv_features<R: Read>(reader: R) -> Result<Self, SimError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| SimError::Dataset(format!("row {}: {e}", idx + 1)))?;
            let bad = |what: &str| SimError::Dataset(format!("row {}: {what}", idx + 1));
            let label = rec.get(0).ok_or_else(|| bad("empty row"))?;
            labels.push(
                label
                    .parse::<usize>()
                    .map_err(|_| bad("label is not a class index"))?,
            );
            let feats = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad("feature is not a finite number"))?;
            if feats.is_empty() {
                return Err(bad("no features"));
            }
            rows.push(feats);
        }
        let dim = rows.first().map_or(0, Vec::len);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((labels.len(), dim), flat)
            .map_err(|_| SimError::Dataset("rows have different lengths".into()))?;
        Dataset::new(features, labels)
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ParamEdge {
    src: usize,
    dst: usize,
    /// `m × dim(src)`
    weight: Array2<f64>,
    /// Fixed output signs, length `m`.
    signs: Array1<f64>,
}

/// A fully-connected network wired like an [`ArchGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct DagNet {
    graph: ArchGraph,
    width: usize,
    input_dim: usize,
    params: Vec<ParamEdge>,
    /// `classes × m`
    readout: Array2<f64>,
}

/// Activations kept for the backward pass.
struct Forward {
    nodes: Vec<Array2<f64>>,
    /// Pre-activations of each parameterized edge, `B × m`.
    pre: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

/// Gradients in the order of [`DagNet::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Array2<f64>>);

/// Build a network for `g`. Weights come from `cfg.seed`; the readout is
/// `N(0, 1/m)`.
pub fn build_net(
    g: &ArchGraph,
    input_dim: usize,
    num_classes: usize,
    cfg: &SimConfig,
) -> Result<DagNet, SimError> {
    cfg.validate()?;
    if enumerate_paths(g).num_paths() == 0 {
        return Err(SimError::Unreachable);
    }
    let m = cfg.width;
    if input_dim > m && g.live_edges().any(|e| e.src == 0 && e.op != OpKind::Param) {
        return Err(SimError::DimensionMismatch {
            input_dim,
            width: m,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = |rows: usize, cols: usize, std: f64| {
        Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
    };
    let mut params: Vec<ParamEdge> = g
        .live_edges()
        .filter(|e| e.op == OpKind::Param)
        .map(|e| {
            let fan_in = if e.src == 0 { input_dim } else { m };
            ParamEdge {
                src: e.src,
                dst: e.dst,
                weight: normal(m, fan_in, 1.0),
                signs: Array1::ones(m),
            }
        })
        .collect();
    let readout = normal(num_classes, m, 1.0 / (m as f64).sqrt());
    if cfg.sign_mixing {
        for p in &mut params {
            p.signs
                .mapv_inplace(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        }
    }
    Ok(DagNet {
        graph: g.clone(),
        width: m,
        input_dim,
        params,
        readout,
    })
}

impl DagNet {
    pub fn graph(&self) -> &ArchGraph {
        &self.graph
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_weight_matrices(&self) -> usize {
        self.params.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.weight.len()).sum::<usize>() + self.readout.len()
    }

    /// Edge weights in edge order, then the readout.
    pub fn params(&self) -> impl Iterator<Item = &Array2<f64>> + '_ {
        self.params
            .iter()
            .map(|p| &p.weight)
            .chain(std::iter::once(&self.readout))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> + '_ {
        self.params
            .iter_mut()
            .map(|p| &mut p.weight)
            .chain(std::iter::once(&mut self.readout))
    }

    fn edge_scale(&self) -> f64 {
        (C_SIGMA / self.width as f64).sqrt()
    }

    fn pad_input(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.width));
        out.slice_mut(s![.., ..self.input_dim]).assign(&x);
        out
    }

    fn forward(&self, x: ArrayView2<f64>) -> Forward {
        let batch = x.nrows();
        let scale = self.edge_scale();
        let n = self.graph.num_nodes();
        let mut nodes: Vec<Array2<f64>> = Vec::with_capacity(n);
        nodes.push(x.to_owned());
        let mut pre = vec![Array2::zeros((0, 0)); self.params.len()];
        let mut padded: Option<Array2<f64>> = None;
        for node in 1..n {
            let mut acc = Array2::zeros((batch, self.width));
            for e in self.graph.incoming(node) {
                match e.op {
                    OpKind::Param => {
                        let k = self.param_index(e.src, e.dst);
                        let z = nodes[e.src].dot(&self.params[k].weight.t());
                        let out = z.mapv(|v| v.max(0.0)) * &self.params[k].signs;
                        acc.scaled_add(scale, &out);
                        pre[k] = z;
                    }
                    OpKind::Skip | OpKind::NonParam
                        if e.src == 0 && self.input_dim != self.width =>
                    {
                        let p = padded.get_or_insert_with(|| self.pad_input(x));
                        acc += &*p;
                    }
                    OpKind::Skip | OpKind::NonParam => acc += &nodes[e.src],
                    OpKind::Zero => unreachable!("live edges only"),
                }
            }
            nodes.push(acc);
        }
        let logits = nodes[n - 1].dot(&self.readout.t());
        Forward { nodes, pre, logits }
    }

    fn param_index(&self, src: usize, dst: usize) -> usize {
        self.params
            .iter()
            .position(|p| p.src == src && p.dst == dst)
            .expect("param edge")
    }

    /// Output-node features for a batch, `B × m`.
    pub fn output_features(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).nodes.pop().unwrap()
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).logits
    }

    /// Mean loss over the batch.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[usize], loss: Loss) -> f64 {
        let logits = self.forward(x).logits;
        loss_and_dlogits(&logits, labels, loss).0
    }

    /// Mean loss and its gradient with respect to every parameter.
    pub fn loss_and_gradients(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        loss: Loss,
    ) -> (f64, Gradients) {
        let fwd = self.forward(x);
        let (value, dlogits) = loss_and_dlogits(&fwd.logits, labels, loss);
        let n = self.graph.num_nodes();
        let scale = self.edge_scale();

        let mut grads: Vec<Array2<f64>> = self
            .params
            .iter()
            .map(|p| Array2::zeros(p.weight.dim()))
            .collect();
        let d_readout = dlogits.t().dot(&fwd.nodes[n - 1]);
        let mut node_grads: Vec<Option<Array2<f64>>> = vec![None; n];
        node_grads[n - 1] = Some(dlogits.dot(&self.readout));

        for node in (1..n).rev() {
            let Some(g_out) = node_grads[node].take() else {
                continue;
            };
            for e in self.graph.incoming(node) {
                let upstream = match e.op {
                    OpKind::Param => {
                        let k = self.param_index(e.src, e.dst);
                        let mut d_pre = g_out.clone() * &self.params[k].signs;
                        d_pre.zip_mut_with(&fwd.pre[k], |g, &z| {
                            *g = if z > 0.0 { *g * scale } else { 0.0 }
                        });
                        grads[k] = d_pre.t().dot(&fwd.nodes[e.src]);
                        if e.src == 0 {
                            continue;
                        }
                        d_pre.dot(&self.params[k].weight)
                    }
                    _ if e.src == 0 => continue,
                    _ => g_out.clone(),
                };
                match &mut node_grads[e.src] {
                    Some(acc) => *acc += &upstream,
                    slot => *slot = Some(upstream),
                }
            }
        }
        grads.push(d_readout);
        (value, Gradients(grads))
    }

    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params_mut().zip(&grads.0) {
            p.scaled_add(-lr, g);
        }
    }

    /// Mean loss and accuracy (fraction in `[0, 1]`) over a dataset.
    pub fn evaluate(&self, data: &Dataset, loss: Loss) -> (f64, f64) {
        let logits = self.logits(data.features.view());
        let (value, _) = loss_and_dlogits(&logits, &data.labels, loss);
        let correct = logits
            .rows()
            .into_iter()
            .zip(&data.labels)
            .filter(|(row, &label)| argmax(row.iter().copied()) == label)
            .count();
        (value, correct as f64 / data.len() as f64)
    }
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    xs.enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Mean loss over rows of `logits` and `d loss / d logits`.
fn loss_and_dlogits(logits: &Array2<f64>, labels: &[usize], loss: Loss) -> (f64, Array2<f64>) {
    let batch = logits.nrows() as f64;
    let mut d = logits.clone();
    let mut total = 0.0;
    for (mut row, &label) in d.rows_mut().into_iter().zip(labels) {
        match loss {
            Loss::Mse => {
                row[label] -= 1.0;
                total += 0.5 * row.dot(&row);
            }
            Loss::CrossEntropy => {
                let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - max).exp());
                let z = row.sum();
                total -= (row[label] / z).ln();
                row /= z;
                row[label] -= 1.0;
            }
        }
    }
    d /= batch;
    (total / batch, d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Per-epoch training loss and accuracy. Entry 0 is the untrained network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub epochs: Vec<EpochStats>,
}

impl RunTrace {
    /// First epoch whose training accuracy reaches `threshold`.
    pub fn epochs_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.accuracy >= threshold)
            .map(|e| e.epoch)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.accuracy)
    }

    /// Fraction of epochs whose loss did not increase over the previous one.
    pub fn nonincreasing_fraction(&self) -> f64 {
        let steps = self.epochs.len().saturating_sub(1);
        if steps == 0 {
            return 1.0;
        }
        let ok = self
            .epochs
            .windows(2)
            .filter(|w| w[1].loss <= w[0].loss)
            .count();
        ok as f64 / steps as f64
    }

    /// `epoch,loss,accuracy` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,accuracy\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.loss, e.accuracy).unwrap();
        }
        out
    }
}

/// Train with minibatch SGD. Batch order is reshuffled each epoch from a
/// stream derived from `cfg.seed`.
pub fn train(net: &mut DagNet, data: &Dataset, cfg: &SimConfig) -> Result<RunTrace, SimError> {
    cfg.validate()?;
    if data.input_dim() != net.input_dim {
        return Err(SimError::Dataset(format!(
            "expected {} features, got {}",
            net.input_dim,
            data.input_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = RunTrace::default();

    let (loss, accuracy) = net.evaluate(data, cfg.loss);
    trace.epochs.push(EpochStats {
        epoch: 0,
        loss,
        accuracy,
    });
    if !loss.is_finite() {
        return Err(SimError::Divergence { epoch: 0, trace });
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (_, grads) = net.loss_and_gradients(x.view(), &labels, cfg.loss);
            net.sgd_step(&grads, cfg.lr);
        }
        let (loss, accuracy) = net.evaluate(data, cfg.loss);
        trace.epochs.push(EpochStats {
            epoch,
            loss,
            accuracy,
        });
        if !loss.is_finite() {
            return Err(SimError::Divergence { epoch, trace });
        }
    }
    Ok(trace)
}

/// One graph's results across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    /// Median epochs to threshold; `None` when the median run never got there.
    pub median_epochs: Option<f64>,
    pub median_final_accuracy: f64,
    /// One entry per seed, in seed order.
    pub runs: Vec<(u64, Result<RunTrace, SimError>)>,
}

/// Median treating `None` as +∞.
fn median_epochs(values: &mut [Option<usize>]) -> Option<f64> {
    let key = |v: &Option<usize>| v.map_or(f64::INFINITY, |e| e as f64);
    let mut xs: Vec<f64> = values.iter().map(key).collect();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let mid = if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    };
    mid.is_finite().then_some(mid)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => xs[n / 2],
        _ => (xs[n / 2 - 1] + xs[n / 2]) / 2.0,
    }
}

/// Build a fresh network for `g` with `cfg.seed` and train it.
pub fn run_once(g: &ArchGraph, data: &Dataset, cfg: &SimConfig) -> Result<RunTrace, SimError> {
    let mut net = build_net(g, data.input_dim(), data.num_classes, cfg)?;
    train(&mut net, data, cfg)
}

/// Medians over one graph's runs. A failed run counts as never reaching the
/// threshold and as final accuracy 0.
pub fn summarize_runs(
    name: String,
    runs: Vec<(u64, Result<RunTrace, SimError>)>,
    threshold: f64,
) -> ComparisonRow {
    let mut reached: Vec<Option<usize>> = runs
        .iter()
        .map(|(_, r)| {
            r.as_ref()
                .ok()
                .and_then(|t| t.epochs_to_threshold(threshold))
        })
        .collect();
    let finals = runs
        .iter()
        .map(|(_, r)| r.as_ref().map_or(0.0, RunTrace::final_accuracy))
        .collect();
    ComparisonRow {
        name,
        median_epochs: median_epochs(&mut reached),
        median_final_accuracy: median(finals),
        runs,
    }
}

/// Fewer median epochs first, `None` last; ties go to higher median final
/// accuracy. The sort is stable.
pub fn rank_rows(rows: &mut [ComparisonRow]) {
    rows.sort_by(|a, b| {
        let ea = a.median_epochs.unwrap_or(f64::INFINITY);
        let eb = b.median_epochs.unwrap_or(f64::INFINITY);
        ea.total_cmp(&eb)
            .then(b.median_final_accuracy.total_cmp(&a.median_final_accuracy))
    });
}

/// Train every graph once per seed on the same data and rank graphs by
/// median epochs to `threshold` training accuracy.
pub fn compare_dags(
    graphs: &[(String, ArchGraph)],
    data: &Dataset,
    cfg: &SimConfig,
    seeds: &[u64],
    threshold: f64,
) -> Result<Vec<ComparisonRow>, SimError> {
    if graphs.len() < 2 {
        return Err(SimError::InvalidConfig(
            "need at least two graphs to compare".into(),
        ));
    }
    cfg.validate()?;
    let mut rows: Vec<ComparisonRow> = graphs
        .iter()
        .map(|(name, g)| {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    (
                        seed,
                        run_once(
                            g,
                            data,
                            &SimConfig {
                                seed,
                                ..cfg.clone()
                            },
                        ),
                    )
                })
                .collect();
            summarize_runs(name.clone(), runs, threshold)
        })
        .collect();
    rank_rows(&mut rows);
    Ok(rows)
}

/// Ranking as TSV: `rank, name, median_epochs, median_final_acc, failed_runs`.
pub fn comparison_tsv(rows: &[ComparisonRow], threshold: f64) -> String {
    let mut out = format!(
        "# threshold={threshold}\nrank\tname\tmedian_epochs\tmedian_final_acc\tfailed_runs\n"
    );
    for (i, r) in rows.iter().enumerate() {
        let epochs = r
            .median_epochs
            .map_or("none".to_string(), |e| e.to_string());
        let failed = r.runs.iter().filter(|(_, t)| t.is_err()).count();
        writeln!(
            out,
            "{}\t{}\t{}\t{:.4}\t{}",
            i + 1,
            r.name,
            epochs,
            r.median_final_accuracy,
            failed
        )
        .unwrap();
    }
    out
}

/// Empirical `⟨X_i, X_j⟩` at the output node, averaged over fresh
/// initializations with the given seeds.
pub fn empirical_output_gram(
    g: &ArchGraph,
    inputs: ArrayView2<f64>,
    width: usize,
    seeds: &[u64],
) -> Result<Array2<f64>, SimError> {
    let n = inputs.nrows();
    let mut acc = Array2::zeros((n, n));
    for &seed in seeds {
        let cfg = SimConfig {
            width,
            seed,
            ..SimConfig::default()
        };
        let net = build_net(g, inputs.ncols(), 1, &cfg)?;
        let feats = net.output_features(inputs);
        acc += &feats.dot(&feats.t());
    }
    Ok(acc / seeds.len() as f64)
}

/// Class means of a dataset, `classes × d_in`; handy for sanity checks.
pub fn class_means(data: &Dataset) -> Array2<f64> {
    let mut sums = Array2::zeros((data.num_classes, data.input_dim()));
    let mut counts = Array1::<f64>::zeros(data.num_classes);
    for (row, &label) in data.features.rows().into_iter().zip(&data.labels) {
        let mut target = sums.row_mut(label);
        target += &row;
        counts[label] += 1.0;
    }
    for (mut row, &c) in sums.rows_mut().into_iter().zip(counts.iter()) {
        if c > 0.0 {
            row /= c;
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::builtin;

    fn tiny_cfg() -> SimConfig {
        SimConfig {
            width: 8,
            lr: 0.1,
            batch_size: 4,
            epochs: 5,
            seed: 3,
            loss: Loss::Mse,
            sign_mixing: true,
        }
    }

    #[test]
    fn weight_matrices_follow_param_edges() {
        let cfg = tiny_cfg();
        let net1 = build_net(&builtin::dag1(), 5, 3, &cfg).unwrap();
        assert_eq!(net1.num_weight_matrices(), 3);
        let net2 = build_net(&builtin::dag2(), 5, 3, &cfg).unwrap();
        assert_eq!(net2.num_weight_matrices(), 3);
        assert_eq!(net2.graph().count_ops(OpKind::Skip), 2);
        // every param edge leaves a width-8 node except those from the input
        assert_eq!(net2.num_parameters(), 8 * 5 + 8 * 8 + 8 * 8 + 3 * 8);
    }

    fn max_gradient_error(g: &ArchGraph, loss: Loss) -> f64 {
        let data = Dataset::synthetic_blobs(3, 1, 5, 0.5, 11).unwrap();
        let cfg = SimConfig {
            width: 8,
            ..tiny_cfg()
        };
        let mut net = build_net(g, 5, 3, &cfg).unwrap();
        let x = data.features.view();
        let (_, grads) = net.loss_and_gradients(x, &data.labels, loss);
        let step = 1e-4;
        let mut worst: f64 = 0.0;
        for (k, analytic) in grads.0.iter().enumerate() {
            for idx in 0..analytic.len() {
                let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
                let nudge = |net: &mut DagNet, delta: f64| {
                    net.params_mut().nth(k).unwrap()[(r, c)] += delta;
                };
                nudge(&mut net, step);
                let up = net.loss(x, &data.labels, loss);
                nudge(&mut net, -2.0 * step);
                let down = net.loss(x, &data.labels, loss);
                nudge(&mut net, step);
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[(r, c)];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (name, g) in builtin::all() {
            for loss in [Loss::Mse, Loss::CrossEntropy] {
                let err = max_gradient_error(&g, loss);
                assert!(err < 1e-3, "{name} {loss:?}: {err}");
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = tiny_cfg();
        let a = build_net(&builtin::dag3(), 5, 3, &cfg).unwrap();
        let b = build_net(&builtin::dag3(), 5, 3, &cfg).unwrap();
        assert_eq!(a, b);
        let c = build_net(&builtin::dag3(), 5, 3, &SimConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn build_errors() {
        let cut = builtin::dag1().with_op(1, 2, OpKind::Zero).unwrap();
        assert_eq!(
            build_net(&cut, 4, 2, &tiny_cfg()),
            Err(SimError::Unreachable)
        );
        assert!(matches!(
            build_net(&builtin::dag2(), 9, 2, &tiny_cfg()),
            Err(SimError::DimensionMismatch { .. })
        ));
        // only param edges leave the input here, so a wide input is fine
        assert!(build_net(&builtin::dag1(), 9, 2, &tiny_cfg()).is_ok());
        assert!(build_net(
            &builtin::dag1(),
            4,
            2,
            &SimConfig {
                width: 0,
                ..tiny_cfg()
            }
        )
        .is_err());
    }

    #[test]
    fn zero_padding_skip_preserves_inner_products() {
        let data = Dataset::synthetic_blobs(2, 3, 4, 0.3, 1).unwrap();
        // 0 -> 1 skip only
        let g = ArchGraph::new(2, [crate::graph::Edge::new(0, 1, OpKind::Skip)]).unwrap();
        let net = build_net(
            &g,
            4,
            2,
            &SimConfig {
                width: 8,
                ..tiny_cfg()
            },
        )
        .unwrap();
        let f = net.output_features(data.features.view());
        let gram = f.dot(&f.t());
        let want = data.features.dot(&data.features.t());
        assert!((&gram - &want).iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let data = Dataset::synthetic_blobs(3, 10, 6, 0.5, 2).unwrap();
        let cfg = SimConfig {
            lr: 0.0,
            ..tiny_cfg()
        };
        let mut net = build_net(&builtin::dag3(), 6, 3, &cfg).unwrap();
        let trace = train(&mut net, &data, &cfg).unwrap();
        assert_eq!(trace.epochs.len(), 6);
        assert!(trace.epochs.iter().all(|e| e.loss == trace.epochs[0].loss));
    }

    #[test]
    fn single_sample_is_memorized() {
        for loss in [Loss::Mse, Loss::CrossEntropy] {
            let data = Dataset::new(ndarray::array![[0.6, 0.8]], vec![2]).unwrap();
            let cfg = SimConfig {
                width: 16,
                lr: 0.1,
                batch_size: 1,
                epochs: 50,
                seed: 9,
                loss,
                sign_mixing: true,
            };
            let mut net = build_net(&builtin::dag1(), 2, 3, &cfg).unwrap();
            let trace = train(&mut net, &data, &cfg).unwrap();
            assert_eq!(trace.final_accuracy(), 1.0);
        }
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let data = Dataset::synthetic_blobs(3, 10, 6, 0.5, 2).unwrap();
        let cfg = SimConfig {
            lr: 1e6,
            ..tiny_cfg()
        };
        let mut net = build_net(&builtin::dag3(), 6, 3, &cfg).unwrap();
        match train(&mut net, &data, &cfg) {
            Err(SimError::Divergence { epoch, trace }) => {
                assert!(epoch >= 1);
                assert_eq!(trace.epochs.len(), epoch + 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_helpers() {
        let trace = RunTrace {
            epochs: vec![
                EpochStats {
                    epoch: 0,
                    loss: 2.0,
                    accuracy: 0.1,
                },
                EpochStats {
                    epoch: 1,
                    loss: 1.0,
                    accuracy: 0.5,
                },
                EpochStats {
                    epoch: 2,
                    loss: 1.5,
                    accuracy: 0.85,
                },
            ],
        };
        assert_eq!(trace.epochs_to_threshold(0.8), Some(2));
        assert_eq!(trace.epochs_to_threshold(0.9), None);
        assert_eq!(trace.nonincreasing_fraction(), 0.5);
        assert_eq!(
            trace.to_csv(),
            "epoch,loss,accuracy\n0,2,0.1\n1,1,0.5\n2,1.5,0.85\n"
        );
    }

    #[test]
    fn medians() {
        assert_eq!(median_epochs(&mut [Some(3), None, Some(1)]), Some(3.0));
        assert_eq!(median_epochs(&mut [Some(3), None, None]), None);
        assert_eq!(median_epochs(&mut [Some(2), Some(4)]), Some(3.0));
        assert_eq!(median_epochs(&mut [Some(2), None]), None);
    }

    #[test]
    fn comparison_is_deterministic_and_ranks_unreached_last() {
        let data = Dataset::synthetic_blobs(3, 12, 6, 0.4, 5).unwrap();
        let cfg = SimConfig {
            width: 16,
            lr: 0.2,
            batch_size: 8,
            epochs: 8,
            seed: 0,
            loss: Loss::Mse,
            sign_mixing: true,
        };
        let graphs = vec![
            ("a".to_string(), builtin::dag3()),
            ("b".to_string(), builtin::dag3()),
        ];
        let rows = compare_dags(&graphs, &data, &cfg, &[1, 2, 3], 0.5).unwrap();
        assert_eq!(rows[0].median_epochs, rows[1].median_epochs);
        assert_eq!(rows[0].runs, rows[1].runs);

        let graphs = vec![
            ("never".to_string(), builtin::dag1()),
            ("easy".to_string(), builtin::dag3()),
        ];
        let rows = compare_dags(&graphs, &data, &cfg, &[1], 0.0).unwrap();
        assert_eq!(rows[0].median_epochs, Some(0.0));
        let rows = compare_dags(&graphs, &data, &cfg, &[1], 1.1).unwrap();
        assert!(rows.iter().all(|r| r.median_epochs.is_none()));

        assert!(compare_dags(&graphs[..1], &data, &cfg, &[1], 0.5).is_err());
    }

    #[test]
    fn csv_features() {
        let data = Dataset::from_csv_features("1,0.6,0.8\n0,1,0\n".as_bytes()).unwrap();
        assert_eq!(data.labels, vec![1, 0]);
        assert_eq!(data.num_classes, 2);
        assert_eq!(data.features, ndarray::array![[0.6, 0.8], [1.0, 0.0]]);
        assert!(Dataset::from_csv_features("1,0.6,0.8\n0,1\n".as_bytes()).is_err());
        assert!(Dataset::from_csv_features("x,0.6\n".as_bytes()).is_err());
        assert!(Dataset::from_csv_features("".as_bytes()).is_err());
    }

    #[test]
    fn synthetic_blobs_are_unit_norm() {
        let data = Dataset::synthetic_blobs(10, 5, 16, 0.8, 0).unwrap();
        assert_eq!(data.len(), 50);
        assert_eq!(data.num_classes, 10);
        for row in data.features.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(class_means(&data).dim(), (10, 16));
    }
}

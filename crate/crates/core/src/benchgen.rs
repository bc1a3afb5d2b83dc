//! Synthetic multi-task benchmark and edge-recovery metrics.
//!
//! A full DAG `G0` is the transitive closure of an Erdős–Rényi DAG. Each task
//! observes a random subset of the global nodes; the first `P/2` global nodes
//! are scalar and the rest are curves in the span of `K` Fourier functions.

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::causal_diff::{DirectedGraph, NodeId};
use crate::error::{invalid, Result};
use crate::funcdata::{uniform_grid, BasisSet, FunctionalSampleSet};
use crate::sem::{
    block_weight_matrix, BlockTransitionMatrix, Modality, NodeData, NodeSpec, RawNode, TaskSpec,
    WeightMatrix,
};

// RNG stream ids, so each stage draws from an independent sequence.
const STREAM_DAG: u64 = 1;
const STREAM_TASKS: u64 = 2;
const STREAM_COEFFS: u64 = 1 << 16;
const STREAM_SAMPLES: u64 = 1 << 32;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Global node count `P`.
    pub nodes: usize,
    /// Task count `L`.
    pub tasks: usize,
    /// Samples per task `N`.
    pub samples: usize,
    /// Fourier functions per curve `K`.
    pub basis_size: usize,
    pub er_edge_prob: f64,
    pub noise_std: f64,
    pub grid_len: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            nodes: 10,
            tasks: 10,
            samples: 20,
            basis_size: 3,
            er_edge_prob: 0.3,
            noise_std: 1.0,
            grid_len: 101,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.nodes < 2 {
            bad.push("nodes must be at least 2".to_string());
        }
        if self.tasks == 0 {
            bad.push("tasks must be positive".to_string());
        }
        if self.samples == 0 {
            bad.push("samples must be positive".to_string());
        }
        if self.basis_size == 0 {
            bad.push("basis_size must be positive".to_string());
        }
        if !(self.er_edge_prob > 0.0 && self.er_edge_prob < 1.0) {
            bad.push("er_edge_prob must lie in (0, 1)".to_string());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            bad.push("noise_std must be finite and nonnegative".to_string());
        }
        if self.grid_len < 2 * self.basis_size + 1 {
            bad.push("grid_len is too small for the requested basis".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(invalid(bad.join("; ")))
        }
    }
}

/// The generating model of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueTask {
    pub spec: TaskSpec,
    pub c: BlockTransitionMatrix,
    pub w: WeightMatrix,
}

impl TrueTask {
    pub fn nodes(&self) -> Vec<NodeId> {
        self.spec.node_ids()
    }

    /// Edges of the task: support of `W`.
    pub fn graph(&self) -> DirectedGraph {
        DirectedGraph::from_weights(self.spec.node_ids(), self.w.matrix(), 0.0)
            .expect("task layout has distinct ids")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub config: BenchmarkConfig,
    pub full_graph: DirectedGraph,
    pub tasks: Vec<TrueTask>,
    pub basis: BasisSet,
}

/// Observations of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub nodes: Vec<RawNode>,
    /// Latent coordinates `a`, `N x M`.
    pub scores: DMatrix<f64>,
}

/// `sqrt(2) sin(2 pi k t)`, `sqrt(2) cos(2 pi k t)` for `k = 1, 2, ...`,
/// interleaved, evaluated on a uniform grid.
pub fn fourier_basis(k: usize, grid_len: usize) -> Result<BasisSet> {
    let grid = uniform_grid(grid_len);
    let s2 = std::f64::consts::SQRT_2;
    let tau = 2.0 * std::f64::consts::PI;
    let basis = DMatrix::from_fn(k, grid_len, |r, g| {
        let freq = (r / 2 + 1) as f64;
        let t = grid[g];
        if r % 2 == 0 {
            s2 * (tau * freq * t).sin()
        } else {
            s2 * (tau * freq * t).cos()
        }
    });
    BasisSet::from_functions(grid, basis)
}

/// Erdős–Rényi DAG: a random node order, then each forward pair is an edge
/// with probability `er_edge_prob`. Nodes are `NodeId(1..=p)`.
pub fn sample_er_dag(p: usize, er_edge_prob: f64, seed: u64) -> Result<DirectedGraph> {
    if p < 2 {
        return Err(invalid("at least two nodes are required"));
    }
    if !(er_edge_prob > 0.0 && er_edge_prob < 1.0) {
        return Err(invalid("edge probability must lie in (0, 1)"));
    }
    let mut rng = rng_for(seed, STREAM_DAG);
    let mut order: Vec<usize> = (0..p).collect();
    order.shuffle(&mut rng);
    let mut edges = Vec::new();
    for a in 0..p {
        for b in (a + 1)..p {
            if rng.random::<f64>() < er_edge_prob {
                edges.push((order[a], order[b]));
            }
        }
    }
    DirectedGraph::from_local_edges((1..=p).map(NodeId).collect(), edges)
}

/// `G0`: transitive closure of [`sample_er_dag`].
pub fn generate_full_dag(p: usize, er_edge_prob: f64, seed: u64) -> Result<DirectedGraph> {
    Ok(sample_er_dag(p, er_edge_prob, seed)?.transitive_closure())
}

/// Task node sets with sizes uniform in `[ceil(P/2), P]`, members uniform
/// without replacement, sorted by id.
pub fn sample_tasks(g0: &DirectedGraph, tasks: usize, seed: u64) -> Result<Vec<Vec<NodeId>>> {
    if tasks == 0 {
        return Err(invalid("at least one task is required"));
    }
    let p = g0.len();
    let min = p.div_ceil(2);
    let mut rng = rng_for(seed, STREAM_TASKS);
    Ok((0..tasks)
        .map(|_| {
            let size = rng.random_range(min..=p);
            let mut members: Vec<NodeId> = index::sample(&mut rng, p, size)
                .into_iter()
                .map(|i| g0.nodes()[i])
                .collect();
            members.sort();
            members
        })
        .collect())
}

/// Layout of a task: global nodes `1..=P/2` are scalar, the rest functional
/// with `k` components.
pub fn task_spec(task_id: usize, nodes: &[NodeId], total_nodes: usize, k: usize, samples: usize) -> Result<TaskSpec> {
    let scalar_max = total_nodes / 2;
    let specs = nodes
        .iter()
        .map(|&id| {
            if id.0 <= scalar_max {
                NodeSpec::scalar(id)
            } else {
                NodeSpec::function(id, k)
            }
        })
        .collect();
    TaskSpec::new(task_id, specs, samples)
}

/// Block `(i, j)` is `c * I` (ones on the main diagonal of the rectangular
/// block) when `G0` has the edge, otherwise zero; `|c|` is uniform on
/// `[0.5, 2]` with a random sign.
pub fn generate_coefficients(spec: &TaskSpec, g0: &DirectedGraph, seed: u64) -> Result<BlockTransitionMatrix> {
    let mut rng = rng_for(seed, STREAM_COEFFS + spec.task_id as u64);
    let ids = spec.node_ids();
    let mut global = Vec::with_capacity(ids.len());
    for id in &ids {
        global.push(
            g0.index_of(*id)
                .ok_or_else(|| invalid(format!("node {} is not in the full graph", id.0)))?,
        );
    }
    let mut c = BlockTransitionMatrix::zeros(spec);
    for i in 0..ids.len() {
        for j in 0..ids.len() {
            if i == j || !g0.has_edge(global[i], global[j]) {
                continue;
            }
            let magnitude = rng.random_range(0.5..=2.0);
            let value = if rng.random::<bool>() { magnitude } else { -magnitude };
            let (di, dj) = (spec.block(i).len(), spec.block(j).len());
            let block = DMatrix::from_fn(di, dj, |r, col| if r == col { value } else { 0.0 });
            c.set_block(spec, i, j, &block)?;
        }
    }
    Ok(c)
}

/// Draws `a = C^T a + e` in topological order and renders functional nodes
/// as curves `sum_k a_k nu_k(t)`.
pub fn generate_samples(
    c: &BlockTransitionMatrix,
    spec: &TaskSpec,
    samples: usize,
    basis: &BasisSet,
    noise_std: f64,
    seed: u64,
) -> Result<TaskDataset> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(invalid("noise_std must be finite and nonnegative"));
    }
    let w = block_weight_matrix(c, spec)?;
    let graph = DirectedGraph::from_weights(spec.node_ids(), w.matrix(), 0.0)?;
    let order = graph.topological_order()?;

    let mut rng = rng_for(seed, STREAM_SAMPLES + spec.task_id as u64);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let m = spec.embed_dim();
    let mut noise = DMatrix::from_fn(samples, m, |_, _| normal.sample(&mut rng));
    noise *= noise_std;
    let mut a = DMatrix::zeros(samples, m);
    for &j in &order {
        let rj = spec.block(j);
        let mut col = noise.columns(rj.start, rj.len()).into_owned();
        for i in 0..spec.node_count() {
            if !graph.has_edge(i, j) {
                continue;
            }
            let ri = spec.block(i);
            let cij = c.matrix().view((ri.start, rj.start), (ri.len(), rj.len()));
            col += a.columns(ri.start, ri.len()) * cij;
        }
        a.columns_mut(rj.start, rj.len()).copy_from(&col);
    }

    let mut nodes = Vec::with_capacity(spec.node_count());
    for (j, node) in spec.nodes().iter().enumerate() {
        let block = a.columns(spec.block(j).start, spec.block(j).len());
        let data = match node.modality {
            Modality::Scalar => NodeData::Scalar(block.iter().copied().collect()),
            Modality::Vector => NodeData::Vector(block.into_owned()),
            Modality::Function => {
                if block.ncols() > basis.len() {
                    return Err(invalid(format!(
                        "node {} needs {} basis functions, {} available",
                        node.global_id.0,
                        block.ncols(),
                        basis.len()
                    )));
                }
                let funcs = basis.functions().rows(0, block.ncols());
                let curves = block * funcs;
                NodeData::Function(FunctionalSampleSet::new(basis.grid().to_vec(), curves, node.global_id)?)
            }
        };
        nodes.push(RawNode {
            global_id: node.global_id,
            data,
        });
    }
    Ok(TaskDataset {
        task_id: spec.task_id,
        nodes,
        scores: a,
    })
}

/// Generates the ground truth and one dataset per task.
pub fn generate_benchmark(config: &BenchmarkConfig) -> Result<(GroundTruth, Vec<TaskDataset>)> {
    config.validate()?;
    let seed = config.seed;
    let g0 = generate_full_dag(config.nodes, config.er_edge_prob, seed)?;
    let subsets = sample_tasks(&g0, config.tasks, seed)?;
    let basis = fourier_basis(config.basis_size, config.grid_len)?;
    let mut tasks = Vec::with_capacity(config.tasks);
    let mut data = Vec::with_capacity(config.tasks);
    for (l, members) in subsets.iter().enumerate() {
        let spec = task_spec(l, members, config.nodes, config.basis_size, config.samples)?;
        let c = generate_coefficients(&spec, &g0, seed)?;
        let w = block_weight_matrix(&c, &spec)?;
        data.push(generate_samples(&c, &spec, config.samples, &basis, config.noise_std, seed)?);
        tasks.push(TrueTask { spec, c, w });
    }
    Ok((
        GroundTruth {
            config: config.clone(),
            full_graph: g0,
            tasks,
            basis,
        },
        data,
    ))
}

/// Confusion counts over ordered pairs of distinct nodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl std::ops::Add for EdgeCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub counts: EdgeCounts,
    pub f1: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub fdr: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_counts(counts: EdgeCounts) -> Self {
        let EdgeCounts { tp, fp, fn_, tn } = counts;
        Self {
            counts,
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            tpr: ratio(tp, tp + fn_),
            fpr: ratio(fp, fp + tn),
            fdr: ratio(fp, tp + fp),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub per_task: Vec<Metrics>,
    /// Counts pooled over tasks.
    pub micro: Metrics,
}

/// Compares two graphs over the same node ids.
pub fn edge_counts(predicted: &DirectedGraph, truth: &DirectedGraph) -> Result<EdgeCounts> {
    let p = truth.len();
    if predicted.len() != p {
        return Err(invalid(format!(
            "predicted graph has {} nodes, truth has {p}",
            predicted.len()
        )));
    }
    let mut to_pred = Vec::with_capacity(p);
    for id in truth.nodes() {
        to_pred.push(
            predicted
                .index_of(*id)
                .ok_or_else(|| invalid(format!("node {} missing from prediction", id.0)))?,
        );
    }
    let mut counts = EdgeCounts::default();
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            match (predicted.has_edge(to_pred[i], to_pred[j]), truth.has_edge(i, j)) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(counts)
}

/// Scores one predicted graph per task against the ground truth.
pub fn evaluate(predicted: &[DirectedGraph], truth: &GroundTruth) -> Result<MetricsReport> {
    if predicted.len() != truth.tasks.len() {
        return Err(invalid(format!(
            "{} predicted graphs for {} tasks",
            predicted.len(),
            truth.tasks.len()
        )));
    }
    let mut per_task = Vec::with_capacity(predicted.len());
    let mut pooled = EdgeCounts::default();
    for (pred, task) in predicted.iter().zip(&truth.tasks) {
        let counts = edge_counts(pred, &task.graph())?;
        pooled = pooled + counts;
        per_task.push(Metrics::from_counts(counts));
    }
    Ok(MetricsReport {
        seed: truth.config.seed,
        per_task,
        micro: Metrics::from_counts(pooled),
    })
}

//! Embedded linear structural equation model.
//!
//! Every node is embedded as a finite vector `a_j`: scalars and vectors are
//! copied (optionally PCA-reduced), curves are replaced by their FPCA scores.
//! Stacking the embeddings gives the `N x M` matrix `A`, and the model is
//! `A = A C + E` with `C` partitioned into `d(a_i) x d(a_j)` blocks. The edge
//! weight of `i -> j` is the squared Frobenius norm of block `(i, j)`.

use std::collections::HashSet;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::causal_diff::NodeId;
use crate::error::{invalid, Result};
use crate::funcdata::{
    fpca_decompose, pca_reduce, select_component_count, trapezoid_weights, BasisSet,
    FunctionalSampleSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Scalar,
    Vector,
    Function,
}

/// Dimension of the raw observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDim {
    Finite(usize),
    Infinite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub global_id: NodeId,
    pub modality: Modality,
    pub raw_dim: RawDim,
    pub embed_dim: usize,
    #[serde(default)]
    pub pca_reduced: bool,
}

impl NodeSpec {
    pub fn scalar(id: NodeId) -> Self {
        Self {
            global_id: id,
            modality: Modality::Scalar,
            raw_dim: RawDim::Finite(1),
            embed_dim: 1,
            pca_reduced: false,
        }
    }

    pub fn vector(id: NodeId, dim: usize) -> Self {
        Self {
            global_id: id,
            modality: Modality::Vector,
            raw_dim: RawDim::Finite(dim),
            embed_dim: dim,
            pca_reduced: false,
        }
    }

    pub fn function(id: NodeId, components: usize) -> Self {
        Self {
            global_id: id,
            modality: Modality::Function,
            raw_dim: RawDim::Infinite,
            embed_dim: components,
            pca_reduced: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let id = self.global_id.0;
        if self.embed_dim == 0 {
            return Err(invalid(format!("node {id}: embedding dimension must be positive")));
        }
        match (self.modality, self.raw_dim) {
            (Modality::Function, RawDim::Infinite) => Ok(()),
            (Modality::Function, _) => Err(invalid(format!(
                "node {id}: functional nodes have infinite raw dimension"
            ))),
            (_, RawDim::Infinite) => Err(invalid(format!(
                "node {id}: only functional nodes have infinite raw dimension"
            ))),
            (Modality::Scalar, RawDim::Finite(t)) => {
                if t != 1 {
                    Err(invalid(format!("node {id}: scalar with raw dimension {t}")))
                } else if self.embed_dim != 1 && !self.pca_reduced {
                    Err(invalid(format!("node {id}: scalar embedded in {} dims", self.embed_dim)))
                } else {
                    Ok(())
                }
            }
            (Modality::Vector, RawDim::Finite(t)) => {
                if self.embed_dim > t || (!self.pca_reduced && self.embed_dim != t) {
                    Err(invalid(format!(
                        "node {id}: vector of dimension {t} embedded in {} dims",
                        self.embed_dim
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Node roster of one task with its column layout in `A` and `C`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    nodes: Vec<NodeSpec>,
    block_offsets: Vec<usize>,
    sample_count: usize,
}

impl TaskSpec {
    pub fn new(task_id: usize, nodes: Vec<NodeSpec>, sample_count: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for node in &nodes {
            node.validate()?;
            if !seen.insert(node.global_id) {
                return Err(invalid(format!(
                    "task {task_id}: duplicate node id {}",
                    node.global_id.0
                )));
            }
        }
        let mut block_offsets = Vec::with_capacity(nodes.len() + 1);
        let mut offset = 0;
        block_offsets.push(0);
        for node in &nodes {
            offset += node.embed_dim;
            block_offsets.push(offset);
        }
        Ok(Self {
            task_id,
            nodes,
            block_offsets,
            sample_count,
        })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.global_id).collect()
    }

    /// Number of nodes `P_l`.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Total embedding dimension `M_l`.
    pub fn embed_dim(&self) -> usize {
        *self.block_offsets.last().unwrap_or(&0)
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn block_offsets(&self) -> &[usize] {
        &self.block_offsets
    }

    /// Column range of node `j` in `A` and `C`.
    pub fn block(&self, j: usize) -> Range<usize> {
        self.block_offsets[j]..self.block_offsets[j + 1]
    }
}

/// `N x M` stacked node embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(DMatrix<f64>);

impl EmbeddingMatrix {
    pub fn new(a: DMatrix<f64>, spec: &TaskSpec) -> Result<Self> {
        if a.ncols() != spec.embed_dim() {
            return Err(invalid(format!(
                "embedding has {} columns, task layout needs {}",
                a.ncols(),
                spec.embed_dim()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(invalid("embedding contains non-finite values"));
        }
        Ok(Self(a))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn sample_count(&self) -> usize {
        self.0.nrows()
    }

    /// Columns scaled to zero mean and unit variance; constant columns are
    /// only centered.
    pub fn standardized(&self) -> Self {
        let mut a = self.0.clone();
        let n = a.nrows() as f64;
        for mut col in a.column_iter_mut() {
            let mean = col.sum() / n;
            col.add_scalar_mut(-mean);
            let sd = (col.norm_squared() / n).sqrt();
            if sd > 0.0 {
                col.scale_mut(1.0 / sd);
            }
        }
        Self(a)
    }
}

/// `M x M` SEM coefficients with zero diagonal blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTransitionMatrix(DMatrix<f64>);

impl BlockTransitionMatrix {
    pub fn zeros(spec: &TaskSpec) -> Self {
        let m = spec.embed_dim();
        Self(DMatrix::zeros(m, m))
    }

    pub fn new(c: DMatrix<f64>, spec: &TaskSpec) -> Result<Self> {
        let m = spec.embed_dim();
        if c.shape() != (m, m) {
            return Err(invalid(format!(
                "transition matrix is {:?}, task layout needs {m}x{m}",
                c.shape()
            )));
        }
        for j in 0..spec.node_count() {
            let r = spec.block(j);
            if c.view((r.start, r.start), (r.len(), r.len())).iter().any(|&v| v != 0.0) {
                return Err(invalid(format!(
                    "diagonal block of node {} must be zero",
                    spec.nodes()[j].global_id.0
                )));
            }
        }
        Ok(Self(c))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Block `(i, j)`: coefficients from node `i` into node `j`.
    pub fn block(&self, spec: &TaskSpec, i: usize, j: usize) -> DMatrix<f64> {
        let (ri, rj) = (spec.block(i), spec.block(j));
        self.0.view((ri.start, rj.start), (ri.len(), rj.len())).into_owned()
    }

    pub fn set_block(&mut self, spec: &TaskSpec, i: usize, j: usize, block: &DMatrix<f64>) -> Result<()> {
        let (ri, rj) = (spec.block(i), spec.block(j));
        if i == j {
            return Err(invalid("diagonal blocks are fixed at zero"));
        }
        if block.shape() != (ri.len(), rj.len()) {
            return Err(invalid(format!(
                "block ({i}, {j}) is {:?}, expected {}x{}",
                block.shape(),
                ri.len(),
                rj.len()
            )));
        }
        self.0
            .view_mut((ri.start, rj.start), (ri.len(), rj.len()))
            .copy_from(block);
        Ok(())
    }
}

/// `P x P` edge weights `W_ij = ||C_ij||_F^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(invalid("weight matrix must be square"));
        }
        if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(invalid("weights must be finite and nonnegative"));
        }
        let mut w = w;
        w.fill_diagonal(0.0);
        Ok(Self(w))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }
}

pub fn block_weight_matrix(c: &BlockTransitionMatrix, spec: &TaskSpec) -> Result<WeightMatrix> {
    let m = spec.embed_dim();
    if c.0.shape() != (m, m) {
        return Err(invalid(format!(
            "transition matrix is {:?}, task layout needs {m}x{m}",
            c.0.shape()
        )));
    }
    Ok(WeightMatrix(block_norms(&c.0, spec)))
}

/// Squared block Frobenius norms of `c` with the diagonal forced to zero.
pub(crate) fn block_norms(c: &DMatrix<f64>, spec: &TaskSpec) -> DMatrix<f64> {
    let p = spec.node_count();
    DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            return 0.0;
        }
        let (ri, rj) = (spec.block(i), spec.block(j));
        c.view((ri.start, rj.start), (ri.len(), rj.len())).norm_squared()
    })
}

/// `(1 / 2N) ||A - A C||_F^2`.
pub fn residual_loss(a: &EmbeddingMatrix, c: &BlockTransitionMatrix) -> Result<f64> {
    let (n, m) = a.0.shape();
    if c.0.shape() != (m, m) {
        return Err(invalid(format!(
            "embedding has {m} columns but transition matrix is {:?}",
            c.0.shape()
        )));
    }
    if n == 0 {
        return Err(invalid("residual loss needs at least one sample"));
    }
    let resid = &a.0 - &a.0 * &c.0;
    Ok(resid.norm_squared() / (2.0 * n as f64))
}

/// Noiseless SEM prediction of node `j`: `sum_i A_i C_ij`, one row per sample.
pub fn predict_node(
    a: &EmbeddingMatrix,
    c: &BlockTransitionMatrix,
    spec: &TaskSpec,
    j: usize,
) -> Result<DMatrix<f64>> {
    if j >= spec.node_count() {
        return Err(invalid(format!("node index {j} out of range")));
    }
    if a.0.ncols() != spec.embed_dim() || c.0.nrows() != spec.embed_dim() {
        return Err(invalid("embedding and transition matrix do not match the task layout"));
    }
    let rj = spec.block(j);
    let cols = c.0.columns(rj.start, rj.len());
    Ok(&a.0 * cols)
}

/// How many components to keep for a functional node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentRule {
    Fixed(usize),
    /// Smallest count reaching this explained-variance fraction.
    ExplainedVariance(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub components: ComponentRule,
    #[serde(default)]
    pub center: bool,
    /// Reduce vector nodes to this many principal components.
    #[serde(default)]
    pub vector_pca: Option<usize>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            components: ComponentRule::Fixed(3),
            center: false,
            vector_pca: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeData {
    Scalar(Vec<f64>),
    /// `N x T`.
    Vector(DMatrix<f64>),
    Function(FunctionalSampleSet),
}

impl NodeData {
    pub fn sample_count(&self) -> usize {
        match self {
            NodeData::Scalar(v) => v.len(),
            NodeData::Vector(m) => m.nrows(),
            NodeData::Function(f) => f.sample_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawNode {
    pub global_id: NodeId,
    pub data: NodeData,
}

/// Result of embedding one task.
#[derive(Debug, Clone)]
pub struct EmbeddedTask {
    pub spec: TaskSpec,
    pub a: EmbeddingMatrix,
    /// FPCA basis per node, `None` for finite-dimensional nodes.
    pub bases: Vec<Option<BasisSet>>,
}

/// Builds `A` for one task from raw node observations.
pub fn assemble_embedding(
    task_id: usize,
    nodes: &[RawNode],
    config: &EmbeddingConfig,
) -> Result<EmbeddedTask> {
    let n = nodes.first().map(|r| r.data.sample_count()).unwrap_or(0);
    if nodes.iter().any(|r| r.data.sample_count() != n) {
        return Err(invalid(format!(
            "task {task_id}: nodes disagree on the number of samples"
        )));
    }

    let mut specs = Vec::with_capacity(nodes.len());
    let mut blocks: Vec<DMatrix<f64>> = Vec::with_capacity(nodes.len());
    let mut bases = Vec::with_capacity(nodes.len());
    for raw in nodes {
        match &raw.data {
            NodeData::Scalar(v) => {
                specs.push(NodeSpec::scalar(raw.global_id));
                blocks.push(DMatrix::from_column_slice(n, 1, v));
                bases.push(None);
            }
            NodeData::Vector(m) => {
                let t = m.ncols();
                match config.vector_pca {
                    Some(k) if k < t => {
                        let (_, scores, _) = pca_reduce(m, k, config.center)?;
                        specs.push(NodeSpec {
                            global_id: raw.global_id,
                            modality: Modality::Vector,
                            raw_dim: RawDim::Finite(t),
                            embed_dim: k,
                            pca_reduced: true,
                        });
                        blocks.push(scores);
                    }
                    _ => {
                        specs.push(NodeSpec::vector(raw.global_id, t));
                        blocks.push(m.clone());
                    }
                }
                bases.push(None);
            }
            NodeData::Function(f) => {
                let cap = f.sample_count().min(f.grid_len());
                let k = match config.components {
                    ComponentRule::Fixed(k) => k,
                    ComponentRule::ExplainedVariance(tau) => {
                        let (full, _) = fpca_decompose(f, cap, config.center)?;
                        select_component_count(&full, tau)
                    }
                };
                let (basis, scores) = fpca_decompose(f, k, config.center)?;
                specs.push(NodeSpec::function(raw.global_id, k));
                blocks.push(scores.into_inner());
                bases.push(Some(basis));
            }
        }
    }

    let spec = TaskSpec::new(task_id, specs, n)?;
    let mut a = DMatrix::zeros(n, spec.embed_dim());
    for (j, block) in blocks.iter().enumerate() {
        let r = spec.block(j);
        a.columns_mut(r.start, r.len()).copy_from(block);
    }
    let a = EmbeddingMatrix::new(a, &spec)?;
    Ok(EmbeddedTask { spec, a, bases })
}

/// Coefficient function of one block, evaluated on the stored grids.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientFunction {
    /// Functional parent, finite child: one curve over the parent grid per
    /// child component.
    ParentCurves(Vec<Vec<f64>>),
    /// Finite parent, functional child: one curve over the child grid per
    /// parent component.
    ChildCurves(Vec<Vec<f64>>),
    /// Both functional: `surface[(t, s)]`, `t` on the child grid, `s` on the
    /// parent grid.
    Surface(DMatrix<f64>),
}

/// Maps a block of `C` back to the coefficient function of the underlying
/// regression. `parent` and `child` are the FPCA bases of the two endpoints
/// (`None` for finite-dimensional nodes).
pub fn coefficient_function(
    block: &DMatrix<f64>,
    parent: Option<&BasisSet>,
    child: Option<&BasisSet>,
) -> Result<CoefficientFunction> {
    if let Some(b) = parent {
        if block.nrows() != b.len() {
            return Err(invalid(format!(
                "block has {} rows but the parent basis has {} functions",
                block.nrows(),
                b.len()
            )));
        }
    }
    if let Some(b) = child {
        if block.ncols() != b.len() {
            return Err(invalid(format!(
                "block has {} columns but the child basis has {} functions",
                block.ncols(),
                b.len()
            )));
        }
    }
    match (parent, child) {
        (None, None) => Err(invalid(
            "both endpoints are finite-dimensional; the block itself holds the coefficients",
        )),
        (Some(pb), None) => {
            // gamma_t(s) = sum_k' C[k', t] beta_k'(s)
            let curves = block.tr_mul(pb.functions());
            Ok(CoefficientFunction::ParentCurves(rows(&curves)))
        }
        (None, Some(cb)) => {
            // gamma_s(t) = sum_k C[s, k] beta_k(t)
            let curves = block * cb.functions();
            Ok(CoefficientFunction::ChildCurves(rows(&curves)))
        }
        (Some(pb), Some(cb)) => {
            // gamma(t, s) = sum_k sum_k' C[k', k] beta_k(t) beta_k'(s)
            let surface = cb.functions().tr_mul(&block.transpose()) * pb.functions();
            Ok(CoefficientFunction::Surface(surface))
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Applies a coefficient function to raw parent observations by quadrature,
/// returning the child contribution in raw (grid or component) space.
pub fn apply_coefficient_function(
    gamma: &CoefficientFunction,
    parent_value: &[f64],
    parent_grid: Option<&[f64]>,
) -> Result<Vec<f64>> {
    match gamma {
        CoefficientFunction::ParentCurves(curves) => {
            let grid = parent_grid.ok_or_else(|| invalid("functional parent needs its grid"))?;
            let w = trapezoid_weights(grid);
            Ok(curves
                .iter()
                .map(|g| g.iter().zip(parent_value).zip(&w).map(|((a, b), c)| a * b * c).sum())
                .collect())
        }
        CoefficientFunction::ChildCurves(curves) => {
            if curves.len() != parent_value.len() {
                return Err(invalid("parent vector length does not match the coefficient curves"));
            }
            let g = curves.first().map_or(0, Vec::len);
            Ok((0..g)
                .map(|t| curves.iter().zip(parent_value).map(|(c, x)| c[t] * x).sum())
                .collect())
        }
        CoefficientFunction::Surface(s) => {
            let grid = parent_grid.ok_or_else(|| invalid("functional parent needs its grid"))?;
            let w = trapezoid_weights(grid);
            Ok((0..s.nrows())
                .map(|t| (0..s.ncols()).map(|j| s[(t, j)] * parent_value[j] * w[j]).sum())
                .collect())
        }
    }
}

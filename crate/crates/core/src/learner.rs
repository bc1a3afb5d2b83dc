//! Multi-task structure learning by augmented Lagrangian and Adam.
//!
//! The score for tasks `l = 1..L` is
//!
//! ```text
//! f = sum_l (1/2N_l) ||A_l - A_l C_l||_F^2
//!   + rho * sum_{l1<l2} s_{l1,l2} D(W_l1, W_l2)
//!   + lambda * sum_l ||C_l||_1
//! ```
//!
//! where `D` is the differentiable causal difference (or the plain matrix
//! difference baseline), and every `W_l` must satisfy `h(W) = tr(e^W) - P = 0`.
//! The constraint is handled with `beta * h + (alpha^2 / 2) * h^2`, minimizing
//! over `C` with Adam and then updating `beta += alpha * sum h`, `alpha *= r`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal_diff::{
    accumulate_dcd_reach_grads, dcd_between, DirectedGraph, NodeId, OverlapMap, SmoothOrder,
};
use crate::error::{invalid, Error, Result};
use crate::sem::{block_norms, BlockTransitionMatrix, EmbeddedTask, EmbeddingMatrix, TaskSpec, WeightMatrix};

/// How tasks are tied together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Differentiable causal difference.
    Dcd,
    /// Squared difference of overlapping weights.
    MatrixDiff,
    /// Independent tasks.
    None,
}

impl std::str::FromStr for Coupling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcd" => Ok(Coupling::Dcd),
            "matrix_diff" | "matrix-diff" => Ok(Coupling::MatrixDiff),
            "none" => Ok(Coupling::None),
            other => Err(invalid(format!("unknown coupling '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// L1 weight.
    pub lambda: f64,
    /// Coupling weight.
    pub rho: f64,
    /// Sigmoid sharpness of the differentiable causal difference.
    pub c: f64,
    pub learning_rate: f64,
    /// Upper bound on `alpha`. Once reached, outer iterations keep updating
    /// the dual but the penalty stops growing.
    pub alpha_max: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Initial quadratic-penalty coefficient.
    pub alpha0: f64,
    /// Multiplicative growth of `alpha` per outer iteration.
    pub rate_r: f64,
    /// Stop once `sum_l h(W_l)` drops below this.
    pub h_min: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Relative objective change, measured over `check_every` Adam steps,
    /// below which the inner loop stops early. Zero disables early stopping.
    pub inner_tol: f64,
    pub check_every: usize,
    /// Edge threshold on `W`.
    pub omega: f64,
    pub coupling: Coupling,
    /// Fixed-order reduction of pairwise coupling terms.
    pub deterministic: bool,
    pub seed: u64,
    /// One dual variable per task instead of a single shared one.
    pub per_task_dual: bool,
    /// Standardize the columns of every `A` before fitting.
    pub standardize: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            rho: 0.1,
            c: 10.0,
            learning_rate: 0.01,
            alpha_max: 1e4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha0: 1.0,
            rate_r: 10.0,
            h_min: 1e-8,
            max_outer: 20,
            max_inner: 1000,
            inner_tol: 1e-6,
            check_every: 50,
            omega: 0.3,
            coupling: Coupling::Dcd,
            deterministic: true,
            seed: 0,
            per_task_dual: false,
            standardize: false,
        }
    }
}

impl HyperParams {
    /// Checks every field, reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let nonneg = [
            ("lambda", self.lambda),
            ("rho", self.rho),
            ("omega", self.omega),
            ("alpha0", self.alpha0),
            ("inner_tol", self.inner_tol),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be a finite nonnegative number"));
            }
        }
        let positive = [
            ("c", self.c),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("h_min", self.h_min),
            ("alpha0", self.alpha0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                bad.push(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.rate_r > 1.0 && self.rate_r.is_finite()) {
            bad.push("rate_r must be greater than 1".to_string());
        }
        if !(self.alpha_max >= self.alpha0) {
            bad.push("alpha_max must be at least alpha0".to_string());
        }
        if self.max_outer == 0 {
            bad.push("max_outer must be positive".to_string());
        }
        if self.max_inner == 0 {
            bad.push("max_inner must be positive".to_string());
        }
        if self.check_every == 0 {
            bad.push("check_every must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(invalid(bad.join("; ")))
        }
    }
}

/// Symmetric nonnegative task-similarity weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(DMatrix<f64>);

impl SimilarityMatrix {
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if !s.is_square() {
            return Err(invalid("similarity matrix must be square"));
        }
        let l = s.nrows();
        for i in 0..l {
            for j in 0..l {
                let v = s[(i, j)];
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(invalid(format!("similarity ({i}, {j}) must be finite and nonnegative")));
                }
                if (v - s[(j, i)]).abs() > 1e-12 * v.abs().max(1.0) {
                    return Err(invalid(format!("similarity is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self(s))
    }

    pub fn uniform(tasks: usize, value: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(tasks, tasks, value))
    }

    /// `s_ij = 1 / ||x_i - x_j||`.
    pub fn inverse_distance(coords: &[Vec<f64>]) -> Result<Self> {
        let l = coords.len();
        let mut s = DMatrix::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                if i == j {
                    continue;
                }
                if coords[i].len() != coords[j].len() {
                    return Err(invalid("coordinates have different dimensions"));
                }
                let d: f64 = coords[i]
                    .iter()
                    .zip(&coords[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if d == 0.0 {
                    return Err(invalid(format!("tasks {i} and {j} share a location")));
                }
                s[(i, j)] = 1.0 / d;
            }
        }
        Self::new(s)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

/// `e^A` by scaling and squaring with a Taylor core, returned as `e^A - I`
/// to avoid cancellation in `tr(e^A) - P`.
fn expm_minus_identity(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a
        .column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);
    let mut term = scaled.clone();
    let mut f = scaled.clone();
    for k in 2..=30 {
        term = &term * &scaled / k as f64;
        f += &term;
        if term.norm() <= f64::EPSILON * f.norm() {
            break;
        }
    }
    let two_i = DMatrix::<f64>::identity(n, n) * 2.0;
    for _ in 0..squarings {
        // e^{2X} - I = F (F + 2I)
        f = &f * (&f + &two_i);
    }
    f
}

/// Matrix exponential.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    expm_minus_identity(a) + DMatrix::identity(n, n)
}

/// `h(W) = tr(e^W) - P`.
pub fn acyclicity(w: &DMatrix<f64>) -> f64 {
    expm_minus_identity(w).trace()
}

/// `∂h / ∂W = (e^W)^T`.
pub fn acyclicity_gradient(w: &DMatrix<f64>) -> DMatrix<f64> {
    expm(w).transpose()
}

/// Sum of squared differences of overlapping weights.
pub fn matrix_diff_penalty(w_u: &DMatrix<f64>, w_v: &DMatrix<f64>, overlap: &OverlapMap) -> f64 {
    let pairs = overlap.pairs();
    let mut sum = 0.0;
    for &(iu, iv) in pairs {
        for &(ju, jv) in pairs {
            let d = w_u[(iu, ju)] - w_v[(iv, jv)];
            sum += d * d;
        }
    }
    sum
}

/// `∂ matrix_diff_penalty / ∂ W_u`.
pub fn matrix_diff_gradient(w_u: &DMatrix<f64>, w_v: &DMatrix<f64>, overlap: &OverlapMap) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(w_u.nrows(), w_u.ncols());
    let pairs = overlap.pairs();
    for &(iu, iv) in pairs {
        for &(ju, jv) in pairs {
            g[(iu, ju)] = 2.0 * (w_u[(iu, ju)] - w_v[(iv, jv)]);
        }
    }
    g
}

/// One task's data as seen by the optimizer.
#[derive(Debug, Clone)]
pub struct TaskProblem {
    spec: TaskSpec,
    a: EmbeddingMatrix,
    /// `A^T A / N`.
    gram: DMatrix<f64>,
    /// 1 off the diagonal blocks, 0 on them.
    mask: DMatrix<f64>,
}

impl TaskProblem {
    pub fn new(spec: TaskSpec, a: EmbeddingMatrix) -> Result<Self> {
        if a.matrix().ncols() != spec.embed_dim() {
            return Err(invalid(format!(
                "task {}: embedding width {} does not match layout {}",
                spec.task_id,
                a.matrix().ncols(),
                spec.embed_dim()
            )));
        }
        let n = a.sample_count();
        if n == 0 {
            return Err(invalid(format!("task {} has no samples", spec.task_id)));
        }
        let gram = a.matrix().tr_mul(a.matrix()) / n as f64;
        let m = spec.embed_dim();
        let mut mask = DMatrix::from_element(m, m, 1.0);
        for j in 0..spec.node_count() {
            let r = spec.block(j);
            mask.view_mut((r.start, r.start), (r.len(), r.len())).fill(0.0);
        }
        Ok(Self { spec, a, gram, mask })
    }

    pub fn from_embedded(task: &EmbeddedTask, standardize: bool) -> Result<Self> {
        let a = if standardize {
            task.a.standardized()
        } else {
            task.a.clone()
        };
        Self::new(task.spec.clone(), a)
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn embedding(&self) -> &EmbeddingMatrix {
        &self.a
    }

    /// `(1/2N)||A - AC||^2 = 1/2 tr((I - C)^T G (I - C))` with `G = A^T A / N`.
    fn fit_value(&self, c: &DMatrix<f64>) -> f64 {
        let m = c.nrows();
        let r = DMatrix::identity(m, m) - c;
        0.5 * (&self.gram * &r).component_mul(&r).sum()
    }

    /// `-(1/N) A^T (A - AC)`.
    fn fit_gradient(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        &self.gram * c - &self.gram
    }
}

/// The set of tasks with the pairwise overlaps between them.
#[derive(Debug, Clone)]
pub struct Problem {
    tasks: Vec<TaskProblem>,
    /// `(l1, l2, overlap)` for `l1 < l2`.
    pairs: Vec<(usize, usize, OverlapMap)>,
}

impl Problem {
    pub fn new(tasks: Vec<TaskProblem>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(invalid("at least one task is required"));
        }
        let ids: Vec<Vec<NodeId>> = tasks.iter().map(|t| t.spec.node_ids()).collect();
        let mut pairs = Vec::new();
        for l1 in 0..tasks.len() {
            for l2 in (l1 + 1)..tasks.len() {
                pairs.push((l1, l2, OverlapMap::new(&ids[l1], &ids[l2])));
            }
        }
        Ok(Self { tasks, pairs })
    }

    pub fn from_embedded(tasks: &[EmbeddedTask], standardize: bool) -> Result<Self> {
        let problems = tasks
            .iter()
            .map(|t| TaskProblem::from_embedded(t, standardize))
            .collect::<Result<Vec<_>>>()?;
        Self::new(problems)
    }

    pub fn tasks(&self) -> &[TaskProblem] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    fn check(&self, cs: &[BlockTransitionMatrix], s: &SimilarityMatrix) -> Result<()> {
        if cs.len() != self.tasks.len() {
            return Err(invalid(format!(
                "{} transition matrices for {} tasks",
                cs.len(),
                self.tasks.len()
            )));
        }
        if s.len() != self.tasks.len() {
            return Err(invalid(format!(
                "similarity is {}x{} for {} tasks",
                s.len(),
                s.len(),
                self.tasks.len()
            )));
        }
        for (c, t) in cs.iter().zip(&self.tasks) {
            let m = t.spec.embed_dim();
            if c.matrix().shape() != (m, m) {
                return Err(invalid(format!(
                    "task {}: transition matrix is {:?}, expected {m}x{m}",
                    t.spec.task_id,
                    c.matrix().shape()
                )));
            }
        }
        Ok(())
    }
}

/// Dual variables of the acyclicity constraints.
#[derive(Debug, Clone, PartialEq)]
pub enum Duals {
    Shared(f64),
    PerTask(Vec<f64>),
}

impl Duals {
    fn get(&self, l: usize) -> f64 {
        match self {
            Duals::Shared(b) => *b,
            Duals::PerTask(v) => v[l],
        }
    }

    pub fn values(&self, tasks: usize) -> Vec<f64> {
        (0..tasks).map(|l| self.get(l)).collect()
    }
}

/// Breakdown of the augmented objective at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub fit: f64,
    pub coupling: f64,
    pub l1: f64,
    /// `h(W_l)` per task.
    pub h: Vec<f64>,
    /// `sum_l beta_l h_l + (alpha^2/2) h_l^2`.
    pub constraint: f64,
    pub clamped: usize,
    pub gradient: Option<Vec<DMatrix<f64>>>,
}

impl Evaluation {
    /// Score without the constraint terms.
    pub fn objective(&self) -> f64 {
        self.fit + self.coupling + self.l1
    }

    pub fn augmented(&self) -> f64 {
        self.objective() + self.constraint
    }

    pub fn h_sum(&self) -> f64 {
        self.h.iter().sum()
    }
}

struct TaskState {
    w: DMatrix<f64>,
    fit: f64,
    l1: f64,
    h: f64,
    exp_w: Option<DMatrix<f64>>,
    order: Option<SmoothOrder>,
}

/// Evaluates the augmented objective and, optionally, its gradient with
/// respect to every `C_l`.
pub fn evaluate_terms(
    cs: &[BlockTransitionMatrix],
    problem: &Problem,
    s: &SimilarityMatrix,
    hp: &HyperParams,
    duals: &Duals,
    alpha: f64,
    with_gradient: bool,
) -> Result<Evaluation> {
    problem.check(cs, s)?;
    let coupled = hp.rho > 0.0 && hp.coupling != Coupling::None && problem.len() > 1;
    let need_order = coupled && hp.coupling == Coupling::Dcd;

    let per_task = |(t, c): (&TaskProblem, &BlockTransitionMatrix)| {
        let c = c.matrix();
        let w = block_norms(c, &t.spec);
        let em1 = expm_minus_identity(&w);
        let h = em1.trace();
        let exp_w = with_gradient.then(|| {
            let p = w.nrows();
            em1 + DMatrix::identity(p, p)
        });
        TaskState {
            fit: t.fit_value(c),
            l1: c.iter().map(|v| v.abs()).sum(),
            h,
            exp_w,
            order: need_order.then(|| SmoothOrder::new(&w, hp.c)),
            w,
        }
    };
    let states: Vec<TaskState> = if hp.deterministic {
        problem.tasks.iter().zip(cs).map(per_task).collect()
    } else {
        problem.tasks.par_iter().zip(cs.par_iter()).map(per_task).collect()
    };

    let fit: f64 = states.iter().map(|st| st.fit).sum();
    let l1 = hp.lambda * states.iter().map(|st| st.l1).sum::<f64>();
    let h: Vec<f64> = states.iter().map(|st| st.h).collect();
    let a2 = alpha * alpha;
    let constraint: f64 = h
        .iter()
        .enumerate()
        .map(|(l, &hl)| duals.get(l) * hl + 0.5 * a2 * hl * hl)
        .sum();
    let clamped = states
        .iter()
        .filter_map(|st| st.order.as_ref())
        .map(|o| o.reachability().clamped())
        .sum();

    // Coupling value and its gradient with respect to l(W) (DCD) or W
    // (matrix difference), per task.
    let zero_grads = || -> Vec<DMatrix<f64>> {
        states
            .iter()
            .map(|st| DMatrix::zeros(st.w.nrows(), st.w.ncols()))
            .collect()
    };
    let pair_term = |&(l1, l2, ref overlap): &(usize, usize, OverlapMap)| -> (f64, Option<(DMatrix<f64>, DMatrix<f64>)>) {
        let weight = hp.rho * s.get(l1, l2);
        if weight == 0.0 {
            return (0.0, None);
        }
        let (su, sv) = (&states[l1], &states[l2]);
        match hp.coupling {
            Coupling::Dcd => {
                let (ou, ov) = (su.order.as_ref().unwrap(), sv.order.as_ref().unwrap());
                let value = weight * dcd_between(ou, ov, overlap);
                let grads = with_gradient.then(|| {
                    let mut gu = DMatrix::zeros(su.w.nrows(), su.w.ncols());
                    let mut gv = DMatrix::zeros(sv.w.nrows(), sv.w.ncols());
                    accumulate_dcd_reach_grads(ou, ov, overlap, weight, &mut gu, &mut gv);
                    (gu, gv)
                });
                (value, grads)
            }
            Coupling::MatrixDiff => {
                let value = weight * matrix_diff_penalty(&su.w, &sv.w, overlap);
                let grads = with_gradient.then(|| {
                    (
                        matrix_diff_gradient(&su.w, &sv.w, overlap) * weight,
                        matrix_diff_gradient(&sv.w, &su.w, &overlap.swapped()) * weight,
                    )
                });
                (value, grads)
            }
            Coupling::None => (0.0, None),
        }
    };
    let (coupling, coupling_grads) = if !coupled {
        (0.0, zero_grads())
    } else if hp.deterministic {
        let mut grads = zero_grads();
        let mut value = 0.0;
        for pair in &problem.pairs {
            let (v, g) = pair_term(pair);
            value += v;
            if let Some((gu, gv)) = g {
                grads[pair.0] += gu;
                grads[pair.1] += gv;
            }
        }
        (value, grads)
    } else {
        problem
            .pairs
            .par_iter()
            .fold(
                || (0.0, zero_grads()),
                |(mut value, mut grads), pair| {
                    let (v, g) = pair_term(pair);
                    value += v;
                    if let Some((gu, gv)) = g {
                        grads[pair.0] += gu;
                        grads[pair.1] += gv;
                    }
                    (value, grads)
                },
            )
            .reduce(
                || (0.0, zero_grads()),
                |(va, mut ga), (vb, gb)| {
                    for (a, b) in ga.iter_mut().zip(gb) {
                        *a += b;
                    }
                    (va + vb, ga)
                },
            )
    };

    let gradient = with_gradient.then(|| {
        let task_grad = |(l, ((t, c), (st, gcoup))): (usize, ((&TaskProblem, &BlockTransitionMatrix), (&TaskState, &DMatrix<f64>)))| {
            let c = c.matrix();
            let mut grad = t.fit_gradient(c);
            if hp.lambda > 0.0 {
                grad += c.map(|v| if v > 0.0 { hp.lambda } else if v < 0.0 { -hp.lambda } else { 0.0 });
            }
            // dF/dW from the constraint and the coupling
            let mut grad_w = st.exp_w.as_ref().unwrap().transpose() * (duals.get(l) + a2 * st.h);
            if coupled {
                match hp.coupling {
                    Coupling::Dcd => grad_w += st.order.as_ref().unwrap().reachability().backprop(gcoup),
                    Coupling::MatrixDiff => grad_w += gcoup,
                    Coupling::None => {}
                }
            }
            // dW_ij/dC_block = 2 C_block
            let spec = &t.spec;
            for i in 0..spec.node_count() {
                for j in 0..spec.node_count() {
                    if i == j {
                        continue;
                    }
                    let (ri, rj) = (spec.block(i), spec.block(j));
                    let scale = 2.0 * grad_w[(i, j)];
                    let cb = c.view((ri.start, rj.start), (ri.len(), rj.len()));
                    let mut gb = grad.view_mut((ri.start, rj.start), (ri.len(), rj.len()));
                    gb.zip_apply(&cb, |g, cv| *g += scale * cv);
                }
            }
            grad.component_mul_assign(&t.mask);
            grad
        };
        let items = problem
            .tasks
            .iter()
            .zip(cs)
            .zip(states.iter().zip(&coupling_grads))
            .enumerate();
        if hp.deterministic {
            items.map(task_grad).collect()
        } else {
            items.collect::<Vec<_>>().into_par_iter().map(task_grad).collect()
        }
    });

    Ok(Evaluation {
        fit,
        coupling,
        l1,
        h,
        constraint,
        clamped,
        gradient,
    })
}

/// Multi-task score without the acyclicity terms.
pub fn objective(
    cs: &[BlockTransitionMatrix],
    problem: &Problem,
    s: &SimilarityMatrix,
    hp: &HyperParams,
) -> Result<f64> {
    Ok(evaluate_terms(cs, problem, s, hp, &Duals::Shared(0.0), 0.0, false)?.objective())
}

/// Score plus `sum_l beta_l h(W_l) + (alpha^2/2) h(W_l)^2`.
pub fn augmented_objective(
    cs: &[BlockTransitionMatrix],
    problem: &Problem,
    s: &SimilarityMatrix,
    hp: &HyperParams,
    duals: &Duals,
    alpha: f64,
) -> Result<f64> {
    Ok(evaluate_terms(cs, problem, s, hp, duals, alpha, false)?.augmented())
}

/// Gradient of [`augmented_objective`] with respect to every `C_l`; the L1
/// term contributes `lambda * sign(C)` with `sign(0) = 0`.
pub fn full_gradient(
    cs: &[BlockTransitionMatrix],
    problem: &Problem,
    s: &SimilarityMatrix,
    hp: &HyperParams,
    duals: &Duals,
    alpha: f64,
) -> Result<Vec<DMatrix<f64>>> {
    Ok(evaluate_terms(cs, problem, s, hp, duals, alpha, true)?
        .gradient
        .expect("gradient requested"))
}

/// Edge set obtained from a weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Thresholded {
    pub graph: DirectedGraph,
    /// Edges above the threshold that were dropped to break cycles, in
    /// removal order, as local index pairs.
    pub removed: Vec<(usize, usize)>,
}

/// Keeps `(i, j)` when `W_ij > omega`, then repeatedly drops the lightest edge
/// on a remaining cycle until the graph is acyclic.
pub fn threshold_edges(nodes: Vec<NodeId>, w: &DMatrix<f64>, omega: f64) -> Result<Thresholded> {
    let mut graph = DirectedGraph::from_weights(nodes, w, omega)?;
    let mut removed = Vec::new();
    while let Some(cycle) = graph.find_cycle() {
        let lightest = cycle
            .windows(2)
            .map(|e| (e[0], e[1]))
            .min_by(|a, b| w[*a].total_cmp(&w[*b]))
            .expect("a cycle has at least one edge");
        removed.push(lightest);
        let edges: Vec<(usize, usize)> = graph.edges().filter(|&e| e != lightest).collect();
        graph = DirectedGraph::from_local_edges(graph.nodes().to_vec(), edges)?;
    }
    Ok(Thresholded { graph, removed })
}

/// One line of the optimization trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub outer: usize,
    pub inner: usize,
    pub objective: f64,
    pub h_sum: f64,
    pub beta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct TaskFit {
    pub task_id: usize,
    pub nodes: Vec<NodeId>,
    pub c: BlockTransitionMatrix,
    pub w: WeightMatrix,
    pub adjacency: DirectedGraph,
    pub removed_edges: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub tasks: Vec<TaskFit>,
    pub trace: Vec<TraceRow>,
    /// `h(W_l)` per task at the end of each outer iteration.
    pub h_trace: Vec<Vec<f64>>,
    pub outer_iterations: usize,
    /// Final dual values, one per task (all equal when shared).
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub converged: bool,
    /// Power entries clamped while evaluating the coupling, summed over all
    /// evaluations.
    pub clamp_count: usize,
}

impl FitResult {
    /// Fraction of consecutive outer iterations over which `sum_l h` did not
    /// increase.
    pub fn h_monotone_fraction(&self) -> f64 {
        let sums: Vec<f64> = self.h_trace.iter().map(|h| h.iter().sum()).collect();
        if sums.len() < 2 {
            return 1.0;
        }
        let ok = sums.windows(2).filter(|w| w[1] <= w[0]).count();
        ok as f64 / (sums.len() - 1) as f64
    }
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    t: i32,
}

impl Adam {
    fn new(cs: &[BlockTransitionMatrix]) -> Self {
        let zeros: Vec<DMatrix<f64>> = cs
            .iter()
            .map(|c| DMatrix::zeros(c.matrix().nrows(), c.matrix().ncols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, cs: &mut [DMatrix<f64>], grads: &[DMatrix<f64>], hp: &HyperParams) {
        let lr = hp.learning_rate;
        self.t += 1;
        let (b1, b2) = (hp.adam_beta1, hp.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for ((c, g), (m, v)) in cs.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for idx in 0..c.len() {
                let gi = g[idx];
                m[idx] = b1 * m[idx] + (1.0 - b1) * gi;
                v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi;
                let mhat = m[idx] / bc1;
                let vhat = v[idx] / bc2;
                c[idx] -= lr * mhat / (vhat.sqrt() + hp.adam_eps);
            }
        }
    }
}

/// Fits all tasks jointly starting from `C = 0`.
pub fn fit(problem: &Problem, s: &SimilarityMatrix, hp: &HyperParams) -> Result<FitResult> {
    hp.validate()?;
    let zero: Vec<BlockTransitionMatrix> = problem
        .tasks
        .iter()
        .map(|t| BlockTransitionMatrix::zeros(&t.spec))
        .collect();
    problem.check(&zero, s)?;

    let l = problem.len();
    let mut cs: Vec<DMatrix<f64>> = zero.into_iter().map(BlockTransitionMatrix::into_inner).collect();
    let mut duals = if hp.per_task_dual {
        Duals::PerTask(vec![0.0; l])
    } else {
        Duals::Shared(0.0)
    };
    let mut alpha = hp.alpha0;
    let mut trace = Vec::new();
    let mut h_trace = Vec::new();
    let mut clamp_count = 0;
    let mut converged = false;
    let mut best: Option<(f64, Vec<DMatrix<f64>>)> = None;
    let mut outer_iterations = 0;

    let wrap = |cs: &[DMatrix<f64>]| -> Vec<BlockTransitionMatrix> {
        // diagonal blocks stay zero because their gradient is masked
        cs.iter()
            .zip(&problem.tasks)
            .map(|(c, t)| BlockTransitionMatrix::new(c.clone(), &t.spec).expect("masked update keeps layout"))
            .collect()
    };

    for outer in 0..hp.max_outer {
        outer_iterations = outer + 1;
        let mut adam = Adam::new(&wrap(&cs));
        let mut last_check = f64::INFINITY;
        let mut inner_used = 0;
        for inner in 0..hp.max_inner {
            let eval = evaluate_terms(&wrap(&cs), problem, s, hp, &duals, alpha, true)?;
            clamp_count += eval.clamped;
            let value = eval.augmented();
            if !value.is_finite() {
                trace.push(TraceRow {
                    outer,
                    inner,
                    objective: value,
                    h_sum: eval.h_sum(),
                    beta: duals.get(0),
                    alpha,
                });
                return Err(Error::Divergence { outer, inner, trace });
            }
            if inner % hp.check_every == 0 {
                trace.push(TraceRow {
                    outer,
                    inner,
                    objective: eval.objective(),
                    h_sum: eval.h_sum(),
                    beta: duals.get(0),
                    alpha,
                });
                if hp.inner_tol > 0.0
                    && inner > 0
                    && (last_check - value).abs() <= hp.inner_tol * value.abs().max(1.0)
                {
                    inner_used = inner;
                    break;
                }
                last_check = value;
            }
            let grads = eval.gradient.expect("gradient requested");
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence { outer, inner, trace });
            }
            adam.step(&mut cs, &grads, hp);
            inner_used = inner + 1;
        }

        let eval = evaluate_terms(&wrap(&cs), problem, s, hp, &duals, alpha, false)?;
        let h_sum = eval.h_sum();
        if !eval.augmented().is_finite() || !h_sum.is_finite() {
            return Err(Error::Divergence {
                outer,
                inner: inner_used,
                trace,
            });
        }
        trace.push(TraceRow {
            outer,
            inner: inner_used,
            objective: eval.objective(),
            h_sum,
            beta: duals.get(0),
            alpha,
        });
        h_trace.push(eval.h.clone());
        if best.as_ref().is_none_or(|(b, _)| h_sum <= *b) {
            best = Some((h_sum, cs.clone()));
        }

        match &mut duals {
            Duals::Shared(b) => *b += alpha * h_sum,
            Duals::PerTask(v) => {
                for (b, h) in v.iter_mut().zip(&eval.h) {
                    *b += alpha * h;
                }
            }
        }
        alpha = (alpha * hp.rate_r).min(hp.alpha_max);
        if h_sum < hp.h_min {
            converged = true;
            break;
        }
    }

    let final_cs = if converged {
        cs
    } else {
        best.map(|(_, c)| c).unwrap_or(cs)
    };
    let tasks = final_cs
        .into_iter()
        .zip(&problem.tasks)
        .map(|(c, t)| {
            let c = BlockTransitionMatrix::new(c, &t.spec)?;
            let w = WeightMatrix::new(block_norms(c.matrix(), &t.spec))?;
            let nodes = t.spec.node_ids();
            let th = threshold_edges(nodes.clone(), w.matrix(), hp.omega)?;
            let removed_edges = th.removed.iter().map(|&(a, b)| (nodes[a], nodes[b])).collect();
            Ok(TaskFit {
                task_id: t.spec.task_id,
                nodes,
                c,
                w,
                adjacency: th.graph,
                removed_edges,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FitResult {
        tasks,
        trace,
        h_trace,
        outer_iterations,
        beta: duals.values(l),
        alpha,
        converged,
        clamp_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sem::NodeSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_spec(task_id: usize, ids: &[usize], n: usize) -> TaskSpec {
        TaskSpec::new(task_id, ids.iter().map(|&i| NodeSpec::scalar(NodeId(i))).collect(), n).unwrap()
    }

    #[test]
    fn acyclicity_examples() {
        assert_eq!(acyclicity(&DMatrix::zeros(3, 3)), 0.0);
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let expected = 2.0 * 1f64.cosh() - 2.0;
        assert!((acyclicity(&w) - expected).abs() < 1e-12);
        let upper = DMatrix::from_row_slice(3, 3, &[0.0, 2.0, 5.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
        assert!(acyclicity(&upper).abs() < 1e-10);
    }

    #[test]
    fn expm_of_large_matrix_uses_squaring() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 3.0, 3.0, 0.0]);
        let e = expm(&w);
        assert!((e[(0, 0)] - 3f64.cosh()).abs() < 1e-10);
        assert!((e[(0, 1)] - 3f64.sinh()).abs() < 1e-10);
    }

    #[test]
    fn acyclicity_gradient_examples() {
        assert_eq!(acyclicity_gradient(&DMatrix::zeros(3, 3)), DMatrix::identity(3, 3));
        // chain 0 -> 1 -> 2 with unit weights: e^W = I + W + W^2/2
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let g = acyclicity_gradient(&w);
        assert!((g[(1, 0)] - 1.0).abs() < 1e-12);
        assert!((g[(2, 1)] - 1.0).abs() < 1e-12);
        assert!((g[(2, 0)] - 0.5).abs() < 1e-12);
        assert!(g[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn threshold_examples() {
        let ids = vec![NodeId(1), NodeId(2)];
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.01, 0.0]);
        let t = threshold_edges(ids.clone(), &w, 0.3).unwrap();
        assert_eq!(t.graph.edges().collect::<Vec<_>>(), vec![(0, 1)]);

        let t = threshold_edges(ids.clone(), &DMatrix::zeros(2, 2), 0.3).unwrap();
        assert_eq!(t.graph.edge_count(), 0);

        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.35, 0.0]);
        let t = threshold_edges(ids, &w, 0.3).unwrap();
        assert_eq!(t.graph.edges().collect::<Vec<_>>(), vec![(0, 1)]);
        assert_eq!(t.removed, vec![(1, 0)]);
    }

    #[test]
    fn matrix_diff_examples() {
        let ids: Vec<NodeId> = (1..=2).map(NodeId).collect();
        let overlap = OverlapMap::new(&ids, &ids);
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.2, 0.0]);
        assert_eq!(matrix_diff_penalty(&w, &w, &overlap), 0.0);
        let mut wu = DMatrix::zeros(2, 2);
        wu[(0, 1)] = 1.0;
        assert_eq!(matrix_diff_penalty(&wu, &DMatrix::zeros(2, 2), &overlap), 1.0);
    }

    fn two_task_problem() -> (Problem, SimilarityMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |id, ids: &[usize], rng: &mut ChaCha8Rng| {
            let spec = scalar_spec(id, ids, 8);
            let a = DMatrix::from_fn(8, ids.len(), |_, _| rng.sample(StandardNormal));
            TaskProblem::new(spec.clone(), EmbeddingMatrix::new(a, &spec).unwrap()).unwrap()
        };
        let t0 = mk(0, &[1, 2, 3], &mut rng);
        let t1 = mk(1, &[2, 3, 4], &mut rng);
        (Problem::new(vec![t0, t1]).unwrap(), SimilarityMatrix::uniform(2, 1.0).unwrap())
    }

    #[test]
    fn objective_reduces_to_fit_without_penalties() {
        let (problem, s) = two_task_problem();
        let cs: Vec<_> = problem.tasks().iter().map(|t| BlockTransitionMatrix::zeros(t.spec())).collect();
        let hp = HyperParams { lambda: 0.0, rho: 0.0, ..Default::default() };
        let value = objective(&cs, &problem, &s, &hp).unwrap();
        let fit: f64 = problem
            .tasks()
            .iter()
            .zip(&cs)
            .map(|(t, c)| crate::sem::residual_loss(t.embedding(), c).unwrap())
            .sum();
        assert!((value - fit).abs() < 1e-12);
    }

    #[test]
    fn single_task_has_no_coupling() {
        let spec = scalar_spec(0, &[1, 2], 4);
        let a = EmbeddingMatrix::new(DMatrix::from_row_slice(4, 2, &[1.0, 2.0, -1.0, 0.5, 0.3, 0.2, 2.0, -1.0]), &spec).unwrap();
        let problem = Problem::new(vec![TaskProblem::new(spec.clone(), a.clone()).unwrap()]).unwrap();
        let s = SimilarityMatrix::uniform(1, 1.0).unwrap();
        let mut c = BlockTransitionMatrix::zeros(&spec);
        c.set_block(&spec, 0, 1, &DMatrix::from_element(1, 1, 0.4)).unwrap();
        let hp = HyperParams { rho: 5.0, ..Default::default() };
        let value = objective(&[c.clone()], &problem, &s, &hp).unwrap();
        let expected = crate::sem::residual_loss(&a, &c).unwrap() + hp.lambda * 0.4;
        assert!((value - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_tasks_have_zero_coupling() {
        let spec = scalar_spec(0, &[1, 2, 3], 5);
        let a = EmbeddingMatrix::new(DMatrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64 * 0.1), &spec).unwrap();
        let t = TaskProblem::new(spec.clone(), a).unwrap();
        let problem = Problem::new(vec![t.clone(), t]).unwrap();
        let s = SimilarityMatrix::uniform(2, 1.0).unwrap();
        let mut c = BlockTransitionMatrix::zeros(&spec);
        c.set_block(&spec, 0, 1, &DMatrix::from_element(1, 1, 0.8)).unwrap();
        let eval = evaluate_terms(&[c.clone(), c], &problem, &s, &HyperParams::default(), &Duals::Shared(0.0), 0.0, false).unwrap();
        assert_eq!(eval.coupling, 0.0);
    }

    #[test]
    fn augmented_objective_adds_constraint_terms() {
        let spec = scalar_spec(0, &[1, 2], 3);
        let a = EmbeddingMatrix::new(DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]), &spec).unwrap();
        let problem = Problem::new(vec![TaskProblem::new(spec.clone(), a).unwrap()]).unwrap();
        let s = SimilarityMatrix::uniform(1, 0.0).unwrap();
        let hp = HyperParams::default();

        let acyclic = {
            let mut c = BlockTransitionMatrix::zeros(&spec);
            c.set_block(&spec, 0, 1, &DMatrix::from_element(1, 1, 0.5)).unwrap();
            c
        };
        let base = objective(&[acyclic.clone()], &problem, &s, &hp).unwrap();
        let aug = augmented_objective(&[acyclic], &problem, &s, &hp, &Duals::Shared(3.0), 2.0).unwrap();
        assert!((aug - base).abs() < 1e-12);

        let mut cyclic = BlockTransitionMatrix::zeros(&spec);
        cyclic.set_block(&spec, 0, 1, &DMatrix::from_element(1, 1, 0.5)).unwrap();
        cyclic.set_block(&spec, 1, 0, &DMatrix::from_element(1, 1, 0.5)).unwrap();
        let base = objective(&[cyclic.clone()], &problem, &s, &hp).unwrap();
        let zero_duals = augmented_objective(&[cyclic.clone()], &problem, &s, &hp, &Duals::Shared(0.0), 0.0).unwrap();
        assert!((zero_duals - base).abs() < 1e-12);

        let w = DMatrix::from_row_slice(2, 2, &[0.0, 0.25, 0.25, 0.0]);
        let h = acyclicity(&w);
        let aug = augmented_objective(&[cyclic], &problem, &s, &hp, &Duals::Shared(1.0), 2f64.sqrt()).unwrap();
        assert!((aug - (base + h + h * h)).abs() < 1e-12);
    }

    #[test]
    fn coupling_gradient_vanishes_without_rho() {
        let (problem, s) = two_task_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cs: Vec<_> = problem
            .tasks()
            .iter()
            .map(|t| {
                let m = t.spec().embed_dim();
                let mut c = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal) * 0.5);
                c.fill_diagonal(0.0);
                BlockTransitionMatrix::new(c, t.spec()).unwrap()
            })
            .collect();
        let with = HyperParams { rho: 0.0, ..Default::default() };
        let none = HyperParams { coupling: Coupling::None, ..with.clone() };
        let g1 = full_gradient(&cs, &problem, &s, &with, &Duals::Shared(0.5), 2.0).unwrap();
        let g2 = full_gradient(&cs, &problem, &s, &none, &Duals::Shared(0.5), 2.0).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn parallel_evaluation_matches_sequential() {
        let (problem, s) = two_task_problem();
        let cs: Vec<_> = problem
            .tasks()
            .iter()
            .map(|t| {
                let m = t.spec().embed_dim();
                let c = DMatrix::from_fn(m, m, |r, col| if r == col { 0.0 } else { 0.1 * (r + 2 * col) as f64 });
                BlockTransitionMatrix::new(c, t.spec()).unwrap()
            })
            .collect();
        let seq = HyperParams::default();
        let par = HyperParams { deterministic: false, ..Default::default() };
        let a = evaluate_terms(&cs, &problem, &s, &seq, &Duals::Shared(0.1), 1.0, true).unwrap();
        let b = evaluate_terms(&cs, &problem, &s, &par, &Duals::Shared(0.1), 1.0, true).unwrap();
        assert!((a.augmented() - b.augmented()).abs() < 1e-12);
        for (x, y) in a.gradient.unwrap().iter().zip(b.gradient.unwrap()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn hyperparams_validation_lists_every_problem() {
        let hp = HyperParams { lambda: -1.0, rate_r: 1.0, h_min: 0.0, ..Default::default() };
        let msg = hp.validate().unwrap_err().to_string();
        assert!(msg.contains("lambda") && msg.contains("rate_r") && msg.contains("h_min"));
        assert!(HyperParams::default().validate().is_ok());
    }

    #[test]
    fn similarity_validation() {
        assert!(SimilarityMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0])).is_err());
        let s = SimilarityMatrix::inverse_distance(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert!((s.get(0, 1) - 0.2).abs() < 1e-15);
        assert!(SimilarityMatrix::inverse_distance(&[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn two_node_regression_recovers_slope() {
        // least-squares slope is 1.5, so W_12 = 2.25
        let n = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = scalar_spec(0, &[1, 2], n);
        let mut a = DMatrix::zeros(n, 2);
        for r in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            a[(r, 0)] = x;
            a[(r, 1)] = 1.5 * x + e;
        }
        let problem = Problem::new(vec![TaskProblem::new(spec.clone(), EmbeddingMatrix::new(a, &spec).unwrap()).unwrap()]).unwrap();
        let s = SimilarityMatrix::uniform(1, 0.0).unwrap();
        let hp = HyperParams { rho: 0.0, ..Default::default() };
        let result = fit(&problem, &s, &hp).unwrap();
        let task = &result.tasks[0];
        assert_eq!(task.adjacency.edge_ids(), vec![(NodeId(1), NodeId(2))]);
        let w12 = task.w.matrix()[(0, 1)];
        assert!((w12 - 2.25).abs() < 0.3, "W_12 = {w12}");
        assert!(task.w.matrix()[(1, 0)] < hp.omega);
    }

    #[test]
    fn fit_is_deterministic() {
        let (problem, s) = two_task_problem();
        let hp = HyperParams { max_outer: 3, max_inner: 200, ..Default::default() };
        let a = fit(&problem, &s, &hp).unwrap();
        let b = fit(&problem, &s, &hp).unwrap();
        assert_eq!(a.trace, b.trace);
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.c, y.c);
        }
    }

    #[test]
    fn per_task_duals_are_tracked() {
        let (problem, s) = two_task_problem();
        let hp = HyperParams { max_outer: 2, max_inner: 100, per_task_dual: true, ..Default::default() };
        let r = fit(&problem, &s, &hp).unwrap();
        assert_eq!(r.beta.len(), 2);
        assert!(r.h_monotone_fraction() >= 0.0);
    }
}

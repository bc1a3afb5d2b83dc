//! Causal-order differences between graphs over partially shared node sets.
//!
//! The exact transitive causal matrix `T*` of a DAG records, for each ordered
//! pair `(i, j)`, whether `i` precedes `j` in every (1), no (0) or only some
//! (0.5) topological order. For a DAG that reduces to reachability: `i`
//! precedes `j` in every order iff `j` is reachable from `i`.
//!
//! The smooth surrogate replaces reachability with the polynomial
//! `l(W) = I + W + ... + W^P` and the indicator with a sigmoid of sharpness `c`.

use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Entries of intermediate matrix powers are clamped here.
pub const POWER_CLAMP: f64 = 1e12;

/// Global identity of a variable, shared across tasks.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub usize);

/// A directed graph over an ordered list of global node ids. Edges are stored
/// by local index into `nodes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    nodes: Vec<NodeId>,
    edges: BTreeSet<(usize, usize)>,
}

impl DirectedGraph {
    /// Builds a graph from edges given as global id pairs.
    pub fn new(nodes: Vec<NodeId>, edges: &[(NodeId, NodeId)]) -> Result<Self> {
        let index = index_nodes(&nodes)?;
        let mut local = BTreeSet::new();
        for &(a, b) in edges {
            let ia = *index
                .get(&a)
                .ok_or_else(|| invalid(format!("edge endpoint {} is not a node", a.0)))?;
            let ib = *index
                .get(&b)
                .ok_or_else(|| invalid(format!("edge endpoint {} is not a node", b.0)))?;
            if ia == ib {
                return Err(invalid(format!("self-loop on node {}", a.0)));
            }
            local.insert((ia, ib));
        }
        Ok(Self {
            nodes,
            edges: local,
        })
    }

    /// Builds a graph from edges given as local index pairs.
    pub fn from_local_edges(
        nodes: Vec<NodeId>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        index_nodes(&nodes)?;
        let p = nodes.len();
        let mut local = BTreeSet::new();
        for (a, b) in edges {
            if a >= p || b >= p {
                return Err(invalid(format!("edge ({a}, {b}) out of range for {p} nodes")));
            }
            if a == b {
                return Err(invalid(format!("self-loop on node {}", nodes[a].0)));
            }
            local.insert((a, b));
        }
        Ok(Self {
            nodes,
            edges: local,
        })
    }

    /// Edge `(i, j)` for every off-diagonal entry of `weights` above
    /// `threshold`.
    pub fn from_weights(nodes: Vec<NodeId>, weights: &DMatrix<f64>, threshold: f64) -> Result<Self> {
        let p = nodes.len();
        if weights.shape() != (p, p) {
            return Err(invalid(format!(
                "weight matrix is {:?}, expected {p}x{p}",
                weights.shape()
            )));
        }
        let edges = (0..p)
            .flat_map(|i| (0..p).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && weights[(i, j)] > threshold);
        Self::from_local_edges(nodes, edges)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges as local index pairs, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as global id pairs, sorted by local index.
    pub fn edge_ids(&self) -> Vec<(NodeId, NodeId)> {
        self.edges
            .iter()
            .map(|&(a, b)| (self.nodes[a], self.nodes[b]))
            .collect()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|&n| n == id)
    }

    /// 0/1 adjacency matrix by local index.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let p = self.len();
        let mut m = DMatrix::zeros(p, p);
        for &(a, b) in &self.edges {
            m[(a, b)] = 1.0;
        }
        m
    }

    fn successors(&self) -> Vec<Vec<usize>> {
        let mut succ = vec![Vec::new(); self.len()];
        for &(a, b) in &self.edges {
            succ[a].push(b);
        }
        succ
    }

    /// Returns one directed cycle (as local indices, first node repeated at
    /// the end) if the graph has any.
    pub fn find_cycle(&self) -> Option<Vec<usize>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let succ = self.successors();
        let mut mark = vec![Mark::New; self.len()];
        let mut parent = vec![usize::MAX; self.len()];
        for root in 0..self.len() {
            if mark[root] != Mark::New {
                continue;
            }
            // iterative DFS: (node, next successor position)
            let mut stack = vec![(root, 0usize)];
            mark[root] = Mark::Active;
            while let Some(&mut (node, ref mut pos)) = stack.last_mut() {
                if *pos < succ[node].len() {
                    let next = succ[node][*pos];
                    *pos += 1;
                    match mark[next] {
                        Mark::New => {
                            mark[next] = Mark::Active;
                            parent[next] = node;
                            stack.push((next, 0));
                        }
                        Mark::Active => {
                            let mut cycle = vec![next];
                            let mut cur = node;
                            while cur != next {
                                cycle.push(cur);
                                cur = parent[cur];
                            }
                            cycle.push(next);
                            cycle.reverse();
                            return Some(cycle);
                        }
                        Mark::Done => {}
                    }
                } else {
                    mark[node] = Mark::Done;
                    stack.pop();
                }
            }
        }
        None
    }

    pub fn is_acyclic(&self) -> bool {
        self.find_cycle().is_none()
    }

    pub(crate) fn cycle_error(&self, cycle: &[usize]) -> Error {
        Error::Cycle {
            cycle: cycle.iter().map(|&i| self.nodes[i]).collect(),
        }
    }

    /// `reach[i][j]` is true iff there is a non-empty path from `i` to `j`.
    pub fn reachability(&self) -> Vec<Vec<bool>> {
        let succ = self.successors();
        let p = self.len();
        let mut reach = vec![vec![false; p]; p];
        for (start, row) in reach.iter_mut().enumerate() {
            let mut stack: Vec<usize> = succ[start].clone();
            while let Some(v) = stack.pop() {
                if !row[v] {
                    row[v] = true;
                    stack.extend(succ[v].iter().copied());
                }
            }
        }
        reach
    }

    /// The graph with an edge `(i, j)` for every pair where `j` is reachable
    /// from `i`, excluding self-loops.
    pub fn transitive_closure(&self) -> DirectedGraph {
        let reach = self.reachability();
        let p = self.len();
        let edges = (0..p)
            .flat_map(|i| (0..p).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && reach[i][j]);
        DirectedGraph {
            nodes: self.nodes.clone(),
            edges: edges.collect(),
        }
    }

    /// A topological order of local indices, or the cycle error.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let p = self.len();
        let mut indeg = vec![0usize; p];
        for &(_, b) in &self.edges {
            indeg[b] += 1;
        }
        let succ = self.successors();
        let mut ready: BTreeSet<usize> = (0..p).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(p);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for &w in &succ[v] {
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    ready.insert(w);
                }
            }
        }
        if order.len() < p {
            let cycle = self.find_cycle().expect("unordered nodes imply a cycle");
            return Err(self.cycle_error(&cycle));
        }
        Ok(order)
    }
}

fn index_nodes(nodes: &[NodeId]) -> Result<HashMap<NodeId, usize>> {
    let mut index = HashMap::with_capacity(nodes.len());
    for (i, &id) in nodes.iter().enumerate() {
        if index.insert(id, i).is_some() {
            return Err(invalid(format!("duplicate node id {}", id.0)));
        }
    }
    Ok(index)
}

/// `{0, 0.5, 1}`-valued matrix of pairwise causal-order relations.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitiveCausalMatrix {
    nodes: Vec<NodeId>,
    values: DMatrix<f64>,
}

impl TransitiveCausalMatrix {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }
}

/// Local index pairs `(index in u, index in v)` for every global id present in
/// both node lists, in the order of `u`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OverlapMap {
    pairs: Vec<(usize, usize)>,
}

impl OverlapMap {
    pub fn new(nodes_u: &[NodeId], nodes_v: &[NodeId]) -> Self {
        let index_v: HashMap<NodeId, usize> =
            nodes_v.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let pairs = nodes_u
            .iter()
            .enumerate()
            .filter_map(|(iu, id)| index_v.get(id).map(|&iv| (iu, iv)))
            .collect();
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same overlap seen from the other graph.
    pub fn swapped(&self) -> Self {
        Self {
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
        }
    }

    fn check(&self, pu: usize, pv: usize) -> Result<()> {
        if self.pairs.iter().any(|&(a, b)| a >= pu || b >= pv) {
            return Err(invalid(format!(
                "overlap map indexes outside {pu}x{pv} node sets"
            )));
        }
        Ok(())
    }
}

/// Exact transitive causal matrix of an acyclic graph.
pub fn transitive_causal_matrix(g: &DirectedGraph) -> Result<TransitiveCausalMatrix> {
    if let Some(cycle) = g.find_cycle() {
        return Err(g.cycle_error(&cycle));
    }
    let reach = g.reachability();
    let p = g.len();
    let values = DMatrix::from_fn(p, p, |i, j| {
        if reach[i][j] {
            1.0
        } else if reach[j][i] {
            0.0
        } else {
            0.5
        }
    });
    Ok(TransitiveCausalMatrix {
        nodes: g.nodes.clone(),
        values,
    })
}

/// Sum of squared differences of `T*` entries over node pairs shared by both
/// graphs.
pub fn causal_difference(gu: &DirectedGraph, gv: &DirectedGraph) -> Result<f64> {
    let tu = transitive_causal_matrix(gu)?;
    let tv = transitive_causal_matrix(gv)?;
    let overlap = OverlapMap::new(gu.nodes(), gv.nodes());
    Ok(squared_overlap_difference(tu.values(), tv.values(), &overlap))
}

/// Number of shared ordered node pairs whose edge is present in exactly one
/// graph.
pub fn edge_difference(gu: &DirectedGraph, gv: &DirectedGraph) -> usize {
    let overlap = OverlapMap::new(gu.nodes(), gv.nodes());
    let pairs = overlap.pairs();
    let mut count = 0;
    for &(iu, iv) in pairs {
        for &(ju, jv) in pairs {
            if gu.has_edge(iu, ju) != gv.has_edge(iv, jv) {
                count += 1;
            }
        }
    }
    count
}

/// Induced subgraph on `keep`; node order follows `g`.
pub fn project_graph(g: &DirectedGraph, keep: &[NodeId]) -> Result<DirectedGraph> {
    let mut selected = vec![false; g.len()];
    for id in keep {
        let i = g
            .index_of(*id)
            .ok_or_else(|| invalid(format!("node {} is not in the graph", id.0)))?;
        selected[i] = true;
    }
    let mut new_index = vec![usize::MAX; g.len()];
    let mut nodes = Vec::new();
    for (i, &id) in g.nodes.iter().enumerate() {
        if selected[i] {
            new_index[i] = nodes.len();
            nodes.push(id);
        }
    }
    let edges = g
        .edges
        .iter()
        .filter(|&&(a, b)| selected[a] && selected[b])
        .map(|&(a, b)| (new_index[a], new_index[b]))
        .collect();
    Ok(DirectedGraph { nodes, edges })
}

/// Projection of a causal order onto `keep`: the induced subgraph of the
/// transitive closure, so orderings routed through dropped nodes survive.
pub fn project_causal_order(g: &DirectedGraph, keep: &[NodeId]) -> Result<DirectedGraph> {
    project_graph(&g.transitive_closure(), keep)
}

fn squared_overlap_difference(a: &DMatrix<f64>, b: &DMatrix<f64>, overlap: &OverlapMap) -> f64 {
    let pairs = overlap.pairs();
    let mut sum = 0.0;
    for &(iu, iv) in pairs {
        for &(ju, jv) in pairs {
            let d = a[(iu, ju)] - b[(iv, jv)];
            sum += d * d;
        }
    }
    sum
}

/// `l(W) = I + W + ... + W^P` together with the powers needed to
/// differentiate it.
#[derive(Debug, Clone)]
pub struct Reachability {
    /// `W^0 .. W^{P-1}`, clamped.
    powers: Vec<DMatrix<f64>>,
    value: DMatrix<f64>,
    clamped: usize,
}

impl Reachability {
    pub fn new(w: &DMatrix<f64>) -> Self {
        let p = w.nrows();
        assert_eq!(w.ncols(), p, "weight matrix must be square");
        let mut clamped = 0;
        let mut powers = Vec::with_capacity(p);
        let mut value = DMatrix::identity(p, p);
        let mut current = DMatrix::identity(p, p);
        powers.push(current.clone());
        for k in 1..=p {
            current = &current * w;
            for x in current.iter_mut() {
                if *x > POWER_CLAMP {
                    *x = POWER_CLAMP;
                    clamped += 1;
                }
            }
            value += &current;
            if k < p {
                powers.push(current.clone());
            }
        }
        Self {
            powers,
            value,
            clamped,
        }
    }

    pub fn value(&self) -> &DMatrix<f64> {
        &self.value
    }

    pub fn into_value(self) -> DMatrix<f64> {
        self.value
    }

    /// Number of power entries that hit [`POWER_CLAMP`].
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    /// Pulls a gradient with respect to `l(W)` back to `W`:
    /// `sum_{p=1..P} sum_{r=0..p-1} (W^r)^T G (W^{p-1-r})^T`.
    ///
    /// Clamping is ignored; the result is the derivative of the unclamped
    /// polynomial.
    pub fn backprop(&self, grad_l: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.powers.len();
        if p == 0 {
            return DMatrix::zeros(0, 0);
        }
        // Total = sum_{a+b <= P-1} Wt^a G Wt^b, evaluated Horner-style over a
        // with R_m = G * sum_{b<=m} Wt^b.
        let wt = self.powers.get(1).map(|w| w.transpose());
        let mut partial = DMatrix::<f64>::zeros(p, p);
        let mut r = Vec::with_capacity(p);
        for m in 0..p {
            partial += self.powers[m].transpose();
            r.push(grad_l * &partial);
        }
        let mut acc = r[0].clone();
        for m in 1..p {
            let wt = wt.as_ref().expect("P >= 2 whenever m >= 1");
            acc = &r[m] + wt * acc;
        }
        acc
    }
}

/// `I + sum_{i=1..P} W^i`.
pub fn reachability_polynomial(w: &DMatrix<f64>) -> DMatrix<f64> {
    Reachability::new(w).into_value()
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_slope(x: f64) -> f64 {
    let s = sigmoid(x.abs());
    s * (1.0 - s)
}

/// `2c σ'(x) (σ(x) - σ(y))`: sensitivity of one squared sigmoid difference to
/// its first argument, scaled by `c`. Algebraically equal to
/// `2c e^x (e^x - e^y) / ((1 + e^x)^3 (1 + e^y))`.
pub fn pair_sensitivity(x: f64, y: f64, c: f64) -> f64 {
    2.0 * c * sigmoid_slope(x) * (sigmoid(x) - sigmoid(y))
}

/// Sigmoid of the antisymmetric part of a reachability matrix, built so that
/// `T_ij + T_ji == 1` holds exactly.
fn antisymmetric_sigmoid(l: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    let p = l.nrows();
    let mut t = DMatrix::from_element(p, p, 0.5);
    for i in 0..p {
        for j in (i + 1)..p {
            let x = c * (l[(i, j)] - l[(j, i)]);
            // 1 - s is exact for s in [0.5, 1]
            let (tij, tji) = if x >= 0.0 {
                let s = sigmoid(x);
                (s, 1.0 - s)
            } else {
                let s = sigmoid(-x);
                (1.0 - s, s)
            };
            t[(i, j)] = tij;
            t[(j, i)] = tji;
        }
    }
    t
}

/// The smooth transitive matrix `S(c (l(W) - l(W)^T))` with everything needed
/// for its gradient.
#[derive(Debug, Clone)]
pub struct SmoothOrder {
    reach: Reachability,
    t: DMatrix<f64>,
    c: f64,
}

impl SmoothOrder {
    pub fn new(w: &DMatrix<f64>, c: f64) -> Self {
        let reach = Reachability::new(w);
        let t = antisymmetric_sigmoid(reach.value(), c);
        Self { reach, t, c }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn reachability(&self) -> &Reachability {
        &self.reach
    }

    pub fn sharpness(&self) -> f64 {
        self.c
    }

    fn logit(&self, i: usize, j: usize) -> f64 {
        let l = self.reach.value();
        self.c * (l[(i, j)] - l[(j, i)])
    }
}

/// Differentiable transitive causal matrix `T(W)`.
pub fn differentiable_transitive_matrix(w: &DMatrix<f64>, c: f64) -> DMatrix<f64> {
    SmoothOrder::new(w, c).t
}

/// Differentiable causal difference between two weighted graphs.
pub fn dcd(w_u: &DMatrix<f64>, w_v: &DMatrix<f64>, overlap: &OverlapMap, c: f64) -> Result<f64> {
    overlap.check(w_u.nrows(), w_v.nrows())?;
    let su = SmoothOrder::new(w_u, c);
    let sv = SmoothOrder::new(w_v, c);
    Ok(dcd_between(&su, &sv, overlap))
}

/// DCD from precomputed smooth orders.
pub fn dcd_between(su: &SmoothOrder, sv: &SmoothOrder, overlap: &OverlapMap) -> f64 {
    squared_overlap_difference(&su.t, &sv.t, overlap)
}

/// Gradients of DCD with respect to `l(W_u)` and `l(W_v)`, scaled by `weight`
/// and added into `grad_lu`, `grad_lv`.
pub fn accumulate_dcd_reach_grads(
    su: &SmoothOrder,
    sv: &SmoothOrder,
    overlap: &OverlapMap,
    weight: f64,
    grad_lu: &mut DMatrix<f64>,
    grad_lv: &mut DMatrix<f64>,
) {
    let c = su.c;
    let pairs = overlap.pairs();
    for &(iu, iv) in pairs {
        for &(ju, jv) in pairs {
            if iu == ju {
                continue;
            }
            let xu = su.logit(iu, ju);
            let xv = sv.logit(iv, jv);
            // d/dl_ij collects the (i,j) and (j,i) squared terms: 2 Q(x, y)
            grad_lu[(iu, ju)] += weight * 2.0 * pair_sensitivity(xu, xv, c);
            grad_lv[(iv, jv)] += weight * 2.0 * pair_sensitivity(xv, xu, sv.c);
        }
    }
}

/// `∂ DCD(W_u, W_v) / ∂ W_u`.
pub fn dcd_gradient(
    w_u: &DMatrix<f64>,
    w_v: &DMatrix<f64>,
    overlap: &OverlapMap,
    c: f64,
) -> Result<DMatrix<f64>> {
    overlap.check(w_u.nrows(), w_v.nrows())?;
    let su = SmoothOrder::new(w_u, c);
    let sv = SmoothOrder::new(w_v, c);
    let mut gu = DMatrix::zeros(w_u.nrows(), w_u.nrows());
    let mut gv = DMatrix::zeros(w_v.nrows(), w_v.nrows());
    accumulate_dcd_reach_grads(&su, &sv, overlap, 1.0, &mut gu, &mut gv);
    Ok(su.reach.backprop(&gu))
}

#![allow(dead_code)]

use mmdag::causal_diff::{DirectedGraph, NodeId};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

/// Random DAG on the given global ids: edges follow a random ranking.
pub fn random_dag<R: Rng>(rng: &mut R, ids: &[usize], prob: f64) -> DirectedGraph {
    let mut rank: Vec<usize> = ids.to_vec();
    rank.shuffle(rng);
    let mut edges = Vec::new();
    for a in 0..rank.len() {
        for b in a + 1..rank.len() {
            if rng.random::<f64>() < prob {
                edges.push((NodeId(rank[a]), NodeId(rank[b])));
            }
        }
    }
    let mut nodes: Vec<NodeId> = ids.iter().map(|&i| NodeId(i)).collect();
    nodes.shuffle(rng);
    DirectedGraph::new(nodes, &edges).unwrap()
}

/// Random subset of `1..=pool` with at least `min` members.
pub fn random_ids<R: Rng>(rng: &mut R, pool: usize, min: usize, max: usize) -> Vec<usize> {
    let size = rng.random_range(min..=max.min(pool));
    let mut all: Vec<usize> = (1..=pool).collect();
    all.shuffle(rng);
    all.truncate(size);
    all
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Transitive causal matrix by enumerating every node order consistent with
/// the edges: 1 if `i` precedes `j` in all of them, 0 in none, else 0.5.
pub fn oracle_tstar(g: &DirectedGraph) -> DMatrix<f64> {
    let p = g.len();
    let edges: Vec<(usize, usize)> = g.edges().collect();
    let mut before = DMatrix::<usize>::zeros(p, p);
    let mut consistent = 0usize;
    for order in permutations(p) {
        let mut pos = vec![0; p];
        for (k, &v) in order.iter().enumerate() {
            pos[v] = k;
        }
        if edges.iter().all(|&(a, b)| pos[a] < pos[b]) {
            consistent += 1;
            for i in 0..p {
                for j in 0..p {
                    if pos[i] < pos[j] {
                        before[(i, j)] += 1;
                    }
                }
            }
        }
    }
    assert!(consistent > 0, "graph has no consistent order");
    DMatrix::from_fn(p, p, |i, j| {
        if i != j && before[(i, j)] == consistent {
            1.0
        } else if i != j && before[(i, j)] == 0 && before[(j, i)] == consistent {
            0.0
        } else {
            0.5
        }
    })
}

/// Causal difference straight from the definition using the oracle matrices.
pub fn oracle_cd(gu: &DirectedGraph, gv: &DirectedGraph) -> f64 {
    let tu = oracle_tstar(gu);
    let tv = oracle_tstar(gv);
    let shared: Vec<(usize, usize)> = gu
        .nodes()
        .iter()
        .enumerate()
        .filter_map(|(iu, id)| gv.index_of(*id).map(|iv| (iu, iv)))
        .collect();
    let mut sum = 0.0;
    for &(iu, iv) in &shared {
        for &(ju, jv) in &shared {
            let d = tu[(iu, ju)] - tv[(iv, jv)];
            sum += d * d;
        }
    }
    sum
}

fn stencil<F: Fn(&DMatrix<f64>) -> f64>(f: &F, x: &DMatrix<f64>, idx: usize, h: f64) -> f64 {
    let at = |k: f64| {
        let mut y = x.clone();
        y[idx] += k * h;
        f(&y)
    };
    (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h)
}

/// Five-point central difference of `f` along coordinate `idx` of `x`,
/// Richardson-extrapolated over `h` and `h/2`.
pub fn central_diff<F: Fn(&DMatrix<f64>) -> f64>(f: &F, x: &DMatrix<f64>, idx: usize, h: f64) -> f64 {
    (16.0 * stencil(f, x, idx, h / 2.0) - stencil(f, x, idx, h)) / 15.0
}

/// Largest relative disagreement between an analytic and a numeric value.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Nonnegative random weight matrix with zero diagonal.
pub fn random_weights<R: Rng>(rng: &mut R, p: usize, density: f64, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| {
        if i != j && rng.random::<f64>() < density {
            scale * rng.random::<f64>()
        } else {
            0.0
        }
    })
}

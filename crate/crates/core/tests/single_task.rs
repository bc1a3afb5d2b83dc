mod common;

use mmdag::causal_diff::NodeId;
use mmdag::learner::*;
use mmdag::sem::{EmbeddingMatrix, NodeSpec, TaskSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Linear chain `1 -> 2 -> ... -> p` driven only by the model's own
/// exogenous noise; node order in the task is shuffled.
fn chain_problem(p: usize, n: usize, seed: u64) -> (Problem, Vec<(NodeId, NodeId)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<f64> = (1..p)
        .map(|_| {
            let mag = rng.random_range(0.5..2.0);
            if rng.random::<bool>() { mag } else { -mag }
        })
        .collect();
    let mut layout: Vec<usize> = (1..=p).collect();
    rand::seq::SliceRandom::shuffle(layout.as_mut_slice(), &mut rng);
    let mut a = DMatrix::zeros(n, p);
    for r in 0..n {
        let mut prev = 0.0;
        let mut values = vec![0.0; p + 1];
        for node in 1..=p {
            let e: f64 = rng.sample(StandardNormal);
            let v = if node == 1 { e } else { coef[node - 2] * prev + e };
            values[node] = v;
            prev = v;
        }
        for (col, &node) in layout.iter().enumerate() {
            a[(r, col)] = values[node];
        }
    }
    let spec = TaskSpec::new(0, layout.iter().map(|&i| NodeSpec::scalar(NodeId(i))).collect(), n).unwrap();
    let task = TaskProblem::new(spec.clone(), EmbeddingMatrix::new(a, &spec).unwrap()).unwrap();
    let truth = (1..p).map(|i| (NodeId(i), NodeId(i + 1))).collect();
    (Problem::new(vec![task]).unwrap(), truth)
}

#[test]
fn chains_are_recovered_exactly() {
    let hp = HyperParams { rho: 0.0, omega: 0.1, ..Default::default() };
    let s = SimilarityMatrix::uniform(1, 0.0).unwrap();
    for p in 2..=5 {
        for seed in 0..3 {
            let (problem, truth) = chain_problem(p, 1000, 100 * p as u64 + seed);
            let result = fit(&problem, &s, &hp).unwrap();
            let mut found = result.tasks[0].adjacency.edge_ids();
            found.sort();
            assert_eq!(found, truth, "chain of {p}, seed {seed}");
        }
    }
}

#[test]
fn fit_is_bit_identical_across_runs() {
    let (problem, _) = chain_problem(4, 200, 7);
    let s = SimilarityMatrix::uniform(1, 0.0).unwrap();
    let hp = HyperParams { rho: 0.0, max_outer: 4, ..Default::default() };
    let a = fit(&problem, &s, &hp).unwrap();
    let b = fit(&problem, &s, &hp).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.h_trace, b.h_trace);
    for (x, y) in a.tasks.iter().zip(&b.tasks) {
        assert_eq!(x.c, y.c);
        assert_eq!(x.adjacency, y.adjacency);
    }
}

#[test]
fn invalid_hyperparameters_are_rejected_before_fitting() {
    let (problem, _) = chain_problem(2, 10, 1);
    let s = SimilarityMatrix::uniform(1, 0.0).unwrap();
    let hp = HyperParams { rate_r: 0.5, h_min: 0.0, ..Default::default() };
    let err = fit(&problem, &s, &hp).unwrap_err().to_string();
    assert!(err.contains("rate_r") && err.contains("h_min"), "{err}");
}

proptest! {
    #[test]
    fn thresholded_graph_is_acyclic(seed in any::<u64>(), omega in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(2..8);
        let w = common::random_weights(&mut rng, p, 0.6, 2.0);
        let nodes: Vec<NodeId> = (1..=p).map(NodeId).collect();
        let th = threshold_edges(nodes, &w, omega).unwrap();
        prop_assert!(th.graph.is_acyclic());
        for (i, j) in th.graph.edges() {
            prop_assert!(w[(i, j)] > omega);
        }
        for &(i, j) in &th.removed {
            prop_assert!(w[(i, j)] > omega);
            prop_assert!(!th.graph.has_edge(i, j));
        }
        let kept = th.graph.edge_count() + th.removed.len();
        let above = w.iter().filter(|&&v| v > omega).count();
        prop_assert_eq!(kept, above);
    }
}

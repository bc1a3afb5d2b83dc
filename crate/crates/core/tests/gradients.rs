mod common;

use common::{central_diff, random_ids, random_weights, rel_err};
use mmdag::causal_diff::{dcd, dcd_gradient, NodeId, OverlapMap};
use mmdag::learner::*;
use mmdag::sem::{BlockTransitionMatrix, EmbeddingMatrix, NodeSpec, TaskSpec};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const POINTS: usize = 50;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-3;

fn check<F: Fn(&DMatrix<f64>) -> f64>(f: F, grad: &DMatrix<f64>, x: &DMatrix<f64>, skip: impl Fn(usize) -> bool) {
    for idx in 0..x.len() {
        if skip(idx) {
            continue;
        }
        let numeric = central_diff(&f, x, idx, STEP);
        let e = rel_err(grad[idx], numeric);
        assert!(e <= TOL, "coordinate {idx}: analytic {} numeric {numeric} rel {e}", grad[idx]);
    }
}

/// Random task of at most 5 nodes and embedding width at most 10.
fn random_spec(rng: &mut ChaCha8Rng, task_id: usize, ids: &[usize], n: usize) -> TaskSpec {
    let mut width = 0;
    let nodes = ids
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let room = 10 - width - (ids.len() - 1 - k);
            let d = if room > 1 && rng.random::<f64>() < 0.4 { rng.random_range(2..=room.min(3)) } else { 1 };
            width += d;
            if d == 1 {
                NodeSpec::scalar(NodeId(i))
            } else {
                NodeSpec::function(NodeId(i), d)
            }
        })
        .collect();
    TaskSpec::new(task_id, nodes, n).unwrap()
}

fn random_c(rng: &mut ChaCha8Rng, spec: &TaskSpec, scale: f64) -> DMatrix<f64> {
    let m = spec.embed_dim();
    let mut c = DMatrix::from_fn(m, m, |_, _| scale * (rng.random::<f64>() - 0.5));
    for j in 0..spec.node_count() {
        let r = spec.block(j);
        c.view_mut((r.start, r.start), (r.len(), r.len())).fill(0.0);
    }
    c
}

fn diagonal_block(spec: &TaskSpec, idx: usize) -> bool {
    let m = spec.embed_dim();
    let (row, col) = (idx % m, idx / m);
    (0..spec.node_count()).any(|j| spec.block(j).contains(&row) && spec.block(j).contains(&col))
}

fn random_task(rng: &mut ChaCha8Rng, task_id: usize, ids: &[usize]) -> TaskProblem {
    let n = rng.random_range(5..30);
    let spec = random_spec(rng, task_id, ids, n);
    let a = DMatrix::from_fn(n, spec.embed_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    TaskProblem::new(spec.clone(), EmbeddingMatrix::new(a, &spec).unwrap()).unwrap()
}

#[test]
fn squared_residual_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..POINTS {
        let n = rng.random_range(3..20);
        let m = rng.random_range(2..=10);
        let a = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() - 0.5);
        let f = |c: &DMatrix<f64>| (&a - &a * c).norm_squared();
        let grad = -2.0 * a.transpose() * (&a - &a * &c);
        check(f, &grad, &c, |_| false);
    }
}

#[test]
fn fit_term_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let hp = HyperParams { lambda: 0.0, rho: 0.0, ..Default::default() };
    for _ in 0..POINTS {
        let p = rng.random_range(2..=5);
        let ids: Vec<usize> = (1..=p).collect();
        let task = random_task(&mut rng, 0, &ids);
        let spec = task.spec().clone();
        let problem = Problem::new(vec![task]).unwrap();
        let s = SimilarityMatrix::uniform(1, 0.0).unwrap();
        let c = random_c(&mut rng, &spec, 1.0);
        let wrap = |c: &DMatrix<f64>| vec![BlockTransitionMatrix::new(c.clone(), &spec).unwrap()];
        let grad = full_gradient(&wrap(&c), &problem, &s, &hp, &Duals::Shared(0.0), 0.0).unwrap();
        let f = |c: &DMatrix<f64>| objective(&wrap(c), &problem, &s, &hp).unwrap();
        check(f, &grad[0], &c, |idx| diagonal_block(&spec, idx));
    }
}

#[test]
fn acyclicity_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..POINTS {
        let p = rng.random_range(2..=5);
        let w = random_weights(&mut rng, p, 0.6, 1.5);
        check(acyclicity, &acyclicity_gradient(&w), &w, |_| false);
    }
}

#[test]
fn acyclicity_gradient_on_a_chain_counts_paths() {
    // chain 1 -> 2 -> 3 with unit weights: (e^W)^T has 1 on the diagonal,
    // 1 one step back along the chain and 1/2 two steps back
    let mut w = DMatrix::zeros(3, 3);
    w[(0, 1)] = 1.0;
    w[(1, 2)] = 1.0;
    let g = acyclicity_gradient(&w);
    let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.5, 1.0, 1.0]);
    assert!((g - expected).amax() < 1e-12);
}

#[test]
fn dcd_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..POINTS {
        let u = random_ids(&mut rng, 6, 2, 5);
        let v = random_ids(&mut rng, 6, 2, 5);
        let nu: Vec<NodeId> = u.iter().map(|&i| NodeId(i)).collect();
        let nv: Vec<NodeId> = v.iter().map(|&i| NodeId(i)).collect();
        let overlap = OverlapMap::new(&nu, &nv);
        let c = rng.random_range(0.5..10.0);
        let wu = random_weights(&mut rng, u.len(), 0.5, 1.0);
        let wv = random_weights(&mut rng, v.len(), 0.5, 1.0);
        let grad = dcd_gradient(&wu, &wv, &overlap, c).unwrap();
        check(|w| dcd(w, &wv, &overlap, c).unwrap(), &grad, &wu, |_| false);
    }
}

#[test]
fn matrix_diff_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for _ in 0..POINTS {
        let u = random_ids(&mut rng, 6, 2, 5);
        let v = random_ids(&mut rng, 6, 2, 5);
        let nu: Vec<NodeId> = u.iter().map(|&i| NodeId(i)).collect();
        let nv: Vec<NodeId> = v.iter().map(|&i| NodeId(i)).collect();
        let overlap = OverlapMap::new(&nu, &nv);
        let wu = random_weights(&mut rng, u.len(), 0.7, 2.0);
        let wv = random_weights(&mut rng, v.len(), 0.7, 2.0);
        let grad = matrix_diff_gradient(&wu, &wv, &overlap);
        check(|w| matrix_diff_penalty(w, &wv, &overlap), &grad, &wu, |_| false);
    }
}

fn full_gradient_case(coupling: Coupling, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..POINTS {
        let ids: Vec<Vec<usize>> = (0..2).map(|_| random_ids(&mut rng, 5, 2, 4)).collect();
        let tasks: Vec<TaskProblem> = ids.iter().enumerate().map(|(l, ids)| random_task(&mut rng, l, ids)).collect();
        let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec().clone()).collect();
        let problem = Problem::new(tasks).unwrap();
        let s = SimilarityMatrix::uniform(2, rng.random_range(0.2..2.0)).unwrap();
        let hp = HyperParams {
            lambda: 0.05,
            rho: 0.7,
            c: rng.random_range(1.0..10.0),
            coupling,
            ..Default::default()
        };
        let duals = Duals::PerTask(vec![rng.random(), rng.random()]);
        let alpha = rng.random_range(0.5..3.0);
        let cs: Vec<DMatrix<f64>> = specs.iter().map(|sp| random_c(&mut rng, sp, 1.2)).collect();
        let wrap = |cs: &[DMatrix<f64>]| -> Vec<BlockTransitionMatrix> {
            cs.iter().zip(&specs).map(|(c, sp)| BlockTransitionMatrix::new(c.clone(), sp).unwrap()).collect()
        };
        let grads = full_gradient(&wrap(&cs), &problem, &s, &hp, &duals, alpha).unwrap();
        for l in 0..2 {
            let f = |c: &DMatrix<f64>| {
                let mut all = cs.clone();
                all[l] = c.clone();
                augmented_objective(&wrap(&all), &problem, &s, &hp, &duals, alpha).unwrap()
            };
            // the L1 kink sits at zero, so coordinates within the step of it are skipped
            check(f, &grads[l], &cs[l], |idx| diagonal_block(&specs[l], idx) || cs[l][idx].abs() < 3.0 * STEP);
            for idx in 0..cs[l].len() {
                if diagonal_block(&specs[l], idx) {
                    assert_eq!(grads[l][idx], 0.0);
                }
            }
        }
    }
}

#[test]
fn full_gradient_with_dcd_matches_finite_differences() {
    full_gradient_case(Coupling::Dcd, 26);
}

#[test]
fn full_gradient_with_matrix_diff_matches_finite_differences() {
    full_gradient_case(Coupling::MatrixDiff, 27);
}

#[test]
fn coupling_free_gradient_ignores_rho() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let tasks = vec![random_task(&mut rng, 0, &[1, 2, 3]), random_task(&mut rng, 1, &[2, 3, 4])];
    let specs: Vec<TaskSpec> = tasks.iter().map(|t| t.spec().clone()).collect();
    let problem = Problem::new(tasks).unwrap();
    let s = SimilarityMatrix::uniform(2, 1.0).unwrap();
    let cs: Vec<BlockTransitionMatrix> =
        specs.iter().map(|sp| BlockTransitionMatrix::new(random_c(&mut rng, sp, 1.0), sp).unwrap()).collect();
    let base = HyperParams { rho: 0.0, ..Default::default() };
    let with_rho = HyperParams { rho: 5.0, coupling: Coupling::None, ..Default::default() };
    let a = full_gradient(&cs, &problem, &s, &base, &Duals::Shared(0.3), 2.0).unwrap();
    let b = full_gradient(&cs, &problem, &s, &with_rho, &Duals::Shared(0.3), 2.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradient_vanishes_at_unconstrained_least_squares_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let task = random_task(&mut rng, 0, &[1, 2, 3, 4]);
    let spec = task.spec().clone();
    let a = task.embedding().matrix().clone();
    let m = spec.embed_dim();
    let mut c = DMatrix::zeros(m, m);
    // regress every block's columns on the columns of all other blocks
    for j in 0..spec.node_count() {
        let own = spec.block(j);
        let others: Vec<usize> = (0..m).filter(|k| !own.contains(k)).collect();
        let x = DMatrix::from_fn(a.nrows(), others.len(), |r, k| a[(r, others[k])]);
        let xtx = x.transpose() * &x;
        for col in own.clone() {
            let beta = xtx.clone().lu().solve(&(x.transpose() * a.column(col))).unwrap();
            for (k, &row) in others.iter().enumerate() {
                c[(row, col)] = beta[k];
            }
        }
    }
    let problem = Problem::new(vec![task]).unwrap();
    let s = SimilarityMatrix::uniform(1, 0.0).unwrap();
    let hp = HyperParams { lambda: 0.0, rho: 0.0, ..Default::default() };
    let cs = vec![BlockTransitionMatrix::new(c, &spec).unwrap()];
    let g = full_gradient(&cs, &problem, &s, &hp, &Duals::Shared(0.0), 0.0).unwrap();
    assert!(g[0].amax() < 1e-10, "{}", g[0].amax());
}

//! Densely sampled functional variables.
//!
//! Curves live on a shared grid in `[0, 1]`. Every integral over the time
//! interval is discretized with the trapezoidal rule on that grid, so inner
//! products, projections and the covariance operator all agree on one
//! quadrature.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::causal_diff::NodeId;
use crate::error::{invalid, Result};

/// Eigenvalues at or below this fraction of the total variance are treated as
/// numerically zero.
const DEGENERATE_REL_TOL: f64 = 1e-12;

/// `N` curves sampled on a common grid of `G` time points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalSampleSet {
    grid: Vec<f64>,
    values: DMatrix<f64>,
    node_id: NodeId,
}

impl FunctionalSampleSet {
    /// `values` is `N x G`: row `n` holds sample `n` evaluated on `grid`.
    pub fn new(grid: Vec<f64>, values: DMatrix<f64>, node_id: NodeId) -> Result<Self> {
        validate_grid(&grid)?;
        if values.ncols() != grid.len() {
            return Err(invalid(format!(
                "functional node {}: {} value columns for a grid of {} points",
                node_id.0,
                values.ncols(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "functional node {}: non-finite sample value",
                node_id.0
            )));
        }
        Ok(Self {
            grid,
            values,
            node_id,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn node_id(&self) -> NodeId {
        self.node_id
    }

    pub fn sample_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.grid.len()
    }

    /// Sample `n` as a grid vector.
    pub fn sample(&self, n: usize) -> Vec<f64> {
        self.values.row(n).iter().copied().collect()
    }
}

/// Orthonormal functions evaluated on a grid, as produced by FPCA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    grid: Vec<f64>,
    /// `K x G`; row `k` is the `k`-th basis function.
    basis: DMatrix<f64>,
    explained_variance: Vec<f64>,
    total_variance: f64,
    mean: Option<Vec<f64>>,
    degenerate: usize,
}

impl BasisSet {
    /// Builds a basis from functions that are already orthonormal under the
    /// trapezoidal inner product (for example a Fourier basis). No variance
    /// information is attached.
    pub fn from_functions(grid: Vec<f64>, basis: DMatrix<f64>) -> Result<Self> {
        validate_grid(&grid)?;
        if basis.ncols() != grid.len() {
            return Err(invalid(format!(
                "basis has {} columns for a grid of {} points",
                basis.ncols(),
                grid.len()
            )));
        }
        let k = basis.nrows();
        Ok(Self {
            grid,
            basis,
            explained_variance: vec![0.0; k],
            total_variance: 0.0,
            mean: None,
            degenerate: 0,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.basis.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.nrows() == 0
    }

    /// The `K x G` matrix of basis functions on the grid.
    pub fn functions(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn function(&self, k: usize) -> Vec<f64> {
        self.basis.row(k).iter().copied().collect()
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Total quadrature variance of the decomposed data.
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// Explained variance as a fraction of the total; all zeros for
    /// zero-variance data.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        if self.total_variance <= 0.0 {
            return vec![0.0; self.explained_variance.len()];
        }
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    /// Mean curve subtracted before decomposition, when centering was on.
    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_deref()
    }

    /// Number of components whose eigenvalue is numerically zero. Those
    /// directions are an arbitrary orthonormal completion.
    pub fn degenerate_components(&self) -> usize {
        self.degenerate
    }

    /// `K x K` matrix of pairwise quadrature inner products.
    pub fn gram(&self) -> DMatrix<f64> {
        let w = trapezoid_weights(&self.grid);
        let k = self.len();
        DMatrix::from_fn(k, k, |a, b| {
            (0..self.grid.len())
                .map(|g| w[g] * self.basis[(a, g)] * self.basis[(b, g)])
                .sum()
        })
    }
}

/// Per-sample FPCA scores, `N x K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    scores: DMatrix<f64>,
}

impl ScoreMatrix {
    pub fn new(scores: DMatrix<f64>) -> Self {
        Self { scores }
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.scores
    }

    pub fn sample(&self, n: usize) -> Vec<f64> {
        self.scores.row(n).iter().copied().collect()
    }
}

/// Evenly spaced grid of `g` points covering `[0, 1]`.
pub fn uniform_grid(g: usize) -> Vec<f64> {
    match g {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..g).map(|i| i as f64 / (g - 1) as f64).collect(),
    }
}

/// Trapezoidal quadrature weights for `grid`.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    let mut w = vec![0.0; g];
    for i in 1..g {
        let half = 0.5 * (grid[i] - grid[i - 1]);
        w[i - 1] += half;
        w[i] += half;
    }
    w
}

/// Trapezoidal approximation of the integral of `f * g` over the grid.
pub fn quadrature_inner_product(f: &[f64], g: &[f64], grid: &[f64]) -> Result<f64> {
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(invalid(format!(
            "inner product needs equal lengths, got {}, {} and grid {}",
            f.len(),
            g.len(),
            grid.len()
        )));
    }
    if grid.len() < 2 {
        return Err(invalid("inner product needs at least two grid points"));
    }
    let w = trapezoid_weights(grid);
    Ok(w.iter()
        .zip(f.iter().zip(g))
        .map(|(w, (a, b))| w * a * b)
        .sum())
}

/// Top-`k` functional principal components of `data`.
///
/// The covariance operator is discretized with trapezoidal weights `D` and the
/// symmetric matrix `D^½ Σ D^½` is diagonalized, so the returned basis is
/// orthonormal under the same quadrature used by [`fpca_project`]. Each basis
/// function is flipped so that its largest-magnitude grid value is positive.
pub fn fpca_decompose(
    data: &FunctionalSampleSet,
    k: usize,
    center: bool,
) -> Result<(BasisSet, ScoreMatrix)> {
    let weights = trapezoid_weights(&data.grid);
    let (basis, scores, explained, total, mean, degenerate) =
        weighted_pca(&data.values, &weights, k, center)?;
    Ok((
        BasisSet {
            grid: data.grid.clone(),
            basis,
            explained_variance: explained,
            total_variance: total,
            mean,
            degenerate,
        },
        ScoreMatrix { scores },
    ))
}

/// Ordinary PCA of an `N x T` matrix (unit weights), used to optionally
/// reduce vector nodes. Returns the `k x T` loadings, `N x k` scores and the
/// explained variances.
pub fn pca_reduce(
    values: &DMatrix<f64>,
    k: usize,
    center: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    let weights = vec![1.0; values.ncols()];
    let (loadings, scores, explained, _, _, _) = weighted_pca(values, &weights, k, center)?;
    Ok((loadings, scores, explained))
}

/// Smallest number of leading components whose cumulative explained variance
/// ratio reaches `tau`. Returns at least 1.
pub fn select_component_count(basis: &BasisSet, tau: f64) -> usize {
    let ratio = basis.explained_variance_ratio();
    let mut acc = 0.0;
    for (i, r) in ratio.iter().enumerate() {
        acc += r;
        if acc >= tau - 1e-12 {
            return i + 1;
        }
    }
    ratio.len().max(1)
}

type WeightedPca = (
    DMatrix<f64>,
    DMatrix<f64>,
    Vec<f64>,
    f64,
    Option<Vec<f64>>,
    usize,
);

fn weighted_pca(
    values: &DMatrix<f64>,
    weights: &[f64],
    k: usize,
    center: bool,
) -> Result<WeightedPca> {
    let (n, g) = values.shape();
    if k == 0 {
        return Err(invalid("number of components must be positive"));
    }
    if k > n.min(g) {
        return Err(invalid(format!(
            "requested {k} components but min(N, G) = {}",
            n.min(g)
        )));
    }

    let mut x = values.clone();
    let mean = if center {
        let m: Vec<f64> = (0..g).map(|j| x.column(j).mean()).collect();
        for j in 0..g {
            x.column_mut(j).add_scalar_mut(-m[j]);
        }
        Some(m)
    } else {
        None
    };

    // Rescale columns by sqrt(w) so the covariance becomes symmetric.
    let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut xs = x.clone();
    for j in 0..g {
        xs.column_mut(j).scale_mut(sqrt_w[j]);
    }
    let cov = xs.tr_mul(&xs) / n as f64;
    let total = cov.trace();

    let eigen = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));

    let tol = DEGENERATE_REL_TOL * total.abs().max(f64::MIN_POSITIVE);
    let mut basis = DMatrix::zeros(k, g);
    let mut explained = Vec::with_capacity(k);
    let mut degenerate = 0;
    for (row, &idx) in order.iter().take(k).enumerate() {
        let lambda = eigen.eigenvalues[idx].max(0.0);
        if lambda <= tol {
            degenerate += 1;
        }
        explained.push(lambda);
        let v = eigen.eigenvectors.column(idx);
        let mut f: Vec<f64> = (0..g)
            .map(|j| {
                if sqrt_w[j] > 0.0 {
                    v[j] / sqrt_w[j]
                } else {
                    0.0
                }
            })
            .collect();
        let pivot = f
            .iter()
            .copied()
            .fold(0.0_f64, |best, val| if val.abs() > best.abs() { val } else { best });
        if pivot < 0.0 {
            f.iter_mut().for_each(|val| *val = -*val);
        }
        for j in 0..g {
            basis[(row, j)] = f[j];
        }
    }

    // scores = X D B^T
    let mut xw = x;
    for j in 0..g {
        xw.column_mut(j).scale_mut(weights[j]);
    }
    let scores = xw * basis.transpose();
    Ok((basis, scores, explained, total, mean, degenerate))
}

/// Basis coefficients of `x`: `alpha_k = <x, beta_k>`.
pub fn fpca_project(x: &[f64], basis: &BasisSet) -> Result<Vec<f64>> {
    if x.len() != basis.grid.len() {
        return Err(invalid(format!(
            "curve has {} points but the basis grid has {}",
            x.len(),
            basis.grid.len()
        )));
    }
    let w = trapezoid_weights(&basis.grid);
    let xw = DVector::from_iterator(x.len(), x.iter().zip(&w).map(|(a, b)| a * b));
    Ok((&basis.basis * xw).iter().copied().collect())
}

/// `sum_k scores[k] * beta_k` on the basis grid.
pub fn fpca_reconstruct(scores: &[f64], basis: &BasisSet) -> Result<Vec<f64>> {
    if scores.len() != basis.len() {
        return Err(invalid(format!(
            "{} scores for a basis of {} functions",
            scores.len(),
            basis.len()
        )));
    }
    let s = DVector::from_column_slice(scores);
    Ok((basis.basis.tr_mul(&s)).iter().copied().collect())
}

/// Averages `x` over `bins` contiguous index ranges. Bin sizes differ by at
/// most one; the leading bins take the remainder.
pub fn interval_average(x: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins == 0 {
        return Err(invalid("interval count must be positive"));
    }
    if bins > x.len() {
        return Err(invalid(format!(
            "{bins} intervals requested for {} grid points",
            x.len()
        )));
    }
    let base = x.len() / bins;
    let extra = x.len() % bins;
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let len = base + usize::from(b < extra);
        let chunk = &x[start..start + len];
        out.push(chunk.iter().sum::<f64>() / len as f64);
        start += len;
    }
    Ok(out)
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(invalid("grid needs at least two points"));
    }
    if grid.iter().any(|t| !t.is_finite()) {
        return Err(invalid("grid contains non-finite points"));
    }
    if grid[0] < 0.0 || grid[grid.len() - 1] > 1.0 {
        return Err(invalid("grid must lie within [0, 1]"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("grid must be strictly increasing"));
    }
    Ok(())
}

//! Discretization of the label space `U = [0, 1]`.
//!
//! Every integral over labels becomes a weighted sum over the grid points
//! using one shared weight vector (composite midpoint rule).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{Kernel, LabelField};

/// Midpoint-rule quadrature on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl LabelGrid {
    /// Uniform midpoint grid: `u_i = (i - 1/2) / n`, `w_i = 1 / n`.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("label grid needs at least one point".into()));
        }
        let h = 1.0 / n as f64;
        let points = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
        let weights = vec![h; n];
        Ok(Self { points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted sum `Σ_i w_i f(i)`.
    pub fn integrate(&self, f: impl Fn(usize) -> f64) -> f64 {
        self.weights.iter().enumerate().map(|(i, w)| w * f(i)).sum()
    }

    /// Weighted l2 norm of a per-label field, the discrete `L²(U)` norm.
    pub fn field_norm(&self, x: &LabelField) -> f64 {
        let dim = x.dim();
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let seg = &x.as_slice()[i * dim..(i + 1) * dim];
            acc += w * seg.iter().map(|v| v * v).sum::<f64>();
        }
        acc.sqrt()
    }
}

/// Builds the midpoint grid with `n` labels.
pub fn build_grid(n: usize) -> Result<LabelGrid> {
    LabelGrid::new(n)
}

/// Samples a matrix-valued function on all grid point pairs.
pub fn sample_kernel<F>(grid: &LabelGrid, rows: usize, cols: usize, f: F) -> Result<Kernel>
where
    F: Fn(f64, f64) -> DMatrix<f64>,
{
    let n = grid.len();
    let mut mat = DMatrix::zeros(n * rows, n * cols);
    for (i, &u) in grid.points().iter().enumerate() {
        for (j, &v) in grid.points().iter().enumerate() {
            let block = f(u, v);
            if block.nrows() != rows || block.ncols() != cols {
                return Err(Error::Dimension(format!(
                    "kernel sampler returned a {}x{} block, expected {rows}x{cols}",
                    block.nrows(),
                    block.ncols()
                )));
            }
            if block.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("kernel sample at (u, v) = ({u}, {v})")));
            }
            mat.view_mut((i * rows, j * cols), (rows, cols)).copy_from(&block);
        }
    }
    Ok(Kernel::from_matrix(n, rows, cols, mat))
}

/// Scalar convenience wrapper around [`sample_kernel`].
pub fn sample_scalar_kernel<F>(grid: &LabelGrid, f: F) -> Result<Kernel>
where
    F: Fn(f64, f64) -> f64,
{
    sample_kernel(grid, 1, 1, |u, v| DMatrix::from_element(1, 1, f(u, v)))
}

/// Quadrature surrogate of the Hilbert–Schmidt action: `(Gx)_i = Σ_j w_j G(i,j) x_j`.
pub fn apply_kernel(g: &Kernel, x: &LabelField, grid: &LabelGrid) -> Result<LabelField> {
    let n = grid.len();
    if g.labels() != n || x.labels() != n || g.block_cols() != x.dim() {
        return Err(Error::Dimension(format!(
            "cannot apply a {}-label kernel with {}-column blocks to a {}-label field of dimension {} on a {n}-point grid",
            g.labels(),
            g.block_cols(),
            x.labels(),
            x.dim()
        )));
    }
    let weighted = x.weighted(grid);
    let out: DVector<f64> = g.matrix() * weighted.vector();
    Ok(LabelField::from_vector(g.block_rows(), out))
}

/// Result of the power iteration behind [`operator_norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const NORM_REL_TOL: f64 = 1e-10;
pub const NORM_MAX_ITER: usize = 10_000;

/// Operator norm of the kernel as a map on `L²(U)`.
///
/// Power iteration on `MᵀM` where `M` has blocks `√w_i G(i,j) √w_j`. A
/// non-converged run still returns its best estimate with `converged = false`.
pub fn operator_norm(g: &Kernel, grid: &LabelGrid) -> OperatorNorm {
    let m = g.weighted_symmetric_scaling(grid);
    let cols = m.ncols();
    if cols == 0 {
        return OperatorNorm { value: 0.0, iterations: 0, converged: true };
    }
    // deterministic start vector with components along every direction
    let mut v = DVector::from_fn(cols, |k, _| 1.0 + 0.25 * ((k as f64) * 1.618_033_988_75).sin());
    v /= v.norm();
    let mut prev = 0.0;
    for it in 1..=NORM_MAX_ITER {
        let mv = &m * &v;
        let w = m.tr_mul(&mv);
        let lambda = w.norm();
        if lambda == 0.0 {
            return OperatorNorm { value: 0.0, iterations: it, converged: true };
        }
        v = w / lambda;
        if (lambda - prev).abs() <= NORM_REL_TOL * lambda {
            return OperatorNorm { value: lambda.sqrt(), iterations: it, converged: true };
        }
        prev = lambda;
    }
    log::warn!("operator norm power iteration did not converge in {NORM_MAX_ITER} iterations");
    OperatorNorm { value: prev.sqrt(), iterations: NORM_MAX_ITER, converged: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn midpoint_points_and_weights() {
        let g = build_grid(1).unwrap();
        assert_eq!(g.points(), &[0.5]);
        assert_eq!(g.weights(), &[1.0]);
        let g = build_grid(2).unwrap();
        assert_eq!(g.points(), &[0.25, 0.75]);
        assert_eq!(g.weights(), &[0.5, 0.5]);
        let g = build_grid(4).unwrap();
        assert_eq!(g.points(), &[0.125, 0.375, 0.625, 0.875]);
        assert!(g.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn weights_sum_to_one() {
        for n in [1, 3, 7, 16, 33, 100, 257] {
            let g = build_grid(n).unwrap();
            let s: f64 = g.weights().iter().sum();
            assert!((s - 1.0).abs() <= n as f64 * f64::EPSILON, "n = {n}, sum = {s}");
            assert!(g.points().windows(2).all(|p| p[0] < p[1]));
            assert!(g.points().iter().all(|&u| u > 0.0 && u < 1.0));
        }
    }

    #[test]
    fn zero_labels_rejected() {
        assert!(matches!(build_grid(0), Err(Error::Domain(_))));
    }

    #[test]
    fn sampling_examples() {
        let g = build_grid(2).unwrap();
        let id = sample_kernel(&g, 2, 2, |_, _| DMatrix::identity(2, 2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(id.block(i, j), DMatrix::identity(2, 2));
            }
        }
        let uv = sample_scalar_kernel(&g, |u, v| u * v).unwrap();
        assert_eq!(uv.scalar(0, 0), 0.0625);
        assert_eq!(uv.scalar(0, 1), 0.1875);
        assert_eq!(uv.scalar(1, 0), 0.1875);
        assert_eq!(uv.scalar(1, 1), 0.5625);
        let z = sample_scalar_kernel(&g, |_, _| 0.0).unwrap();
        assert!(z.matrix().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sampling_rejects_non_finite() {
        let g = build_grid(3).unwrap();
        let err = sample_scalar_kernel(&g, |u, v| 1.0 / (u - v)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn apply_examples() {
        let g = build_grid(5).unwrap();
        let id = sample_kernel(&g, 2, 2, |_, _| DMatrix::identity(2, 2)).unwrap();
        let c = LabelField::constant(5, &[1.5, -2.0]);
        let out = apply_kernel(&id, &c, &g).unwrap();
        for i in 0..5 {
            assert_relative_eq!(out.get(i)[0], 1.5, epsilon = 1e-14);
            assert_relative_eq!(out.get(i)[1], -2.0, epsilon = 1e-14);
        }
        let zero = Kernel::zeros(5, 2, 2);
        assert!(apply_kernel(&zero, &c, &g).unwrap().as_slice().iter().all(|&x| x == 0.0));

        let g2 = build_grid(2).unwrap();
        let uv = sample_scalar_kernel(&g2, |u, v| u * v).unwrap();
        let ones = LabelField::constant(2, &[1.0]);
        let out = apply_kernel(&uv, &ones, &g2).unwrap();
        // 0.5·(0.0625 + 0.1875), 0.5·(0.1875 + 0.5625)
        assert_relative_eq!(out.get(0)[0], 0.125, epsilon = 1e-15);
        assert_relative_eq!(out.get(1)[0], 0.375, epsilon = 1e-15);
    }

    #[test]
    fn apply_dimension_mismatch() {
        let g = build_grid(3).unwrap();
        let k = Kernel::zeros(3, 2, 2);
        let x = LabelField::constant(3, &[1.0]);
        assert!(matches!(apply_kernel(&k, &x, &g), Err(Error::Dimension(_))));
    }

    #[test]
    fn norm_examples() {
        let g = build_grid(6).unwrap();
        assert_eq!(operator_norm(&Kernel::zeros(6, 1, 1), &g).value, 0.0);
        let c = sample_scalar_kernel(&g, |_, _| -2.5).unwrap();
        let nrm = operator_norm(&c, &g);
        assert!(nrm.converged);
        assert_relative_eq!(nrm.value, 2.5, max_relative = 1e-9);

        // scaled matrix [[0.03125, 0.09375], [0.09375, 0.28125]], symmetric:
        // largest eigenvalue from the 2x2 characteristic polynomial
        let g2 = build_grid(2).unwrap();
        let uv = sample_scalar_kernel(&g2, |u, v| u * v).unwrap();
        let (a, b, d) = (0.03125_f64, 0.09375_f64, 0.28125_f64);
        let tr = a + d;
        let det = a * d - b * b;
        let lmax = 0.5 * (tr + (tr * tr - 4.0 * det).sqrt());
        assert_relative_eq!(operator_norm(&uv, &g2).value, lmax, max_relative = 1e-9);
        // rank one: the eigenvalue is the trace
        assert_relative_eq!(lmax, 0.3125, max_relative = 1e-12);
    }

    #[test]
    fn norm_matches_svd() {
        let g = build_grid(7).unwrap();
        let k = sample_kernel(&g, 2, 2, |u, v| {
            DMatrix::from_row_slice(2, 2, &[u + v, (u - v).sin(), u * v, 1.0 - u])
        })
        .unwrap();
        let m = k.weighted_symmetric_scaling(&g);
        let svd = m.svd(false, false);
        let smax = svd.singular_values.max();
        assert_relative_eq!(operator_norm(&k, &g).value, smax, max_relative = 1e-8);
    }
}

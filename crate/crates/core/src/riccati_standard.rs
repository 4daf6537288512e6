//! Per-label matrix Riccati equation `K̇ + Φ(K) − U(K)ᵀ O(K)⁻¹ U(K) = 0`, `K_T = H`.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ProblemData;
use crate::time::TimeGrid;

/// PSD tolerance applied to every computed `K_i(t)`.
pub const PSD_TOL: f64 = -1e-8;

/// `Aᵢᵀκ + κAᵢ + CᵢᵀκCᵢ + Qᵢ`.
pub fn phi(p: &ProblemData, i: usize, kappa: &DMatrix<f64>) -> DMatrix<f64> {
    let c = p.coeffs();
    let (a, cc) = (&c.a[i], &c.c[i]);
    a.transpose() * kappa + kappa * a + cc.transpose() * kappa * cc + &c.q[i]
}

/// `Bᵢᵀκ + DᵢᵀκCᵢ`.
pub fn u_gain(p: &ProblemData, i: usize, kappa: &DMatrix<f64>) -> DMatrix<f64> {
    let c = p.coeffs();
    c.b[i].transpose() * kappa + c.d[i].transpose() * kappa * &c.c[i]
}

/// `O = R + DᵀκD` together with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct OGain {
    mat: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl OGain {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    /// `O⁻¹ rhs`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// `Rᵢ + DᵢᵀκDᵢ`; fails unless positive definite. `time` only labels the error.
pub fn o_gain(p: &ProblemData, i: usize, kappa: &DMatrix<f64>, time: f64) -> Result<OGain> {
    let c = p.coeffs();
    let d = &c.d[i];
    let mut mat = &c.r[i] + d.transpose() * kappa * d;
    mat = (&mat + mat.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(mat.clone()).eigenvalues.min();
    let not_pd = || Error::NotPositiveDefinite { label: i, time, min_eig };
    if !(min_eig > 0.0) {
        return Err(not_pd());
    }
    let chol = Cholesky::new(mat.clone()).ok_or_else(not_pd)?;
    Ok(OGain { mat, chol })
}

/// Right-hand side `Φ − UᵀO⁻¹U` at label `i`, symmetrized.
pub fn riccati_rhs(p: &ProblemData, i: usize, kappa: &DMatrix<f64>, time: f64) -> Result<DMatrix<f64>> {
    let u = u_gain(p, i, kappa);
    let o = o_gain(p, i, kappa, time)?;
    let f = phi(p, i, kappa) - u.transpose() * o.solve(&u);
    Ok((&f + f.transpose()) * 0.5)
}

/// Solution of the standard Riccati system on a time grid.
///
/// Besides node values, the path carries the values at every step midpoint,
/// obtained from a solve on the doubled grid. The kernel Riccati integrator
/// reads its stage values from there.
#[derive(Debug, Clone)]
pub struct KPath {
    tg: TimeGrid,
    nodes: Vec<Vec<DMatrix<f64>>>,
    mids: Vec<Vec<DMatrix<f64>>>,
    residual: f64,
    min_eig: f64,
}

impl KPath {
    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    /// All labels at node `k`.
    pub fn at(&self, k: usize) -> &[DMatrix<f64>] {
        &self.nodes[k]
    }

    /// All labels at the midpoint of step `k`.
    pub fn mid(&self, k: usize) -> &[DMatrix<f64>] {
        &self.mids[k]
    }

    pub fn labels(&self) -> usize {
        self.nodes[0].len()
    }

    /// Max over interior nodes and labels of the central-difference residual.
    pub fn max_residual(&self) -> f64 {
        self.residual
    }

    /// Smallest eigenvalue seen over all labels and nodes.
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eig
    }

    /// `max_{i,k} ‖K_i(t_k)‖₂`.
    pub fn sup_norm(&self) -> f64 {
        self.nodes
            .iter()
            .flatten()
            .map(|m| SymmetricEigen::new(m.clone()).eigenvalues.amax())
            .fold(0.0, f64::max)
    }

    /// Value of a scalar solution at node `k`, label `i`.
    pub fn scalar(&self, k: usize, i: usize) -> f64 {
        self.nodes[k][i][(0, 0)]
    }
}

fn rk4_step(p: &ProblemData, i: usize, k: &DMatrix<f64>, h: f64, t: f64) -> Result<DMatrix<f64>> {
    // s = T − t runs forward, dK/ds = Φ − UᵀO⁻¹U
    let t_mid = t - 0.5 * h;
    let k1 = riccati_rhs(p, i, k, t)?;
    let k2 = riccati_rhs(p, i, &(k + &k1 * (0.5 * h)), t_mid)?;
    let k3 = riccati_rhs(p, i, &(k + &k2 * (0.5 * h)), t_mid)?;
    let k4 = riccati_rhs(p, i, &(k + &k3 * h), t - h)?;
    let next = k + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    Ok((&next + next.transpose()) * 0.5)
}

fn solve_label(p: &ProblemData, i: usize, fine: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    let n = fine.steps();
    let h = fine.dt();
    let mut out = vec![DMatrix::zeros(0, 0); n + 1];
    out[n] = p.coeffs().h[i].clone();
    for k in (0..n).rev() {
        let t = fine.node(k + 1);
        let next = rk4_step(p, i, &out[k + 1], h, t)?;
        let tk = fine.node(k);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { label: Some(i), time: tk });
        }
        let min_eig = SymmetricEigen::new(next.clone()).eigenvalues.min();
        if min_eig < PSD_TOL {
            return Err(Error::NotPositiveSemidefinite { label: i, time: tk, min_eig });
        }
        out[k] = next;
    }
    Ok(out)
}

/// Backward RK4 from `K(T) = H` on every label independently.
pub fn solve_standard_riccati(p: &ProblemData, tg: &TimeGrid) -> Result<KPath> {
    let fine = tg.refined(2);
    let per_label: Vec<Vec<DMatrix<f64>>> =
        (0..p.labels()).into_par_iter().map(|i| solve_label(p, i, &fine)).collect::<Result<_>>()?;

    let steps = tg.steps();
    let nodes: Vec<Vec<DMatrix<f64>>> =
        (0..=steps).map(|k| per_label.iter().map(|path| path[2 * k].clone()).collect()).collect();
    let mids: Vec<Vec<DMatrix<f64>>> =
        (0..steps).map(|k| per_label.iter().map(|path| path[2 * k + 1].clone()).collect()).collect();

    let mut min_eig = f64::INFINITY;
    for m in nodes.iter().flatten() {
        min_eig = min_eig.min(SymmetricEigen::new(m.clone()).eigenvalues.min());
    }

    let h = tg.dt();
    let mut residual: f64 = 0.0;
    for k in 1..steps {
        for i in 0..p.labels() {
            let deriv = (&nodes[k + 1][i] - &nodes[k - 1][i]) / (2.0 * h);
            let rhs = riccati_rhs(p, i, &nodes[k][i], tg.node(k))?;
            residual = residual.max((deriv + rhs).amax());
        }
    }

    Ok(KPath { tg: *tg, nodes, mids, residual, min_eig })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::model::{CoefficientField, CouplingKernels, Horizon, ScalarCoefficients};
    use approx::assert_relative_eq;

    fn scalar(n: usize, c: ScalarCoefficients, t_end: f64) -> ProblemData {
        let grid = build_grid(n).unwrap();
        let coeffs = CoefficientField::scalar(&grid, |_| c);
        ProblemData::new(grid, coeffs, CouplingKernels::zeros(n, 1), Horizon::new(0.0, t_end).unwrap(), 0.1).unwrap()
    }

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn phi_examples() {
        let p = scalar(1, ScalarCoefficients { q: 0.7, r: 1.0, ..Default::default() }, 1.0);
        assert_eq!(phi(&p, 0, &s(0.0))[(0, 0)], 0.7);
        let p = scalar(1, ScalarCoefficients { a: 1.0, r: 1.0, ..Default::default() }, 1.0);
        assert_eq!(phi(&p, 0, &s(3.0))[(0, 0)], 6.0);
        let p = scalar(1, ScalarCoefficients { c: 2.0, q: 1.0, r: 1.0, ..Default::default() }, 1.0);
        assert_eq!(phi(&p, 0, &s(1.0))[(0, 0)], 5.0);
    }

    #[test]
    fn gain_examples() {
        let p = scalar(1, ScalarCoefficients { b: 1.0, r: 1.5, d: 0.3, c: 0.2, ..Default::default() }, 1.0);
        assert_eq!(u_gain(&p, 0, &s(0.0))[(0, 0)], 0.0);
        assert_eq!(o_gain(&p, 0, &s(0.0), 0.0).unwrap().matrix()[(0, 0)], 1.5);
        let p = scalar(1, ScalarCoefficients { b: 1.0, r: 1.0, ..Default::default() }, 1.0);
        assert_eq!(u_gain(&p, 0, &s(2.0))[(0, 0)], 2.0);
        let p = scalar(1, ScalarCoefficients { d: 2.0, r: 1.0, ..Default::default() }, 1.0);
        let o = o_gain(&p, 0, &s(1.0), 0.0).unwrap();
        assert_eq!(o.matrix()[(0, 0)], 5.0);
        assert_relative_eq!(o.solve(&s(10.0))[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn o_gain_rejects_indefinite() {
        let p = scalar(1, ScalarCoefficients { d: 1.0, r: 1.0, ..Default::default() }, 1.0);
        let err = o_gain(&p, 0, &s(-2.0), 0.25).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { label: 0, .. }));
    }

    #[test]
    fn zero_costs_give_zero_solution() {
        let c = ScalarCoefficients { a: 0.4, b: 1.0, c: 0.3, d: 0.2, r: 2.0, ..Default::default() };
        let p = scalar(3, c, 1.0);
        let tg = TimeGrid::new(0.0, 1.0, 50).unwrap();
        let path = solve_standard_riccati(&p, &tg).unwrap();
        assert!((0..=50).all(|k| path.at(k).iter().all(|m| m[(0, 0)] == 0.0)));
    }

    #[test]
    fn analytic_scalar_case() {
        let c = ScalarCoefficients { b: 1.0, r: 1.0, h: 1.0, ..Default::default() };
        let p = scalar(1, c, 1.0);
        let tg = TimeGrid::new(0.0, 1.0, 1000).unwrap();
        let path = solve_standard_riccati(&p, &tg).unwrap();
        assert_eq!(path.scalar(1000, 0), 1.0);
        for k in (0..=1000).step_by(100) {
            let t = tg.node(k);
            assert_relative_eq!(path.scalar(k, 0), 1.0 / (2.0 - t), epsilon = 1e-12);
        }
        for k in 0..1000 {
            let t = tg.midpoint(k);
            assert_relative_eq!(path.mid(k)[0][(0, 0)], 1.0 / (2.0 - t), epsilon = 1e-12);
        }
        assert!(path.max_residual() < 1e-5);
    }

    #[test]
    fn label_permutation_permutes_solution() {
        let grid = build_grid(3).unwrap();
        let f = |u: f64| ScalarCoefficients { a: u, b: 1.0, q: 1.0 + u, r: 1.0, h: 2.0 * u, ..Default::default() };
        let coeffs = CoefficientField::scalar(&grid, f);
        let mut perm = coeffs.clone();
        for list in [&mut perm.a, &mut perm.q, &mut perm.h] {
            list.reverse();
        }
        let hz = Horizon::new(0.0, 1.0).unwrap();
        let p1 = ProblemData::new(grid.clone(), coeffs, CouplingKernels::zeros(3, 1), hz, 0.5).unwrap();
        let p2 = ProblemData::new(grid, perm, CouplingKernels::zeros(3, 1), hz, 0.5).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 40).unwrap();
        let k1 = solve_standard_riccati(&p1, &tg).unwrap();
        let k2 = solve_standard_riccati(&p2, &tg).unwrap();
        for k in 0..=40 {
            for i in 0..3 {
                assert_eq!(k1.scalar(k, i), k2.scalar(k, 2 - i));
            }
        }
    }

    #[test]
    fn matrix_case_stays_symmetric_psd() {
        let grid = build_grid(2).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -0.5, 0.2]);
        let coeffs = CoefficientField::uniform(
            2,
            a,
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.2, 0.1]),
            DMatrix::from_row_slice(2, 1, &[0.3, 0.1]),
            DMatrix::identity(2, 2),
            DMatrix::identity(1, 1),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            nalgebra::DVector::zeros(2),
            nalgebra::DVector::zeros(2),
        );
        let p = ProblemData::new(grid, coeffs, CouplingKernels::zeros(2, 2), Horizon::new(0.0, 2.0).unwrap(), 0.5)
            .unwrap();
        let tg = TimeGrid::new(0.0, 2.0, 200).unwrap();
        let path = solve_standard_riccati(&p, &tg).unwrap();
        assert!(path.min_eigenvalue() >= 0.0);
        for k in 0..=200 {
            for m in path.at(k) {
                assert_eq!(m[(0, 1)], m[(1, 0)]);
            }
        }
    }
}

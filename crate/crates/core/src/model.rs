//! Problem instances: per-label coefficients, coupling kernels and horizon,
//! plus the conversions of centered and symmetric costs into standard form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::grid::LabelGrid;
use crate::kernel::{check_flip_symmetry, compose, symmetrize, BlockDiag, Kernel};


/// Per-label model data sampled on the label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub state_dim: usize,
    pub control_dim: usize,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub d: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    pub beta: Vec<DVector<f64>>,
    pub gamma: Vec<DVector<f64>>,
}

impl CoefficientField {
    /// Label-independent coefficients repeated `n` times.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        n: usize,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        h: DMatrix<f64>,
        beta: DVector<f64>,
        gamma: DVector<f64>,
    ) -> Self {
        Self {
            state_dim: a.nrows(),
            control_dim: b.ncols(),
            a: vec![a; n],
            b: vec![b; n],
            c: vec![c; n],
            d: vec![d; n],
            q: vec![q; n],
            r: vec![r; n],
            h: vec![h; n],
            beta: vec![beta; n],
            gamma: vec![gamma; n],
        }
    }

    /// Scalar (`d = m = 1`) coefficients given per label by closures.
    pub fn scalar(grid: &LabelGrid, f: impl Fn(f64) -> ScalarCoefficients) -> Self {
        let s = |x: f64| DMatrix::from_element(1, 1, x);
        let v = |x: f64| DVector::from_element(1, x);
        let vals: Vec<ScalarCoefficients> = grid.points().iter().map(|&u| f(u)).collect();
        Self {
            state_dim: 1,
            control_dim: 1,
            a: vals.iter().map(|c| s(c.a)).collect(),
            b: vals.iter().map(|c| s(c.b)).collect(),
            c: vals.iter().map(|c| s(c.c)).collect(),
            d: vals.iter().map(|c| s(c.d)).collect(),
            q: vals.iter().map(|c| s(c.q)).collect(),
            r: vals.iter().map(|c| s(c.r)).collect(),
            h: vals.iter().map(|c| s(c.h)).collect(),
            beta: vals.iter().map(|c| v(c.beta)).collect(),
            gamma: vals.iter().map(|c| v(c.gamma)).collect(),
        }
    }

    pub fn labels(&self) -> usize {
        self.a.len()
    }

    pub fn beta_gamma_vanish(&self) -> bool {
        self.beta.iter().chain(self.gamma.iter()).all(|v| v.iter().all(|&x| x == 0.0))
    }

    fn check(&self, n: usize) -> Result<()> {
        let (d, m) = (self.state_dim, self.control_dim);
        if d == 0 || m == 0 {
            return Err(Error::Dimension("state and control dimensions must be positive".into()));
        }
        let mats: [(&str, &Vec<DMatrix<f64>>, (usize, usize)); 7] = [
            ("A", &self.a, (d, d)),
            ("B", &self.b, (d, m)),
            ("C", &self.c, (d, d)),
            ("D", &self.d, (d, m)),
            ("Q", &self.q, (d, d)),
            ("R", &self.r, (m, m)),
            ("H", &self.h, (d, d)),
        ];
        for (name, list, shape) in mats {
            if list.len() != n {
                return Err(Error::Dimension(format!("{name} has {} labels, grid has {n}", list.len())));
            }
            if let Some(i) = list.iter().position(|x| x.shape() != shape) {
                return Err(Error::Dimension(format!(
                    "{name} at label {i} is {:?}, expected {shape:?}",
                    list[i].shape()
                )));
            }
            if let Some(i) = list.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("{name} at label {i}")));
            }
        }
        for (name, list) in [("beta", &self.beta), ("gamma", &self.gamma)] {
            if list.len() != n {
                return Err(Error::Dimension(format!("{name} has {} labels, grid has {n}", list.len())));
            }
            if let Some(i) = list.iter().position(|x| x.len() != d) {
                return Err(Error::Dimension(format!("{name} at label {i} has length {}, expected {d}", list[i].len())));
            }
            if let Some(i) = list.iter().position(|x| x.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("{name} at label {i}")));
            }
        }
        Ok(())
    }
}

/// Scalar coefficient values at one label.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScalarCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub q: f64,
    pub r: f64,
    pub h: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    pub t0: f64,
    pub t_end: f64,
}

impl Horizon {
    pub fn new(t0: f64, t_end: f64) -> Result<Self> {
        if !(t0 >= 0.0 && t_end > t0 && t_end.is_finite()) {
            return Err(Error::Domain(format!("horizon needs 0 <= t0 < T, got [{t0}, {t_end}]")));
        }
        Ok(Self { t0, t_end })
    }

    pub fn length(&self) -> f64 {
        self.t_end - self.t0
    }
}

/// The four coupling kernels of the standard form.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingKernels {
    pub g_a: Kernel,
    pub g_c: Kernel,
    pub g_q: Kernel,
    pub g_h: Kernel,
}

impl CouplingKernels {
    pub fn zeros(n: usize, d: usize) -> Self {
        let z = Kernel::zeros(n, d, d);
        Self { g_a: z.clone(), g_c: z.clone(), g_q: z.clone(), g_h: z }
    }
}

/// Complete problem instance in standard form. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemData {
    grid: LabelGrid,
    coeffs: CoefficientField,
    kernels: CouplingKernels,
    horizon: Horizon,
    coercivity: f64,
}

impl ProblemData {
    pub fn new(
        grid: LabelGrid,
        coeffs: CoefficientField,
        kernels: CouplingKernels,
        horizon: Horizon,
        coercivity: f64,
    ) -> Result<Self> {
        let n = grid.len();
        coeffs.check(n)?;
        let d = coeffs.state_dim;
        for (name, k) in [("G_A", &kernels.g_a), ("G_C", &kernels.g_c), ("G_Q", &kernels.g_q), ("G_H", &kernels.g_h)] {
            if k.labels() != n || k.block_rows() != d || k.block_cols() != d {
                return Err(Error::Dimension(format!(
                    "{name} is a {}-label kernel with {}x{} blocks, expected {n} labels with {d}x{d} blocks",
                    k.labels(),
                    k.block_rows(),
                    k.block_cols()
                )));
            }
            if !k.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        Horizon::new(horizon.t0, horizon.t_end)?;
        if !(coercivity > 0.0 && coercivity.is_finite()) {
            return Err(Error::Domain(format!("coercivity constant must be positive, got {coercivity}")));
        }
        Ok(Self { grid, coeffs, kernels, horizon, coercivity })
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.grid
    }

    pub fn coeffs(&self) -> &CoefficientField {
        &self.coeffs
    }

    pub fn kernels(&self) -> &CouplingKernels {
        &self.kernels
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    pub fn coercivity(&self) -> f64 {
        self.coercivity
    }

    pub fn labels(&self) -> usize {
        self.grid.len()
    }

    pub fn state_dim(&self) -> usize {
        self.coeffs.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.coeffs.control_dim
    }

    pub fn g_q_sym(&self) -> Kernel {
        symmetrize(&self.kernels.g_q)
    }

    pub fn g_h_sym(&self) -> Kernel {
        symmetrize(&self.kernels.g_h)
    }

}

pub const VALIDATION_TOL: f64 = -1e-8;

/// Outcome of [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub q_min_eig: Vec<f64>,
    pub h_min_eig: Vec<f64>,
    pub r_min_eig: Vec<f64>,
    /// Minimum eigenvalue of `δ_ij Q_i + √w_i G_Q^S(i,j) √w_j`.
    pub s_q_min_eig: f64,
    pub s_h_min_eig: f64,
    pub q_ok: bool,
    pub h_ok: bool,
    pub r_ok: bool,
    pub s_q_ok: bool,
    pub s_h_ok: bool,
    /// Human-readable failures naming the offending label.
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Weighted matrix `δ_ij L_i + √w_i G^S(i,j) √w_j` of the discrete positivity check.
pub fn positivity_matrix(local: &[DMatrix<f64>], g: &Kernel, grid: &LabelGrid) -> DMatrix<f64> {
    let mut s = symmetrize(g).weighted_symmetric_scaling(grid);
    let d = g.block_rows();
    for (i, l) in local.iter().enumerate() {
        let mut blk = s.view_mut((i * d, i * d), (d, d));
        blk += l;
    }
    s
}

/// Checks PSD/PD requirements on the cost weights and the discrete
/// positivity of the mean-field cost terms.
pub fn validate(p: &ProblemData) -> ValidationReport {
    let co = &p.coeffs;
    let mut failures = Vec::new();
    let mut check_list = |name: &str, list: &[DMatrix<f64>], floor: f64| -> (Vec<f64>, bool) {
        let mut ok = true;
        let eigs: Vec<f64> = list.iter().map(min_sym_eig).collect();
        for (i, (m, &e)) in list.iter().zip(&eigs).enumerate() {
            if asymmetry(m) > 1e-12 * (1.0 + m.amax()) {
                failures.push(format!("{name} at label {i} is not symmetric"));
                ok = false;
            }
            if e < floor {
                failures.push(format!("{name} at label {i} has min eigenvalue {e:e} below {floor:e}"));
                ok = false;
            }
        }
        (eigs, ok)
    };
    let (q_min_eig, q_ok) = check_list("Q", &co.q, VALIDATION_TOL);
    let (h_min_eig, h_ok) = check_list("H", &co.h, VALIDATION_TOL);
    let (r_min_eig, r_ok) = check_list("R", &co.r, p.coercivity + VALIDATION_TOL);

    let s_q_min_eig = min_sym_eig(&positivity_matrix(&co.q, &p.kernels.g_q, &p.grid));
    let s_h_min_eig = min_sym_eig(&positivity_matrix(&co.h, &p.kernels.g_h, &p.grid));
    let s_q_ok = s_q_min_eig >= VALIDATION_TOL;
    let s_h_ok = s_h_min_eig >= VALIDATION_TOL;
    if !s_q_ok {
        failures.push(format!("running cost is not nonnegative: min eigenvalue of S_Q is {s_q_min_eig:e}"));
    }
    if !s_h_ok {
        failures.push(format!("terminal cost is not nonnegative: min eigenvalue of S_H is {s_h_min_eig:e}"));
    }
    ValidationReport {
        q_min_eig,
        h_min_eig,
        r_min_eig,
        s_q_min_eig,
        s_h_min_eig,
        q_ok,
        h_ok,
        r_ok,
        s_q_ok,
        s_h_ok,
        failures,
    }
}

const SYMMETRY_INPUT_TOL: f64 = 1e-12;

/// Standard-form kernel of a centered penalty
/// `⟨L^u (x^u − ∫G̃(u,v)x̄^v dv), x^u − ∫G̃(u,v)x̄^v dv⟩`:
/// `∫G̃(w,u)ᵀ L^w G̃(w,v) dw − (L^u G̃(u,v) + G̃(u,v) L^v)`.
///
/// `G̃` must be flip-transpose symmetric.
pub fn centered_cost_kernel(tilde: &Kernel, local: &[DMatrix<f64>], grid: &LabelGrid, name: &str) -> Result<Kernel> {
    let scale = 1.0 + tilde.max_abs();
    let dev = check_flip_symmetry(tilde);
    if dev > SYMMETRY_INPUT_TOL * scale {
        return Err(Error::Asymmetric { name: name.to_string(), deviation: dev });
    }
    let l = BlockDiag::new(local.to_vec());
    let quad = compose(&crate::kernel::flip_transpose(tilde), &l.left_mul(tilde), grid)?;
    let cross = l.left_mul(tilde).add(&l.right_mul(tilde))?;
    quad.sub(&cross)
}

/// Standard-form kernel of `⟨∫G̃(u,v)x̄^v dv, L̄^u ∫G̃(u,v)x̄^v dv⟩`:
/// `∫G̃(w,u)ᵀ L̄^w G̃(w,v) dw`.
pub fn symmetric_cost_kernel(tilde: &Kernel, local: &[DMatrix<f64>], grid: &LabelGrid) -> Result<Kernel> {
    if local.len() != tilde.labels() || local.iter().any(|m| m.shape() != (tilde.block_rows(), tilde.block_rows())) {
        return Err(Error::Dimension("weight matrices do not match the kernel blocks".into()));
    }
    let l = BlockDiag::new(local.to_vec());
    compose(&crate::kernel::flip_transpose(tilde), &l.left_mul(tilde), grid)
}

/// Dynamics coupling kernels, shared by all cost formulations.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsKernels {
    pub g_a: Kernel,
    pub g_c: Kernel,
}

/// Centered penalty kernels `G̃_Q`, `G̃_H` (flip-transpose symmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredCosts {
    pub tilde_g_q: Kernel,
    pub tilde_g_h: Kernel,
}

/// Symmetric-form kernels and their weights `Q̄`, `H̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricCosts {
    pub tilde_g_q: Kernel,
    pub bar_q: Vec<DMatrix<f64>>,
    pub tilde_g_h: Kernel,
    pub bar_h: Vec<DMatrix<f64>>,
}

/// Standard-form problem whose cost equals the centered cost for every
/// trajectory ensemble.
pub fn from_centered(
    grid: LabelGrid,
    coeffs: CoefficientField,
    dynamics: DynamicsKernels,
    costs: &CenteredCosts,
    horizon: Horizon,
    coercivity: f64,
) -> Result<ProblemData> {
    coeffs.check(grid.len())?;
    let g_q = centered_cost_kernel(&costs.tilde_g_q, &coeffs.q, &grid, "G~_Q")?;
    let g_h = centered_cost_kernel(&costs.tilde_g_h, &coeffs.h, &grid, "G~_H")?;
    let kernels = CouplingKernels { g_a: dynamics.g_a, g_c: dynamics.g_c, g_q, g_h };
    ProblemData::new(grid, coeffs, kernels, horizon, coercivity)
}

/// Standard-form problem for the symmetric formulation.
pub fn from_symmetric(
    grid: LabelGrid,
    coeffs: CoefficientField,
    dynamics: DynamicsKernels,
    costs: &SymmetricCosts,
    horizon: Horizon,
    coercivity: f64,
) -> Result<ProblemData> {
    coeffs.check(grid.len())?;
    let g_q = symmetric_cost_kernel(&costs.tilde_g_q, &costs.bar_q, &grid)?;
    let g_h = symmetric_cost_kernel(&costs.tilde_g_h, &costs.bar_h, &grid)?;
    let kernels = CouplingKernels { g_a: dynamics.g_a, g_c: dynamics.g_c, g_q, g_h };
    ProblemData::new(grid, coeffs, kernels, horizon, coercivity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, sample_scalar_kernel};
    use approx::assert_relative_eq;

    fn scalar_problem(n: usize, q: f64, r: f64, g_q: Kernel) -> ProblemData {
        let grid = build_grid(n).unwrap();
        let coeffs = CoefficientField::scalar(&grid, |_| ScalarCoefficients { q, r, h: 1.0, b: 1.0, ..Default::default() });
        let mut k = CouplingKernels::zeros(n, 1);
        k.g_q = g_q;
        ProblemData::new(grid, coeffs, k, Horizon::new(0.0, 1.0).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn validate_zero_kernels_passes() {
        let p = scalar_problem(4, 1.0, 1.0, Kernel::zeros(4, 1, 1));
        let rep = validate(&p);
        assert!(rep.passed(), "{:?}", rep.failures);
    }

    #[test]
    fn validate_rank_one_perturbation() {
        for n in [1, 3, 8] {
            let grid = build_grid(n).unwrap();
            let p = scalar_problem(n, 1.0, 1.0, sample_scalar_kernel(&grid, |_, _| -1.0).unwrap());
            let rep = validate(&p);
            // eigenvalues {0, 1}: identity minus the projection onto sqrt(w)
            assert!(rep.s_q_min_eig.abs() < 1e-12);
            assert!(rep.passed());
            let s = positivity_matrix(&p.coeffs().q, &p.kernels().g_q, p.grid());
            let eig = SymmetricEigen::new(s).eigenvalues;
            assert_relative_eq!(eig.max(), if n == 1 { 0.0 } else { 1.0 }, epsilon = 1e-12);
        }
    }

    #[test]
    fn validate_flags_singular_r() {
        let grid = build_grid(3).unwrap();
        let coeffs = CoefficientField::scalar(&grid, |u| ScalarCoefficients {
            q: 1.0,
            r: if u > 0.5 { 0.0 } else { 1.0 },
            h: 1.0,
            b: 1.0,
            ..Default::default()
        });
        let p = ProblemData::new(grid, coeffs, CouplingKernels::zeros(3, 1), Horizon::new(0.0, 1.0).unwrap(), 0.1)
            .unwrap();
        let rep = validate(&p);
        assert!(!rep.r_ok);
        assert!(rep.failures.iter().any(|f| f.contains("R at label 2")), "{:?}", rep.failures);
    }

    #[test]
    fn validate_flags_negative_cost_kernel() {
        let grid = build_grid(4).unwrap();
        let p = scalar_problem(4, 1.0, 1.0, sample_scalar_kernel(&grid, |_, _| -1.5).unwrap());
        assert!(!validate(&p).s_q_ok);
    }

    #[test]
    fn centered_examples() {
        let grid = build_grid(5).unwrap();
        let q = vec![DMatrix::from_element(1, 1, 2.0); 5];
        let zero = centered_cost_kernel(&Kernel::zeros(5, 1, 1), &q, &grid, "t").unwrap();
        assert!(zero.matrix().iter().all(|&x| x == 0.0));
        let one = sample_scalar_kernel(&grid, |_, _| 1.0).unwrap();
        let g = centered_cost_kernel(&one, &q, &grid, "t").unwrap();
        assert!(g.matrix().iter().all(|&x| (x + 2.0).abs() < 1e-14));
        let asym = sample_scalar_kernel(&grid, |u, v| u + 2.0 * v).unwrap();
        assert!(matches!(centered_cost_kernel(&asym, &q, &grid, "t"), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn centered_matches_scalar_display() {
        // scalar case: ∫ η^w G̃(w,v) G̃(w,u) dw − (η^u + η^v) G̃(u,v)
        let grid = build_grid(6).unwrap();
        let eta: Vec<f64> = grid.points().iter().map(|u| 1.0 + u * u).collect();
        let gt = |u: f64, v: f64| 0.5 + 0.5 * (u * v).cos();
        let tilde = sample_scalar_kernel(&grid, gt).unwrap();
        let q: Vec<_> = eta.iter().map(|&e| DMatrix::from_element(1, 1, e)).collect();
        let g = centered_cost_kernel(&tilde, &q, &grid, "t").unwrap();
        let pts = grid.points();
        for i in 0..6 {
            for j in 0..6 {
                let quad: f64 = (0..6).map(|k| grid.weights()[k] * eta[k] * gt(pts[k], pts[j]) * gt(pts[k], pts[i])).sum();
                let expect = quad - (eta[i] + eta[j]) * gt(pts[i], pts[j]);
                assert_relative_eq!(g.scalar(i, j), expect, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn symmetric_examples() {
        let grid = build_grid(4).unwrap();
        let ones = vec![DMatrix::from_element(1, 1, 1.0); 4];
        let z = symmetric_cost_kernel(&Kernel::zeros(4, 1, 1), &ones, &grid).unwrap();
        assert!(z.matrix().iter().all(|&x| x == 0.0));
        let q = vec![DMatrix::from_element(1, 1, 3.0); 4];
        let one = sample_scalar_kernel(&grid, |_, _| 1.0).unwrap();
        let g = symmetric_cost_kernel(&one, &q, &grid).unwrap();
        assert!(g.matrix().iter().all(|&x| (x - 3.0).abs() < 1e-14));

        let g2 = build_grid(2).unwrap();
        let uv = sample_scalar_kernel(&g2, |u, v| u * v).unwrap();
        let ones2 = vec![DMatrix::from_element(1, 1, 1.0); 2];
        let g = symmetric_cost_kernel(&uv, &ones2, &g2).unwrap();
        let m2: f64 = g2.points().iter().zip(g2.weights()).map(|(u, w)| w * u * u).sum();
        for i in 0..2 {
            for j in 0..2 {
                let expect = g2.points()[i] * g2.points()[j] * m2;
                assert_relative_eq!(g.scalar(i, j), expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn centered_output_is_nonnegative() {
        let grid = build_grid(5).unwrap();
        let coeffs = CoefficientField::uniform(
            5,
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 1),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::identity(1, 1),
            DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 0.5]),
            DVector::zeros(2),
            DVector::zeros(2),
        );
        let raw = crate::grid::sample_kernel(&grid, 2, 2, |u, v| {
            DMatrix::from_row_slice(2, 2, &[1.0 + u * v, u + v, 0.3 * (u - v), 2.0 * (u * v).sin()])
        })
        .unwrap();
        let tilde = symmetrize(&raw);
        let p = from_centered(
            grid,
            coeffs,
            DynamicsKernels { g_a: Kernel::zeros(5, 2, 2), g_c: Kernel::zeros(5, 2, 2) },
            &CenteredCosts { tilde_g_q: tilde.clone(), tilde_g_h: tilde.scale(3.0) },
            Horizon::new(0.0, 1.0).unwrap(),
            1.0,
        )
        .unwrap();
        let rep = validate(&p);
        assert!(rep.s_q_ok && rep.s_h_ok, "{:?}", rep.failures);
    }
}

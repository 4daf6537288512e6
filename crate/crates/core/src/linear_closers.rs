//! The linear equations closing the system: `Ẏ + F̃(t, Y) = 0` on label
//! fields and the per-label scalar `Λ`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{BlockDiag, Kernel, LabelField};
use crate::model::ProblemData;
use crate::riccati_abstract::{BarKPath, Frozen};
use crate::riccati_standard::KPath;
use crate::time::{hermite_mid, simpson, TimeGrid};

/// `Γ_i = DᵢᵀKᵢγᵢ + Bᵢᵀyᵢ`.
pub fn gamma_term(p: &ProblemData, i: usize, k_i: &DMatrix<f64>, y_i: &DVector<f64>) -> DVector<f64> {
    let c = p.coeffs();
    c.d[i].transpose() * (k_i * &c.gamma[i]) + c.b[i].transpose() * y_i
}

/// The full `Γ` field.
pub fn gamma_field(p: &ProblemData, k_slice: &[DMatrix<f64>], y: &LabelField) -> LabelField {
    let vals: Vec<DVector<f64>> =
        (0..p.labels()).map(|i| gamma_term(p, i, &k_slice[i], &y.get(i).into_owned())).collect();
    LabelField::from_labels(&vals)
}

/// Which version of the linear closing equations to integrate.
///
/// `Consistent` is the pair obtained by completing the square against the
/// value function `E⟨x,Kx⟩ + ⟨x̄,K̄x̄⟩ + 2⟨Y,x̄⟩ + Λ`: unit coefficients on the
/// `Kβ`, `CᵀKγ`, `∫G_CᵀKγ` and `∫K̄β` drivers of `F̃`, the coupling term
/// `∫V(v,u)ᵀ(O^v)⁻¹Γ^v dv`, and `2⟨Y,β⟩` in the `Λ` integrand. Only this form
/// makes `J(α̂) = V` when `β ≠ 0` or `γ ≠ 0`.
///
/// `DoubledDrivers` puts factor 2 on those drivers, `Γ^u` inside the coupling
/// integral and `⟨Y,β⟩` in `Λ`. It agrees with `Consistent` whenever
/// `β = γ = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClosureForm {
    #[default]
    Consistent,
    DoubledDrivers,
}

impl ClosureForm {
    fn driver_factor(self) -> f64 {
        match self {
            ClosureForm::Consistent => 1.0,
            ClosureForm::DoubledDrivers => 2.0,
        }
    }

    fn y_beta_factor(self) -> f64 {
        match self {
            ClosureForm::Consistent => 2.0,
            ClosureForm::DoubledDrivers => 1.0,
        }
    }
}

/// `F̃(t, ·)` at one time, stored as the affine map `y ↦ M y + c`.
struct YFrozen {
    constant: DVector<f64>,
    linear: DMatrix<f64>,
}

impl YFrozen {
    fn new(p: &ProblemData, k_slice: &[DMatrix<f64>], kbar: &Kernel, time: f64, form: ClosureForm) -> Result<Self> {
        let co = p.coeffs();
        let ks = p.kernels();
        let grid = p.grid();
        let (n, d, m) = (p.labels(), p.state_dim(), p.control_dim());
        let frozen = Frozen::new(p, k_slice, time)?;
        let kd = BlockDiag::new(k_slice.to_vec());
        let beta = LabelField::from_labels(&co.beta);
        let gamma = LabelField::from_labels(&co.gamma);
        let k_gamma = kd.apply(&gamma);
        let ct = BlockDiag::new(co.c.clone()).transpose();
        let dt = BlockDiag::new(co.d.clone()).transpose();
        let bt = BlockDiag::new(co.b.clone()).transpose();

        let v = bt.left_mul(kbar).into_matrix() + dt.left_mul(&kd.left_mul(&ks.g_c)).into_matrix();
        let oinv_v = frozen.solve_rows(&v);

        // the Γ-dependent terms of F̃ as one linear map applied to Γ
        let on_gamma = match form {
            ClosureForm::Consistent => {
                // Uᵀ O⁻¹ + Vᵀ W O⁻¹
                let mut wv = v.clone();
                for (a, mut row) in wv.row_iter_mut().enumerate() {
                    row *= grid.weights()[a / m];
                }
                frozen.solve_rows(&(frozen.u().to_dense() + wv)).transpose()
            }
            ClosureForm::DoubledDrivers => {
                // Uᵀ O⁻¹ + diag_u( Σ_v w_v V(v,u)ᵀ O_v⁻¹ )
                let mut col_sums = Vec::with_capacity(n);
                for u in 0..n {
                    let mut e = DMatrix::zeros(m, d);
                    for vv in 0..n {
                        e += oinv_v.view((vv * m, u * d), (m, d)) * grid.weights()[vv];
                    }
                    col_sums.push(e.transpose());
                }
                frozen.solve_rows(&frozen.u().to_dense()).transpose() + BlockDiag::new(col_sums).to_dense()
            }
        };

        let f = form.driver_factor();
        let mut constant = kd.apply(&beta).vector() * f;
        constant += ct.apply(&k_gamma).vector() * f;
        constant += ks.g_c.matrix().transpose() * k_gamma.weighted(grid).vector() * f;
        constant += kbar.matrix() * beta.weighted(grid).vector() * f;
        constant -= &on_gamma * dt.apply(&k_gamma).vector();

        let at = BlockDiag::new(co.a.clone()).transpose().to_dense();
        let gat_w = Kernel::from_matrix(n, d, d, ks.g_a.matrix().transpose()).weighted_cols(grid);
        let linear = at + gat_w - &on_gamma * bt.to_dense();
        Ok(Self { constant, linear })
    }

    fn eval(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.linear * y + &self.constant
    }
}

/// Solution of the `Y` equation with rates `F̃(t_k, Y_k)` at nodes.
#[derive(Debug, Clone)]
pub struct YPath {
    tg: TimeGrid,
    nodes: Vec<LabelField>,
    rates: Vec<LabelField>,
    residual: f64,
}

impl YPath {
    fn zero(tg: &TimeGrid, n: usize, d: usize) -> Self {
        let z = LabelField::zeros(n, d);
        Self { tg: *tg, nodes: vec![z.clone(); tg.len()], rates: vec![z; tg.len()], residual: 0.0 }
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn at(&self, k: usize) -> &LabelField {
        &self.nodes[k]
    }

    pub fn rate(&self, k: usize) -> &LabelField {
        &self.rates[k]
    }

    /// Cubic Hermite value at the midpoint of step `k`.
    pub fn mid(&self, k: usize) -> LabelField {
        let l = self.nodes[k].vector();
        let r = self.nodes[k + 1].vector();
        let m = hermite_mid(l, r, &-self.rates[k].vector(), &-self.rates[k + 1].vector(), self.tg.dt());
        LabelField::from_vector(self.nodes[k].dim(), m)
    }

    pub fn max_residual(&self) -> f64 {
        self.residual
    }

    pub fn is_identically_zero(&self) -> bool {
        self.nodes.iter().all(|f| f.as_slice().iter().all(|&x| x == 0.0))
    }
}

fn check_grids(k: &KPath, kbar: &BarKPath, tg: &TimeGrid) -> Result<()> {
    if k.time_grid() != tg || kbar.time_grid() != tg {
        return Err(Error::Domain("inputs were solved on a different time grid".into()));
    }
    Ok(())
}

/// Backward RK4 for `Ẏ + F̃(t, Y) = 0`, `Y_T = 0`, in the consistent form.
/// Short-circuits to zero when `β = γ = 0`.
pub fn solve_y(k: &KPath, kbar: &BarKPath, p: &ProblemData, tg: &TimeGrid) -> Result<YPath> {
    solve_y_with(k, kbar, p, tg, ClosureForm::Consistent)
}

pub fn solve_y_with(k: &KPath, kbar: &BarKPath, p: &ProblemData, tg: &TimeGrid, form: ClosureForm) -> Result<YPath> {
    check_grids(k, kbar, tg)?;
    let (n, d) = (p.labels(), p.state_dim());
    if p.coeffs().beta_gamma_vanish() {
        return Ok(YPath::zero(tg, n, d));
    }
    let steps = tg.steps();
    let h = tg.dt();
    let mut nodes = vec![DVector::zeros(n * d); steps + 1];
    let mut rates = vec![DVector::zeros(n * d); steps + 1];
    let mut right = YFrozen::new(p, k.at(steps), kbar.at(steps), tg.t_end(), form)?;
    for s in (0..steps).rev() {
        let mid = YFrozen::new(p, k.mid(s), &kbar.mid(s), tg.midpoint(s), form)?;
        let left = YFrozen::new(p, k.at(s), kbar.at(s), tg.node(s), form)?;
        let y = &nodes[s + 1];
        let k1 = right.eval(y);
        let k2 = mid.eval(&(y + &k1 * (0.5 * h)));
        let k3 = mid.eval(&(y + &k2 * (0.5 * h)));
        let k4 = left.eval(&(y + &k3 * h));
        let next = y + (&k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { label: None, time: tg.node(s) });
        }
        rates[s + 1] = k1;
        nodes[s] = next;
        right = left;
    }
    rates[0] = right.eval(&nodes[0]);

    let mut residual: f64 = 0.0;
    for s in 1..steps {
        let deriv = (&nodes[s + 1] - &nodes[s - 1]) / (2.0 * h);
        residual = residual.max((deriv + &rates[s]).amax());
    }
    let wrap = |v: Vec<DVector<f64>>| v.into_iter().map(|x| LabelField::from_vector(d, x)).collect();
    Ok(YPath { tg: *tg, nodes: wrap(nodes), rates: wrap(rates), residual })
}

/// Per-label `Λ_i(t_k)`.
#[derive(Debug, Clone)]
pub struct LambdaPath {
    tg: TimeGrid,
    nodes: Vec<DVector<f64>>,
}

impl LambdaPath {
    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn at(&self, k: usize) -> &DVector<f64> {
        &self.nodes[k]
    }
}

/// `⟨Kγ,γ⟩ + ⟨Y,β⟩ − ⟨Γ,O⁻¹Γ⟩` per label.
fn lambda_integrand(
    p: &ProblemData,
    k_slice: &[DMatrix<f64>],
    y: &LabelField,
    time: f64,
    form: ClosureForm,
) -> Result<DVector<f64>> {
    let co = p.coeffs();
    let mut out = DVector::zeros(p.labels());
    for i in 0..p.labels() {
        let yi = y.get(i).into_owned();
        let g = gamma_term(p, i, &k_slice[i], &yi);
        let o = crate::riccati_standard::o_gain(p, i, &k_slice[i], time)?;
        let og = o.solve(&DMatrix::from_column_slice(g.len(), 1, g.as_slice()));
        out[i] = (&k_slice[i] * &co.gamma[i]).dot(&co.gamma[i]) + form.y_beta_factor() * yi.dot(&co.beta[i]) - g.dot(&og.column(0));
    }
    Ok(out)
}

/// `Λ(t_k) = ∫_{t_k}^T (…) ds` by composite Simpson with exact midpoint `K`
/// and Hermite midpoint `Y`. Zero when `β = γ = 0`.
pub fn solve_lambda(k: &KPath, y: &YPath, p: &ProblemData, tg: &TimeGrid) -> Result<LambdaPath> {
    solve_lambda_with(k, y, p, tg, ClosureForm::Consistent)
}

pub fn solve_lambda_with(k: &KPath, y: &YPath, p: &ProblemData, tg: &TimeGrid, form: ClosureForm) -> Result<LambdaPath> {
    if k.time_grid() != tg || y.time_grid() != tg {
        return Err(Error::Domain("inputs were solved on a different time grid".into()));
    }
    let n = p.labels();
    let steps = tg.steps();
    let mut nodes = vec![DVector::zeros(n); steps + 1];
    if p.coeffs().beta_gamma_vanish() {
        return Ok(LambdaPath { tg: *tg, nodes });
    }
    let h = tg.dt();
    let mut right = lambda_integrand(p, k.at(steps), y.at(steps), tg.t_end(), form)?;
    for s in (0..steps).rev() {
        let mid = lambda_integrand(p, k.mid(s), &y.mid(s), tg.midpoint(s), form)?;
        let left = lambda_integrand(p, k.at(s), y.at(s), tg.node(s), form)?;
        let mut next = nodes[s + 1].clone();
        for i in 0..n {
            next[i] += simpson(h, left[i], mid[i], right[i]);
        }
        nodes[s] = next;
        right = left;
    }
    Ok(LambdaPath { tg: *tg, nodes })
}

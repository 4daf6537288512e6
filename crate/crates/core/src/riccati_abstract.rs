//! Kernel-valued Riccati equation `d/dt K̄ + F(t, K̄) = 0`, `K̄_T = G_H^S`.
//!
//! In the dense block layout (see [`crate::kernel`]) with `W` the diagonal
//! matrix of quadrature weights, the right-hand side reads
//!
//! ```text
//! Ψ(κ̄) = Ψ₀ + X + Xᵀ,     X = Aᵀκ̄ + G_Aᵀ W κ̄,
//! Ψ₀   = K G_A + (K G_A)ᵀ + CᵀK G_C + (CᵀK G_C)ᵀ + G_Cᵀ W K G_C + G_Q^S,
//! V(κ̄) = Bᵀκ̄ + DᵀK G_C,
//! F(κ̄) = Ψ(κ̄) − UᵀO⁻¹V − (UᵀO⁻¹V)ᵀ − Vᵀ W O⁻¹ V,
//! ```
//!
//! where `A, B, C, D, K, U, O` act as block-diagonal matrices.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::{operator_norm, OperatorNorm};
use crate::kernel::{check_flip_symmetry, symmetrize, BlockDiag, Kernel};
use crate::model::ProblemData;
use crate::riccati_standard::{o_gain, u_gain, KPath, OGain};
use crate::time::{hermite_mid, TimeGrid};

pub const DEFAULT_NORM_CEILING: f64 = 1e6;

/// Everything in `F` that depends on `K_t` alone.
#[derive(Debug, Clone)]
pub struct Frozen {
    psi0: DMatrix<f64>,
    u: BlockDiag,
    o: Vec<OGain>,
    dkgc: DMatrix<f64>,
}

impl Frozen {
    pub fn new(p: &ProblemData, k_slice: &[DMatrix<f64>], time: f64) -> Result<Self> {
        check_slice(p, k_slice)?;
        let co = p.coeffs();
        let ks = p.kernels();
        let kd = BlockDiag::new(k_slice.to_vec());
        let k_ga = kd.left_mul(&ks.g_a).into_matrix();
        let kgc = kd.left_mul(&ks.g_c);
        let ct_k_gc = BlockDiag::new(co.c.clone()).transpose().left_mul(&kgc).into_matrix();
        let gct_w_kgc = ks.g_c.matrix().transpose() * kgc.weighted_rows(p.grid());
        let mut psi0 = &k_ga + k_ga.transpose();
        psi0 += &ct_k_gc + ct_k_gc.transpose();
        psi0 += gct_w_kgc;
        psi0 += p.g_q_sym().matrix();

        let dkgc = BlockDiag::new(co.d.clone()).transpose().left_mul(&kgc).into_matrix();
        let u = BlockDiag::new((0..p.labels()).map(|i| u_gain(p, i, &k_slice[i])).collect());
        let o = (0..p.labels()).map(|i| o_gain(p, i, &k_slice[i], time)).collect::<Result<_>>()?;
        Ok(Self { psi0, u, o, dkgc })
    }

    /// Per-label `O_i⁻¹` applied to the block rows of an `(n m) x c` matrix.
    pub fn solve_rows(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.o[0].matrix().nrows();
        let mut out = v.clone();
        for (i, o) in self.o.iter().enumerate() {
            let rows = v.rows(i * m, m).into_owned();
            out.rows_mut(i * m, m).copy_from(&o.solve(&rows));
        }
        out
    }

    pub fn u(&self) -> &BlockDiag {
        &self.u
    }

    pub fn o(&self) -> &[OGain] {
        &self.o
    }
}

fn check_slice(p: &ProblemData, k_slice: &[DMatrix<f64>]) -> Result<()> {
    let d = p.state_dim();
    if k_slice.len() != p.labels() || k_slice.iter().any(|m| m.shape() != (d, d)) {
        return Err(Error::Dimension(format!("K slice must hold {} blocks of size {d}x{d}", p.labels())));
    }
    Ok(())
}

fn check_kernel(p: &ProblemData, kbar: &Kernel) -> Result<()> {
    let d = p.state_dim();
    if kbar.labels() != p.labels() || kbar.block_rows() != d || kbar.block_cols() != d {
        return Err(Error::Dimension(format!("κ̄ must have {} labels and {d}x{d} blocks", p.labels())));
    }
    Ok(())
}

fn x_term(p: &ProblemData, kbar: &Kernel) -> DMatrix<f64> {
    let at = BlockDiag::new(p.coeffs().a.clone()).transpose();
    at.left_mul(kbar).into_matrix() + p.kernels().g_a.matrix().transpose() * kbar.weighted_rows(p.grid())
}

fn v_matrix(p: &ProblemData, frozen: &Frozen, kbar: &Kernel) -> DMatrix<f64> {
    let bt = BlockDiag::new(p.coeffs().b.clone()).transpose();
    bt.left_mul(kbar).into_matrix() + &frozen.dkgc
}

/// `Ψ(K_t, κ̄)` in full, including its `κ̄(j,i)ᵀ A_j` and `∫κ̄(k,i)ᵀ G_A(k,j)` terms.
pub fn psi(k_slice: &[DMatrix<f64>], kbar: &Kernel, p: &ProblemData) -> Result<Kernel> {
    check_kernel(p, kbar)?;
    let frozen = Frozen::new(p, k_slice, f64::NAN)?;
    let x = x_term(p, kbar);
    let d = p.state_dim();
    Ok(Kernel::from_matrix(p.labels(), d, d, &frozen.psi0 + &x + x.transpose()))
}

/// `V(K_t, κ̄)(i,j) = Bᵢᵀκ̄(i,j) + DᵢᵀKᵢG_C(i,j)`.
pub fn v_gain(k_slice: &[DMatrix<f64>], kbar: &Kernel, p: &ProblemData) -> Result<Kernel> {
    check_kernel(p, kbar)?;
    let frozen = Frozen::new(p, k_slice, f64::NAN)?;
    Ok(Kernel::from_matrix(p.labels(), p.control_dim(), p.state_dim(), v_matrix(p, &frozen, kbar)))
}

/// `F(t, κ̄)` with the `K_t`-dependent parts precomputed.
pub fn f_rhs_frozen(p: &ProblemData, frozen: &Frozen, kbar: &Kernel) -> DMatrix<f64> {
    let v = v_matrix(p, frozen, kbar);
    let oinv_v = frozen.solve_rows(&v);
    let cross = x_term(p, kbar) - frozen.u.transpose().left_mul(&Kernel::from_matrix(
        p.labels(),
        p.control_dim(),
        p.state_dim(),
        oinv_v.clone(),
    )).into_matrix();
    let w_oinv_v = Kernel::from_matrix(p.labels(), p.control_dim(), p.state_dim(), oinv_v).weighted_rows(p.grid());
    &frozen.psi0 + &cross + cross.transpose() - v.transpose() * w_oinv_v
}

/// `F(t, κ̄)` for a given slice `K_t`.
pub fn f_rhs(k_slice: &[DMatrix<f64>], kbar: &Kernel, p: &ProblemData) -> Result<Kernel> {
    check_kernel(p, kbar)?;
    let frozen = Frozen::new(p, k_slice, f64::NAN)?;
    let d = p.state_dim();
    Ok(Kernel::from_matrix(p.labels(), d, d, f_rhs_frozen(p, &frozen, kbar)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbstractOptions {
    pub norm_ceiling: f64,
}

impl Default for AbstractOptions {
    fn default() -> Self {
        Self { norm_ceiling: DEFAULT_NORM_CEILING }
    }
}

/// Node values of `K̄` with the rates `F(t_k, K̄_k)` and per-node diagnostics.
#[derive(Debug, Clone)]
pub struct BarKPath {
    tg: TimeGrid,
    nodes: Vec<Kernel>,
    rates: Vec<Kernel>,
    norms: Vec<OperatorNorm>,
    drift: Vec<f64>,
    residual: f64,
}

impl BarKPath {
    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn at(&self, k: usize) -> &Kernel {
        &self.nodes[k]
    }

    /// `F(t_k, K̄(t_k))`, i.e. minus the time derivative.
    pub fn rate(&self, k: usize) -> &Kernel {
        &self.rates[k]
    }

    /// Cubic Hermite value at the midpoint of step `k`.
    pub fn mid(&self, k: usize) -> Kernel {
        let h = self.tg.dt();
        let (l, r) = (&self.nodes[k], &self.nodes[k + 1]);
        let m = hermite_mid(
            l.matrix(),
            r.matrix(),
            &-self.rates[k].matrix(),
            &-self.rates[k + 1].matrix(),
            h,
        );
        Kernel::from_matrix(l.labels(), l.block_rows(), l.block_cols(), m)
    }

    /// Operator norm of `K̄(t_k)` at each node.
    pub fn norms(&self) -> &[OperatorNorm] {
        &self.norms
    }

    /// Flip-symmetry deviation of each step's update before projection.
    pub fn pre_projection_deviation(&self) -> &[f64] {
        &self.drift
    }

    pub fn diagnostics(&self) -> AbstractDiagnostics {
        AbstractDiagnostics {
            max_flip_deviation: self.nodes.iter().map(check_flip_symmetry).fold(0.0, f64::max),
            max_pre_projection_deviation: self.drift.iter().copied().fold(0.0, f64::max),
            max_operator_norm: self.norms.iter().map(|n| n.value).fold(0.0, f64::max),
            max_residual: self.residual,
            norm_iterations_converged: self.norms.iter().all(|n| n.converged),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbstractDiagnostics {
    pub max_flip_deviation: f64,
    pub max_pre_projection_deviation: f64,
    pub max_operator_norm: f64,
    pub max_residual: f64,
    pub norm_iterations_converged: bool,
}

fn rk4_step(p: &ProblemData, fr: [&Frozen; 3], y: &DMatrix<f64>, k1: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let (n, d) = (p.labels(), p.state_dim());
    let f = |fz: &Frozen, m: DMatrix<f64>| f_rhs_frozen(p, fz, &Kernel::from_matrix(n, d, d, m));
    let k2 = f(fr[0], y + k1 * (0.5 * h));
    let k3 = f(fr[1], y + &k2 * (0.5 * h));
    let k4 = f(fr[2], y + &k3 * h);
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Backward RK4 from `K̄(T) = G_H^S` with a flip-transpose projection after
/// every step. `k` must be solved on the same grid.
pub fn solve_abstract_riccati(k: &KPath, p: &ProblemData, tg: &TimeGrid, opts: AbstractOptions) -> Result<BarKPath> {
    if k.time_grid() != tg || k.labels() != p.labels() {
        return Err(Error::Domain("K path was solved on a different grid".into()));
    }
    let (n, d) = (p.labels(), p.state_dim());
    let steps = tg.steps();
    let h = tg.dt();
    let mut nodes = vec![Kernel::zeros(n, d, d); steps + 1];
    let mut rates = vec![Kernel::zeros(n, d, d); steps + 1];
    let mut norms = vec![OperatorNorm { value: 0.0, iterations: 0, converged: true }; steps + 1];
    let mut drift = vec![0.0; steps];

    let check_norm = |kb: &Kernel, t: f64| -> Result<OperatorNorm> {
        if !kb.is_finite() {
            return Err(Error::BlowUp { label: None, time: t });
        }
        let norm = operator_norm(kb, p.grid());
        if norm.value > opts.norm_ceiling {
            return Err(Error::NormCeiling { time: t, norm: norm.value, ceiling: opts.norm_ceiling });
        }
        Ok(norm)
    };

    nodes[steps] = p.g_h_sym();
    norms[steps] = check_norm(&nodes[steps], tg.t_end())?;
    let mut fz_right = Frozen::new(p, k.at(steps), tg.t_end())?;
    for s in (0..steps).rev() {
        let fz_mid = Frozen::new(p, k.mid(s), tg.midpoint(s))?;
        let fz_left = Frozen::new(p, k.at(s), tg.node(s))?;
        let y = nodes[s + 1].matrix();
        let k1 = f_rhs_frozen(p, &fz_right, &nodes[s + 1]);
        rates[s + 1] = Kernel::from_matrix(n, d, d, k1.clone());
        let raw = Kernel::from_matrix(n, d, d, rk4_step(p, [&fz_mid, &fz_mid, &fz_left], y, &k1, h));
        let t = tg.node(s);
        if !raw.is_finite() {
            return Err(Error::BlowUp { label: None, time: t });
        }
        drift[s] = check_flip_symmetry(&raw);
        nodes[s] = symmetrize(&raw);
        norms[s] = check_norm(&nodes[s], t)?;
        fz_right = fz_left;
    }
    rates[0] = Kernel::from_matrix(n, d, d, f_rhs_frozen(p, &fz_right, &nodes[0]));

    let mut residual: f64 = 0.0;
    for s in 1..steps {
        let deriv = (nodes[s + 1].matrix() - nodes[s - 1].matrix()) / (2.0 * h);
        residual = residual.max((deriv + rates[s].matrix()).amax());
    }

    Ok(BarKPath { tg: *tg, nodes, rates, norms, drift, residual })
}

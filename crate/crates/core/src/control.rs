//! Affine feedback policies, the optimal law, the closed-loop mean flow and
//! exact moment-based cost evaluation.
//!
//! Policies act as `α_i = L_i x + Σ_j w_j M(i,j) x̄_j + c_i` and are stored
//! at every node and every step midpoint, indexed by half-steps: entry `2k`
//! is node `k` and `2k + 1` the midpoint of step `k`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernel::{BlockDiag, Kernel, LabelField};
use crate::linear_closers::{gamma_field, LambdaPath, YPath};
use crate::model::ProblemData;
use crate::riccati_abstract::{BarKPath, Frozen};
use crate::riccati_standard::KPath;
use crate::time::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
enum InitKind {
    Deterministic,
    Gaussian { factor: Vec<DMatrix<f64>> },
    UniformBox { half_width: Vec<DVector<f64>> },
}

/// Initial law of the state, one independent component per label.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    mean: Vec<DVector<f64>>,
    cov: Vec<DMatrix<f64>>,
    kind: InitKind,
}

impl InitialCondition {
    pub fn deterministic(values: Vec<DVector<f64>>) -> Result<Self> {
        let cov = values.iter().map(|v| DMatrix::zeros(v.len(), v.len())).collect();
        let ic = Self { mean: values, cov, kind: InitKind::Deterministic };
        ic.check()?;
        Ok(ic)
    }

    /// Gaussian with per-label mean and covariance. The covariance must be
    /// symmetric PSD (to `1e-10`).
    pub fn gaussian(mean: Vec<DVector<f64>>, cov: Vec<DMatrix<f64>>) -> Result<Self> {
        let mut factor = Vec::with_capacity(cov.len());
        for (i, c) in cov.iter().enumerate() {
            if (c - c.transpose()).amax() > 1e-12 * (1.0 + c.amax()) {
                return Err(Error::Domain(format!("initial covariance at label {i} is not symmetric")));
            }
            let eig = SymmetricEigen::new(c.clone());
            if eig.eigenvalues.min() < -1e-10 {
                return Err(Error::Domain(format!("initial covariance at label {i} is not PSD")));
            }
            let sqrt = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
            factor.push(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt));
        }
        let ic = Self { mean, cov, kind: InitKind::Gaussian { factor } };
        ic.check()?;
        Ok(ic)
    }

    /// Independent uniform coordinates on `center ± half_width`.
    pub fn uniform_box(center: Vec<DVector<f64>>, half_width: Vec<DVector<f64>>) -> Result<Self> {
        if half_width.iter().flatten().any(|&h| !(h >= 0.0)) {
            return Err(Error::Domain("box half-widths must be nonnegative".into()));
        }
        let cov = half_width.iter().map(|h| DMatrix::from_diagonal(&h.map(|x| x * x / 3.0))).collect();
        let ic = Self { mean: center, cov, kind: InitKind::UniformBox { half_width } };
        ic.check()?;
        Ok(ic)
    }

    fn check(&self) -> Result<()> {
        let d = self.mean.first().map_or(0, |v| v.len());
        if d == 0 || self.mean.iter().any(|v| v.len() != d) || self.cov.iter().any(|c| c.shape() != (d, d)) {
            return Err(Error::Dimension("initial condition blocks have inconsistent sizes".into()));
        }
        if self.mean.len() != self.cov.len() {
            return Err(Error::Dimension("initial mean and covariance label counts differ".into()));
        }
        if let InitKind::UniformBox { half_width } = &self.kind {
            if half_width.len() != self.mean.len() || half_width.iter().any(|h| h.len() != d) {
                return Err(Error::Dimension("box half-widths do not match the centers".into()));
            }
        }
        if self.mean.iter().flatten().chain(self.cov.iter().flatten()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("initial condition".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> usize {
        self.mean.len()
    }

    pub fn dim(&self) -> usize {
        self.mean[0].len()
    }

    pub fn mean(&self, i: usize) -> &DVector<f64> {
        &self.mean[i]
    }

    pub fn covariance(&self, i: usize) -> &DMatrix<f64> {
        &self.cov[i]
    }

    /// `E[ξ_i ξ_iᵀ]`.
    pub fn second_moment(&self, i: usize) -> DMatrix<f64> {
        &self.cov[i] + &self.mean[i] * self.mean[i].transpose()
    }

    pub fn mean_field(&self) -> LabelField {
        LabelField::from_labels(&self.mean)
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self.kind, InitKind::Deterministic)
    }

    /// Half-widths of a uniform box law.
    pub fn half_width(&self) -> Option<&[DVector<f64>]> {
        match &self.kind {
            InitKind::UniformBox { half_width } => Some(half_width),
            _ => None,
        }
    }

    /// Draws one sample for label `i` from a stream of standard normals and
    /// uniforms on `[0, 1)`.
    pub(crate) fn sample(&self, i: usize, normal: &mut impl FnMut() -> f64, uniform: &mut impl FnMut() -> f64) -> DVector<f64> {
        match &self.kind {
            InitKind::Deterministic => self.mean[i].clone(),
            InitKind::Gaussian { factor } => {
                let z = DVector::from_fn(self.dim(), |_, _| normal());
                &self.mean[i] + &factor[i] * z
            }
            InitKind::UniformBox { half_width } => {
                DVector::from_fn(self.dim(), |k, _| self.mean[i][k] + half_width[i][k] * (2.0 * uniform() - 1.0))
            }
        }
    }
}

/// An affine policy sampled on the half-step grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    tg: TimeGrid,
    n: usize,
    state_dim: usize,
    control_dim: usize,
    state_gain: Vec<Vec<DMatrix<f64>>>,
    mean_gain: Vec<DMatrix<f64>>,
    offset: Vec<DVector<f64>>,
}

impl AffinePolicy {
    pub fn zero(p: &ProblemData, tg: &TimeGrid) -> Self {
        let (n, d, m) = (p.labels(), p.state_dim(), p.control_dim());
        let len = 2 * tg.steps() + 1;
        Self {
            tg: *tg,
            n,
            state_dim: d,
            control_dim: m,
            state_gain: vec![vec![DMatrix::zeros(m, d); n]; len],
            mean_gain: vec![DMatrix::zeros(n * m, n * d); len],
            offset: vec![DVector::zeros(n * m); len],
        }
    }

    /// Constant-in-time policy from one set of gains.
    pub fn constant(tg: &TimeGrid, state_gain: Vec<DMatrix<f64>>, mean_gain: &Kernel, offset: &LabelField) -> Result<Self> {
        let n = state_gain.len();
        let (m, d) = state_gain.first().map(|g| g.shape()).unwrap_or((0, 0));
        if n == 0
            || state_gain.iter().any(|g| g.shape() != (m, d))
            || mean_gain.labels() != n
            || mean_gain.block_rows() != m
            || mean_gain.block_cols() != d
            || offset.labels() != n
            || offset.dim() != m
        {
            return Err(Error::Dimension("policy gains have inconsistent shapes".into()));
        }
        let len = 2 * tg.steps() + 1;
        Ok(Self {
            tg: *tg,
            n,
            state_dim: d,
            control_dim: m,
            state_gain: vec![state_gain; len],
            mean_gain: vec![mean_gain.matrix().clone(); len],
            offset: vec![offset.vector().clone(); len],
        })
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn labels(&self) -> usize {
        self.n
    }

    /// `L_i` at half-step `j`.
    pub fn state_gain(&self, j: usize, i: usize) -> &DMatrix<f64> {
        &self.state_gain[j][i]
    }

    /// The mean-field gain kernel at half-step `j`.
    pub fn mean_gain(&self, j: usize) -> Kernel {
        Kernel::from_matrix(self.n, self.control_dim, self.state_dim, self.mean_gain[j].clone())
    }

    pub fn offset(&self, j: usize) -> LabelField {
        LabelField::from_vector(self.control_dim, self.offset[j].clone())
    }

    /// The state-independent part `Σ_j w_j M(i,j) x̄_j + c_i` for every label.
    pub fn mean_part(&self, j: usize, weighted_means: &DVector<f64>) -> DVector<f64> {
        &self.mean_gain[j] * weighted_means + &self.offset[j]
    }

    /// `α_i` for state `x` given the precomputed [`mean_part`](Self::mean_part).
    pub fn eval(&self, j: usize, i: usize, x: &DVector<f64>, mean_part: &DVector<f64>) -> DVector<f64> {
        let m = self.control_dim;
        &self.state_gain[j][i] * x + mean_part.rows(i * m, m)
    }

    /// Adds `shift` to every offset component.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.offset {
            c.add_scalar_mut(shift);
        }
        out
    }

    /// Adds a per-label offset `δ_i` at every time.
    pub fn with_offset(&self, delta: &LabelField) -> Self {
        let mut out = self.clone();
        for c in &mut out.offset {
            *c += delta.vector();
        }
        out
    }

    /// Adds `δ_i` to every state gain.
    pub fn with_state_gain(&self, delta: &[DMatrix<f64>]) -> Self {
        let mut out = self.clone();
        for slice in &mut out.state_gain {
            for (g, dl) in slice.iter_mut().zip(delta) {
                *g += dl;
            }
        }
        out
    }

    /// Multiplies the mean-field gain kernel by `factor`.
    pub fn with_mean_gain_scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for g in &mut out.mean_gain {
            *g *= factor;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.state_gain.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
            && self.mean_gain.iter().all(|g| g.iter().all(|x| x.is_finite()))
            && self.offset.iter().all(|c| c.iter().all(|x| x.is_finite()))
    }
}

/// The optimal law `α̂ = −O⁻¹(U x + ∫V x̄ + Γ)` together with `O` along the grid,
/// which the penalty of the fundamental relation needs.
#[derive(Debug, Clone)]
pub struct FeedbackLaw {
    policy: AffinePolicy,
    o: Vec<Vec<DMatrix<f64>>>,
}

impl FeedbackLaw {
    pub fn policy(&self) -> &AffinePolicy {
        &self.policy
    }

    /// `O_i` at half-step `j`.
    pub fn o(&self, j: usize, i: usize) -> &DMatrix<f64> {
        &self.o[j][i]
    }
}

fn gains_at(
    p: &ProblemData,
    k_slice: &[DMatrix<f64>],
    kbar: &Kernel,
    y: &LabelField,
    time: f64,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>, DVector<f64>, Vec<DMatrix<f64>>)> {
    let frozen = Frozen::new(p, k_slice, time)?;
    let v = crate::riccati_abstract::v_gain(k_slice, kbar, p)?;
    let gamma = gamma_field(p, k_slice, y);
    let state: Vec<DMatrix<f64>> =
        (0..p.labels()).map(|i| -frozen.o()[i].solve(frozen.u().get(i))).collect();
    let mean = -frozen.solve_rows(v.matrix());
    let g = DMatrix::from_column_slice(gamma.vector().len(), 1, gamma.as_slice());
    let offset = -frozen.solve_rows(&g).column(0).into_owned();
    let o = frozen.o().iter().map(|o| o.matrix().clone()).collect();
    Ok((state, mean, offset, o))
}

/// Optimal feedback from the solved backward system.
pub fn build_feedback(k: &KPath, kbar: &BarKPath, y: &YPath, p: &ProblemData, tg: &TimeGrid) -> Result<FeedbackLaw> {
    if k.time_grid() != tg || kbar.time_grid() != tg || y.time_grid() != tg {
        return Err(Error::Domain("inputs were solved on a different time grid".into()));
    }
    let mut policy = AffinePolicy::zero(p, tg);
    let mut o = Vec::with_capacity(2 * tg.steps() + 1);
    for j in 0..=2 * tg.steps() {
        let (s, t) = (j / 2, tg.t0() + 0.5 * j as f64 * tg.dt());
        let (l, m, c, oo) = if j % 2 == 0 {
            gains_at(p, k.at(s), kbar.at(s), y.at(s), tg.node(s))?
        } else {
            gains_at(p, k.mid(s), &kbar.mid(s), &y.mid(s), t)?
        };
        policy.state_gain[j] = l;
        policy.mean_gain[j] = m;
        policy.offset[j] = c;
        o.push(oo);
    }
    Ok(FeedbackLaw { policy, o })
}

/// The closed-loop mean dynamics `ẋ̄ = M_j x̄ + b_j` at half-step `j`.
fn mean_system(p: &ProblemData, policy: &AffinePolicy, j: usize) -> (DMatrix<f64>, DVector<f64>) {
    let co = p.coeffs();
    let grid = p.grid();
    let b = BlockDiag::new(co.b.clone()).to_dense();
    let a = BlockDiag::new(co.a.clone()).to_dense();
    let l = BlockDiag::new(policy.state_gain[j].clone()).to_dense();
    let coupling = Kernel::from_matrix(p.labels(), p.state_dim(), p.state_dim(), p.kernels().g_a.matrix() + &b * &policy.mean_gain[j]);
    let mat = a + &b * l + coupling.weighted_cols(grid);
    let beta = LabelField::from_labels(&co.beta);
    (mat, beta.vector() + &b * &policy.offset[j])
}

/// Label means `x̄_i(t_k)` and the mean controls `E[α_i](t_k)` at nodes.
#[derive(Debug, Clone)]
pub struct MeanFlow {
    tg: TimeGrid,
    means: Vec<LabelField>,
    controls: Vec<LabelField>,
}

impl MeanFlow {
    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn at(&self, k: usize) -> &LabelField {
        &self.means[k]
    }

    pub fn control(&self, k: usize) -> &LabelField {
        &self.controls[k]
    }
}

fn mean_control(p: &ProblemData, policy: &AffinePolicy, j: usize, xbar: &LabelField) -> LabelField {
    let mp = policy.mean_part(j, xbar.weighted(p.grid()).vector());
    let vals: Vec<DVector<f64>> =
        (0..p.labels()).map(|i| policy.eval(j, i, &xbar.get(i).into_owned(), &mp)).collect();
    LabelField::from_labels(&vals)
}

/// Forward RK4 for the expected closed-loop state under an affine policy.
pub fn solve_mean_flow(p: &ProblemData, policy: &AffinePolicy, init: &InitialCondition, tg: &TimeGrid) -> Result<MeanFlow> {
    if policy.time_grid() != tg || policy.labels() != p.labels() {
        return Err(Error::Domain("policy was built on a different grid".into()));
    }
    if init.labels() != p.labels() || init.dim() != p.state_dim() {
        return Err(Error::Dimension("initial condition does not match the problem".into()));
    }
    let d = p.state_dim();
    let h = tg.dt();
    let mut means = Vec::with_capacity(tg.len());
    let mut x = init.mean_field().vector().clone();
    means.push(LabelField::from_vector(d, x.clone()));
    let mut left = mean_system(p, policy, 0);
    for s in 0..tg.steps() {
        let mid = mean_system(p, policy, 2 * s + 1);
        let right = mean_system(p, policy, 2 * s + 2);
        let f = |sys: &(DMatrix<f64>, DVector<f64>), y: &DVector<f64>| &sys.0 * y + &sys.1;
        let k1 = f(&left, &x);
        let k2 = f(&mid, &(&x + &k1 * (0.5 * h)));
        let k3 = f(&mid, &(&x + &k2 * (0.5 * h)));
        let k4 = f(&right, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { label: None, time: tg.node(s + 1) });
        }
        means.push(LabelField::from_vector(d, x.clone()));
        left = right;
    }
    let controls = means.iter().enumerate().map(|(k, xb)| mean_control(p, policy, 2 * k, xb)).collect();
    Ok(MeanFlow { tg: *tg, means, controls })
}

/// `V(t0, ξ)` from the solved backward system and exact initial moments.
pub fn value_function(
    init: &InitialCondition,
    k: &KPath,
    kbar: &BarKPath,
    y: &YPath,
    lambda: &LambdaPath,
    p: &ProblemData,
) -> f64 {
    let w = p.grid().weights();
    let xbar = init.mean_field();
    let wx = xbar.weighted(p.grid());
    let mut v = wx.vector().dot(&(kbar.at(0).matrix() * wx.vector()));
    for i in 0..p.labels() {
        let ki = &k.at(0)[i];
        let mi = init.mean(i);
        let second = mi.dot(&(ki * mi)) + (ki * init.covariance(i)).trace();
        v += w[i] * (second + 2.0 * y.at(0).get(i).dot(mi) + lambda.at(0)[i]);
    }
    v
}

/// Cost decomposition from the exact moment equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentCost {
    pub running_state: f64,
    pub running_mean: f64,
    pub running_control: f64,
    pub terminal: f64,
    /// Penalty integral of the fundamental relation, when an optimal law was given.
    pub penalty: f64,
}

impl MomentCost {
    pub fn total(&self) -> f64 {
        self.running_state + self.running_mean + self.running_control + self.terminal
    }
}

/// State of the joint moment system: means, second moments, accumulated costs.
#[derive(Clone)]
struct Moments {
    mean: DVector<f64>,
    second: Vec<DMatrix<f64>>,
    acc: [f64; 4],
}

impl Moments {
    fn axpy(&self, h: f64, k: &Moments) -> Moments {
        Moments {
            mean: &self.mean + &k.mean * h,
            second: self.second.iter().zip(&k.second).map(|(s, ks)| s + ks * h).collect(),
            acc: std::array::from_fn(|q| self.acc[q] + h * k.acc[q]),
        }
    }
}

fn moment_rhs(p: &ProblemData, policy: &AffinePolicy, opt: Option<&FeedbackLaw>, j: usize, z: &Moments) -> Moments {
    let co = p.coeffs();
    let ks = p.kernels();
    let grid = p.grid();
    let (n, d) = (p.labels(), p.state_dim());
    let w = grid.weights();
    let xbar = LabelField::from_vector(d, z.mean.clone());
    let wx = xbar.weighted(grid);
    let mp = policy.mean_part(j, wx.vector());
    let ga_x = ks.g_a.matrix() * wx.vector();
    let gc_x = ks.g_c.matrix() * wx.vector();
    let opt_mp = opt.map(|o| o.policy.mean_part(j, wx.vector()));

    let mut dmean = DVector::zeros(n * d);
    let mut dsecond = Vec::with_capacity(n);
    let mut acc = [0.0; 4];
    let m = p.control_dim();
    for i in 0..n {
        let x = z.mean.rows(i * d, d).into_owned();
        let s = &z.second[i];
        let l = policy.state_gain(j, i);
        let mi = mp.rows(i * m, m).into_owned();
        let ac = &co.a[i] + &co.b[i] * l;
        let cc = &co.c[i] + &co.d[i] * l;
        let b = &co.beta[i] + &co.b[i] * &mi + ga_x.rows(i * d, d);
        let sv = &co.gamma[i] + &co.d[i] * &mi + gc_x.rows(i * d, d);
        dmean.rows_mut(i * d, d).copy_from(&(&ac * &x + &b));
        let bx = &b * x.transpose();
        let cx = &cc * &x * sv.transpose();
        let mut ds = &ac * s + s * ac.transpose() + &bx + bx.transpose();
        ds += &cc * s * cc.transpose() + &cx + cx.transpose() + &sv * sv.transpose();
        dsecond.push(ds);

        acc[0] += w[i] * (&co.q[i] * s).trace();
        let r = &co.r[i];
        let rl = r * l;
        acc[2] += w[i] * ((l.transpose() * &rl * s).trace() + 2.0 * mi.dot(&(&rl * &x)) + mi.dot(&(r * &mi)));

        if let (Some(o), Some(omp)) = (opt, opt_mp.as_ref()) {
            let dl = l - o.policy.state_gain(j, i);
            let dm = &mi - omp.rows(i * m, m);
            let oi = o.o(j, i);
            let odl = oi * &dl;
            acc[3] += w[i] * ((dl.transpose() * &odl * s).trace() + 2.0 * dm.dot(&(&odl * &x)) + dm.dot(&(oi * &dm)));
        }
    }
    acc[1] = wx.vector().dot(&(ks.g_q.matrix() * wx.vector()));
    Moments { mean: dmean, second: dsecond, acc }
}

/// `J(α)` for an affine policy from forward RK4 on the first and second
/// moments. With `optimal`, also integrates the penalty
/// `∫∫ E⟨O(α − α̂), α − α̂⟩` where `α̂` is the optimal feedback evaluated along
/// the controlled state.
pub fn evaluate_cost_moments(
    p: &ProblemData,
    policy: &AffinePolicy,
    init: &InitialCondition,
    tg: &TimeGrid,
    optimal: Option<&FeedbackLaw>,
) -> Result<MomentCost> {
    if policy.time_grid() != tg {
        return Err(Error::Domain("policy was built on a different grid".into()));
    }
    if let Some(o) = optimal {
        if o.policy.time_grid() != tg {
            return Err(Error::Domain("optimal law was built on a different grid".into()));
        }
    }
    let h = tg.dt();
    let mut z = Moments {
        mean: init.mean_field().vector().clone(),
        second: (0..p.labels()).map(|i| init.second_moment(i)).collect(),
        acc: [0.0; 4],
    };
    for s in 0..tg.steps() {
        let k1 = moment_rhs(p, policy, optimal, 2 * s, &z);
        let k2 = moment_rhs(p, policy, optimal, 2 * s + 1, &z.axpy(0.5 * h, &k1));
        let k3 = moment_rhs(p, policy, optimal, 2 * s + 1, &z.axpy(0.5 * h, &k2));
        let k4 = moment_rhs(p, policy, optimal, 2 * s + 2, &z.axpy(h, &k3));
        let sum = Moments {
            mean: &k1.mean + &k2.mean * 2.0 + &k3.mean * 2.0 + &k4.mean,
            second: (0..p.labels()).map(|i| &k1.second[i] + &k2.second[i] * 2.0 + &k3.second[i] * 2.0 + &k4.second[i]).collect(),
            acc: std::array::from_fn(|q| k1.acc[q] + 2.0 * k2.acc[q] + 2.0 * k3.acc[q] + k4.acc[q]),
        };
        z = z.axpy(h / 6.0, &sum);
        if z.mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::BlowUp { label: None, time: tg.node(s + 1) });
        }
    }
    let co = p.coeffs();
    let grid = p.grid();
    let w = grid.weights();
    let wx = LabelField::from_vector(p.state_dim(), z.mean.clone()).weighted(grid);
    let mut terminal = wx.vector().dot(&(p.kernels().g_h.matrix() * wx.vector()));
    for i in 0..p.labels() {
        terminal += w[i] * (&co.h[i] * &z.second[i]).trace();
    }
    Ok(MomentCost {
        running_state: z.acc[0],
        running_mean: z.acc[1],
        running_control: z.acc[2],
        terminal,
        penalty: z.acc[3],
    })
}

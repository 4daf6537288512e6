//! Interbank lending with heterogeneous banks: a continuum of log-reserves
//! `dX^u = [k(X^u − ∫G̃_k(u,v)X̄^v dv) + α^u] ds + σ^u dW^u` with centered
//! penalties `η^u(X^u − ∫G̃_η X̄)²`, `(α^u)²` and terminal `r^u(X^u_T − ∫G̃_r X̄_T)²`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::InitialCondition;
use crate::error::{Error, Result};
use crate::grid::{sample_scalar_kernel, LabelGrid};
use crate::kernel::{check_flip_symmetry, Kernel};
use crate::model::{from_centered, CenteredCosts, CoefficientField, DynamicsKernels, Horizon, ProblemData, ScalarCoefficients};
use crate::riccati_abstract::BarKPath;
use crate::riccati_standard::KPath;
use crate::time::{simpson, TimeGrid};

/// `base · (1 + slope · u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub base: f64,
    #[serde(default)]
    pub slope: f64,
}

impl Profile {
    pub fn constant(base: f64) -> Self {
        Self { base, slope: 0.0 }
    }

    pub fn at(&self, u: f64) -> f64 {
        self.base * (1.0 + self.slope * u)
    }
}

/// Symmetric interaction graphons on `[0,1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Graphon {
    Constant { value: f64 },
    /// `exp(−((u − v)/width)²)`.
    Gaussian { width: f64 },
    /// `1 − max(u, v)`.
    UniformAttachment,
}

impl Graphon {
    pub fn at(&self, u: f64, v: f64) -> f64 {
        match *self {
            Graphon::Constant { value } => value,
            Graphon::Gaussian { width } => (-((u - v) / width).powi(2)).exp(),
            Graphon::UniformAttachment => 1.0 - u.max(v),
        }
    }

    fn is_unit(&self) -> bool {
        matches!(self, Graphon::Constant { value } if *value == 1.0)
    }
}

/// Model parameters, label profiles and graphons, before sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemicRiskConfig {
    pub k: f64,
    pub t_end: f64,
    pub sigma: Profile,
    pub eta: Profile,
    pub r: Profile,
    pub g_k: Graphon,
    pub g_eta: Graphon,
    pub g_r: Graphon,
    /// Initial law: Gaussian with mean `init_mean(u)` and this variance.
    pub init_mean: Profile,
    pub init_variance: f64,
}

impl SystemicRiskConfig {
    /// Smoothly heterogeneous banks on Gaussian graphons.
    pub fn heterogeneous() -> Self {
        let g = Graphon::Gaussian { width: 0.5 };
        Self {
            k: -1.0,
            t_end: 1.0,
            sigma: Profile { base: 0.4, slope: 0.5 },
            eta: Profile { base: 1.0, slope: 1.0 },
            r: Profile { base: 0.5, slope: 1.0 },
            g_k: g,
            g_eta: g,
            g_r: g,
            init_mean: Profile { base: 1.0, slope: 1.0 },
            init_variance: 0.1,
        }
    }

    /// Label-independent parameters with unit graphons.
    pub fn homogeneous(k: f64, sigma: f64, eta: f64, r: f64, t_end: f64) -> Self {
        let one = Graphon::Constant { value: 1.0 };
        Self {
            k,
            t_end,
            sigma: Profile::constant(sigma),
            eta: Profile::constant(eta),
            r: Profile::constant(r),
            g_k: one,
            g_eta: one,
            g_r: one,
            init_mean: Profile::constant(1.0),
            init_variance: 0.1,
        }
    }

    /// Reads a configuration written as TOML with the field names above.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            location: e.span().map_or("document".into(), |s| format!("byte {}", s.start)),
            message: e.message().to_string(),
        })
    }

    pub fn is_homogeneous(&self) -> bool {
        [self.sigma, self.eta, self.r].iter().all(|p| p.slope == 0.0)
            && self.g_k.is_unit()
            && self.g_eta.is_unit()
            && self.g_r.is_unit()
    }

    pub fn sample(&self, grid: &LabelGrid) -> Result<SystemicRiskParams> {
        let pts = grid.points();
        let params = SystemicRiskParams {
            k: self.k,
            t_end: self.t_end,
            sigma: pts.iter().map(|&u| self.sigma.at(u)).collect(),
            eta: pts.iter().map(|&u| self.eta.at(u)).collect(),
            r: pts.iter().map(|&u| self.r.at(u)).collect(),
            g_k: sample_scalar_kernel(grid, |u, v| self.g_k.at(u, v))?,
            g_eta: sample_scalar_kernel(grid, |u, v| self.g_eta.at(u, v))?,
            g_r: sample_scalar_kernel(grid, |u, v| self.g_r.at(u, v))?,
        };
        params.check()?;
        Ok(params)
    }

    pub fn initial_condition(&self, grid: &LabelGrid) -> Result<InitialCondition> {
        if !(self.init_variance >= 0.0) {
            return Err(Error::Domain("initial variance must be nonnegative".into()));
        }
        let mean = grid.points().iter().map(|&u| DVector::from_element(1, self.init_mean.at(u))).collect();
        let cov = vec![DMatrix::from_element(1, 1, self.init_variance); grid.len()];
        InitialCondition::gaussian(mean, cov)
    }
}

/// Parameters sampled on a label grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemicRiskParams {
    pub k: f64,
    pub t_end: f64,
    pub sigma: Vec<f64>,
    pub eta: Vec<f64>,
    pub r: Vec<f64>,
    pub g_k: Kernel,
    pub g_eta: Kernel,
    pub g_r: Kernel,
}

impl SystemicRiskParams {
    pub fn labels(&self) -> usize {
        self.eta.len()
    }

    pub fn check(&self) -> Result<()> {
        if !(self.k <= 0.0) {
            return Err(Error::Domain(format!("mean-reversion rate must satisfy k <= 0, got {}", self.k)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Domain("horizon must be positive".into()));
        }
        for (name, v) in [("sigma", &self.sigma), ("eta", &self.eta), ("r", &self.r)] {
            if let Some(i) = v.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Domain(format!("{name} must be positive, got {} at label {i}", v[i])));
            }
        }
        for (name, g) in [("G~_k", &self.g_k), ("G~_eta", &self.g_eta), ("G~_r", &self.g_r)] {
            let dev = check_flip_symmetry(g);
            if dev > 1e-12 * (1.0 + g.max_abs()) {
                return Err(Error::Asymmetric { name: name.into(), deviation: dev });
            }
        }
        Ok(())
    }
}

/// `A = k`, `G_A = −k G̃_k`, `B = 1`, `C = D = 0`, `γ = σ`, `β = 0`,
/// `Q = η`, `H = r`, `R = 1`, with `G_Q`, `G_H` from the centered penalties.
pub fn build_model(params: &SystemicRiskParams, grid: &LabelGrid) -> Result<ProblemData> {
    params.check()?;
    if params.labels() != grid.len() {
        return Err(Error::Dimension("parameters were sampled on a different grid".into()));
    }
    let pts = grid.points();
    let coeffs = CoefficientField::scalar(grid, |u| {
        let i = pts.iter().position(|&x| x == u).expect("grid point");
        ScalarCoefficients {
            a: params.k,
            b: 1.0,
            q: params.eta[i],
            r: 1.0,
            h: params.r[i],
            gamma: params.sigma[i],
            ..Default::default()
        }
    });
    let n = grid.len();
    let dynamics = DynamicsKernels { g_a: params.g_k.scale(-params.k), g_c: Kernel::zeros(n, 1, 1) };
    let costs = CenteredCosts { tilde_g_q: params.g_eta.clone(), tilde_g_h: params.g_r.clone() };
    from_centered(grid.clone(), coeffs, dynamics, &costs, Horizon::new(0.0, params.t_end)?, 1.0)
}

/// Closed-form solution of `K̇ + 2kK + η − K² = 0`, `K_T = r`.
pub fn explicit_k_scalar(k: f64, eta: f64, r: f64, tau: f64) -> f64 {
    let root = (k * k + eta).sqrt();
    let (dp, dm) = (k + root, k - root);
    let e = ((dp - dm) * tau).exp();
    let num = -eta * (e - 1.0) - r * (dp * e - dm);
    let den = (dm * e - dp) - r * (e - 1.0);
    debug_assert!(den != 0.0);
    num / den
}

/// Per-label closed-form `K^u_t`.
pub fn explicit_k(params: &SystemicRiskParams, t: f64) -> Vec<f64> {
    let tau = params.t_end - t;
    params.eta.iter().zip(&params.r).map(|(&e, &r)| explicit_k_scalar(params.k, e, r, tau)).collect()
}

/// Max deviation of a solved `K` path from the closed form over all nodes and labels.
pub fn explicit_k_deviation(params: &SystemicRiskParams, k: &KPath) -> f64 {
    let tg = k.time_grid();
    let mut dev: f64 = 0.0;
    for s in 0..tg.len() {
        for (i, e) in explicit_k(params, tg.node(s)).into_iter().enumerate() {
            dev = dev.max((k.at(s)[i][(0, 0)] - e).abs());
        }
    }
    dev
}

/// Closed-form quantities of the homogeneous model.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousReference {
    /// `K(t_k)`.
    pub k: Vec<f64>,
    /// `K̄(t_k)(u,v) = −K(t_k)`.
    pub kbar: Vec<f64>,
    /// `Λ(t_k) = σ² ∫_{t_k}^T K`.
    pub lambda: Vec<f64>,
}

pub fn homogeneous_reference(config: &SystemicRiskConfig, tg: &TimeGrid) -> Result<HomogeneousReference> {
    if !config.is_homogeneous() {
        return Err(Error::Domain("homogeneous reference needs label-constant parameters and unit graphons".into()));
    }
    let c = config;
    let kk = |t: f64| explicit_k_scalar(c.k, c.eta.base, c.r.base, c.t_end - t);
    let k: Vec<f64> = (0..tg.len()).map(|s| kk(tg.node(s))).collect();
    let mut lambda = vec![0.0; tg.len()];
    let sigma2 = c.sigma.base * c.sigma.base;
    for s in (0..tg.steps()).rev() {
        lambda[s] = lambda[s + 1] + sigma2 * simpson(tg.dt(), k[s], kk(tg.midpoint(s)), k[s + 1]);
    }
    Ok(HomogeneousReference { kbar: k.iter().map(|x| -x).collect(), k, lambda })
}

/// Residual of the scalar kernel equation written directly in the model
/// parameters, evaluated by central differences on a solved path:
///
/// ```text
/// d/dt K̄ − kG̃_k(K^u + K^v) + 2kK̄ − ∫K̄(u,w)kG̃_k(w,v) − ∫kG̃_k(u,w)K̄(w,v)
///   + G_η − K̄(K^u + K^v) − ∫K̄(u,w)K̄(w,v) = 0.
/// ```
pub fn kernel_equation_residual(params: &SystemicRiskParams, grid: &LabelGrid, k: &KPath, kbar: &BarKPath) -> f64 {
    let n = grid.len();
    let w = grid.weights();
    let tg = k.time_grid();
    let h = tg.dt();
    let g = &params.g_k;
    let eta = &params.eta;
    let g_eta = |i: usize, j: usize| {
        let quad: f64 = (0..n).map(|l| w[l] * eta[l] * params.g_eta.scalar(l, j) * params.g_eta.scalar(l, i)).sum();
        quad - (eta[i] + eta[j]) * params.g_eta.scalar(i, j)
    };
    let kk = params.k;
    let mut res: f64 = 0.0;
    for s in 1..tg.steps() {
        let kb = kbar.at(s);
        let ks = k.at(s);
        for i in 0..n {
            for j in 0..n {
                let deriv = (kbar.at(s + 1).scalar(i, j) - kbar.at(s - 1).scalar(i, j)) / (2.0 * h);
                let (ku, kv) = (ks[i][(0, 0)], ks[j][(0, 0)]);
                let mut r = deriv - kk * g.scalar(i, j) * (ku + kv) + 2.0 * kk * kb.scalar(i, j);
                for l in 0..n {
                    r -= w[l] * kb.scalar(i, l) * kk * g.scalar(l, j);
                    r -= w[l] * kk * g.scalar(i, l) * kb.scalar(l, j);
                    r -= w[l] * kb.scalar(i, l) * kb.scalar(l, j);
                }
                r += g_eta(i, j) - kb.scalar(i, j) * (ku + kv);
                res = res.max(r.abs());
            }
        }
    }
    res
}

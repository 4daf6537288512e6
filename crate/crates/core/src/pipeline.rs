//! End-to-end solve and certification of the optimal law.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::control::{
    build_feedback, evaluate_cost_moments, solve_mean_flow, value_function, AffinePolicy, FeedbackLaw, InitialCondition,
};
use crate::error::{Error, Result};
use crate::kernel::LabelField;
use crate::linear_closers::{solve_lambda_with, solve_y_with, ClosureForm, LambdaPath, YPath};
use crate::model::{validate, ProblemData, ValidationReport};
use crate::riccati_abstract::{solve_abstract_riccati, AbstractDiagnostics, AbstractOptions, BarKPath};
use crate::riccati_standard::{solve_standard_riccati, KPath};
use crate::sim::{evaluate_cost, simulate, SimConfig};
use crate::time::TimeGrid;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SolveOptions {
    pub abstract_opts: AbstractOptions,
    pub closure: ClosureForm,
}

/// The backward system and the optimal feedback law on one time grid.
#[derive(Debug, Clone)]
pub struct Solution {
    pub tg: TimeGrid,
    pub k: KPath,
    pub kbar: BarKPath,
    pub y: YPath,
    pub lambda: LambdaPath,
    pub law: FeedbackLaw,
}

impl Solution {
    pub fn value(&self, init: &InitialCondition, p: &ProblemData) -> f64 {
        value_function(init, &self.k, &self.kbar, &self.y, &self.lambda, p)
    }
}

/// Solves `K`, `K̄`, `Y`, `Λ` and assembles the feedback law. Validation
/// failures are returned as [`Error::Domain`] naming the failed checks.
pub fn solve(p: &ProblemData, tg: &TimeGrid, opts: SolveOptions) -> Result<Solution> {
    let report = validate(p);
    if !report.passed() {
        return Err(Error::Domain(format!("problem failed validation: {}", report.failures.join("; "))));
    }
    let k = solve_standard_riccati(p, tg)?;
    let kbar = solve_abstract_riccati(&k, p, tg, opts.abstract_opts)?;
    let y = solve_y_with(&k, &kbar, p, tg, opts.closure)?;
    let lambda = solve_lambda_with(&k, &y, p, tg, opts.closure)?;
    let law = build_feedback(&k, &kbar, &y, p, tg)?;
    Ok(Solution { tg: *tg, k, kbar, y, lambda, law })
}

/// Numerical diagnostics of a solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub labels: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub steps: usize,
    pub dt: f64,
    pub validation_passed: bool,
    pub validation_failures: Vec<String>,
    pub q_min_eig: f64,
    pub h_min_eig: f64,
    pub r_min_eig: f64,
    pub s_q_min_eig: f64,
    pub s_h_min_eig: f64,
    pub k_max_residual: f64,
    pub k_min_eig: f64,
    pub k_sup_norm: f64,
    pub kbar_max_residual: f64,
    pub kbar_max_flip_deviation: f64,
    pub kbar_max_pre_projection_deviation: f64,
    pub kbar_max_operator_norm: f64,
    pub kbar_norm_iterations_converged: bool,
    pub y_max_residual: f64,
    pub y_identically_zero: bool,
    pub lambda_at_t0: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explicit_k_max_deviation: Option<f64>,
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

impl SolveReport {
    pub fn new(p: &ProblemData, sol: &Solution, validation: &ValidationReport, init: Option<&InitialCondition>) -> Self {
        let AbstractDiagnostics {
            max_flip_deviation,
            max_pre_projection_deviation,
            max_operator_norm,
            max_residual,
            norm_iterations_converged,
        } = sol.kbar.diagnostics();
        Self {
            labels: p.labels(),
            state_dim: p.state_dim(),
            control_dim: p.control_dim(),
            steps: sol.tg.steps(),
            dt: sol.tg.dt(),
            validation_passed: validation.passed(),
            validation_failures: validation.failures.clone(),
            q_min_eig: min_of(&validation.q_min_eig),
            h_min_eig: min_of(&validation.h_min_eig),
            r_min_eig: min_of(&validation.r_min_eig),
            s_q_min_eig: validation.s_q_min_eig,
            s_h_min_eig: validation.s_h_min_eig,
            k_max_residual: sol.k.max_residual(),
            k_min_eig: sol.k.min_eigenvalue(),
            k_sup_norm: sol.k.sup_norm(),
            kbar_max_residual: max_residual,
            kbar_max_flip_deviation: max_flip_deviation,
            kbar_max_pre_projection_deviation: max_pre_projection_deviation,
            kbar_max_operator_norm: max_operator_norm,
            kbar_norm_iterations_converged: norm_iterations_converged,
            y_max_residual: sol.y.max_residual(),
            y_identically_zero: sol.y.is_identically_zero(),
            lambda_at_t0: sol.lambda.at(0).iter().copied().collect(),
            value: init.map(|i| sol.value(i, p)),
            explicit_k_max_deviation: None,
        }
    }
}

/// An affine departure from the optimal law.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// Adds a constant to every control component.
    Shift(f64),
    /// Adds `ε (1 + u)` to every control component at label `u`.
    LabelOffset(f64),
    /// Adds `ε` to every entry of every state gain.
    StateGain(f64),
    /// Scales the mean-field gain kernel.
    MeanGainScale(f64),
}

impl Perturbation {
    pub fn name(&self) -> String {
        match self {
            Perturbation::Shift(e) => format!("shift({e})"),
            Perturbation::LabelOffset(e) => format!("label_offset({e})"),
            Perturbation::StateGain(e) => format!("state_gain({e})"),
            Perturbation::MeanGainScale(f) => format!("mean_gain_scale({f})"),
        }
    }

    pub fn apply(&self, p: &ProblemData, law: &AffinePolicy) -> AffinePolicy {
        let (n, d, m) = (p.labels(), p.state_dim(), p.control_dim());
        match *self {
            Perturbation::Shift(e) => law.shifted(e),
            Perturbation::LabelOffset(e) => {
                let vals: Vec<f64> = p.grid().points().iter().flat_map(|&u| std::iter::repeat_n(e * (1.0 + u), m)).collect();
                law.with_offset(&LabelField::from_vector(m, vals.into()))
            }
            Perturbation::StateGain(e) => law.with_state_gain(&vec![DMatrix::from_element(m, d, e); n]),
            Perturbation::MeanGainScale(f) => law.with_mean_gain_scaled(f),
        }
    }
}

/// The five laws tested by default around the optimum.
pub fn standard_perturbations() -> Vec<Perturbation> {
    vec![
        Perturbation::Shift(0.1),
        Perturbation::Shift(-0.2),
        Perturbation::LabelOffset(0.1),
        Perturbation::StateGain(0.2),
        Perturbation::MeanGainScale(1.5),
    ]
}

/// `J(α) − V` for one law, by Monte Carlo and by the exact moment equations.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct GapReport {
    pub law: String,
    pub j: f64,
    pub stderr: f64,
    pub value: f64,
    pub gap: f64,
    pub penalty: f64,
    pub penalty_stderr: f64,
    pub gap_minus_penalty: f64,
    pub exact_j: f64,
    pub exact_penalty: f64,
}

/// Simulates `policy` and compares its cost with `V` and with the penalty
/// integral against `sol.law`.
pub fn check_fundamental_relation(
    p: &ProblemData,
    sol: &Solution,
    policy: &AffinePolicy,
    name: &str,
    init: &InitialCondition,
    config: SimConfig,
) -> Result<GapReport> {
    let value = sol.value(init, p);
    let means = solve_mean_flow(p, policy, init, &sol.tg)?;
    let ens = simulate(p, policy, &means, init, config, Some(&sol.law))?;
    let est = evaluate_cost(p, &ens, &means, &sol.tg)?;
    let exact = evaluate_cost_moments(p, policy, init, &sol.tg, Some(&sol.law))?;
    let gap = est.j - value;
    Ok(GapReport {
        law: name.to_string(),
        j: est.j,
        stderr: est.stderr,
        value,
        gap,
        penalty: est.penalty,
        penalty_stderr: est.penalty_stderr,
        gap_minus_penalty: gap - est.penalty,
        exact_j: exact.total(),
        exact_penalty: exact.penalty,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CertifyTolerances {
    /// Multiple of the Monte Carlo standard error allowed in every gap.
    pub stderr_factor: f64,
    /// Allowance relative to `|V|`.
    pub relative: f64,
}

impl Default for CertifyTolerances {
    fn default() -> Self {
        Self { stderr_factor: 3.0, relative: 0.01 }
    }
}

impl CertifyTolerances {
    pub fn budget(&self, g: &GapReport) -> f64 {
        self.stderr_factor * g.stderr + self.relative * g.value.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifyReport {
    pub paths: usize,
    pub seed: u64,
    pub tolerances: CertifyTolerances,
    pub value: f64,
    pub optimal: GapReport,
    pub perturbed: Vec<GapReport>,
    /// `|gap|` of the optimal law within budget.
    pub optimal_ok: bool,
    /// Every perturbed gap above `−stderr_factor · stderr`.
    pub perturbed_ok: bool,
    /// `gap − penalty` within budget for every law.
    pub penalty_ok: bool,
}

impl CertifyReport {
    pub fn passed(&self) -> bool {
        self.optimal_ok && self.perturbed_ok && self.penalty_ok
    }
}

pub fn certify(
    p: &ProblemData,
    sol: &Solution,
    init: &InitialCondition,
    perturbations: &[Perturbation],
    config: SimConfig,
    tol: CertifyTolerances,
) -> Result<CertifyReport> {
    let law = sol.law.policy();
    let optimal = check_fundamental_relation(p, sol, law, "optimal", init, config)?;
    let perturbed = perturbations
        .iter()
        .map(|pert| check_fundamental_relation(p, sol, &pert.apply(p, law), &pert.name(), init, config))
        .collect::<Result<Vec<_>>>()?;
    let optimal_ok = optimal.gap.abs() <= tol.budget(&optimal);
    let perturbed_ok = perturbed.iter().all(|g| g.gap >= -tol.stderr_factor * g.stderr);
    let penalty_ok = std::iter::once(&optimal).chain(&perturbed).all(|g| g.gap_minus_penalty.abs() <= tol.budget(g));
    Ok(CertifyReport {
        paths: config.paths,
        seed: config.seed,
        tolerances: tol,
        value: optimal.value,
        optimal,
        perturbed,
        optimal_ok,
        perturbed_ok,
        penalty_ok,
    })
}

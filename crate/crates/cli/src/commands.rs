use std::fmt;
use std::fs;
use std::path::Path;

use nexlq_core::control::{solve_mean_flow, InitialCondition};
use nexlq_core::io::ProblemFile;
use nexlq_core::model::validate;
use nexlq_core::output::{self, fmt_f64, to_file};
use nexlq_core::pipeline::{
    certify as run_certify, check_fundamental_relation, solve as run_solve, standard_perturbations, CertifyReport,
    CertifyTolerances, GapReport, Solution, SolveOptions, SolveReport,
};
use nexlq_core::sim::{simulate as run_simulate, SimConfig};
use nexlq_core::systemic_risk::{
    build_model, explicit_k, explicit_k_deviation, homogeneous_reference, kernel_equation_residual, SystemicRiskConfig,
    SystemicRiskParams,
};
use nexlq_core::{build_grid, ProblemData, TimeGrid};
use serde::Serialize;

use crate::{CertifyArgs, MonteCarloArgs, Preset, SolveArgs, SourceArgs, SystemicRiskArgs, ToleranceArgs};

const PRESET_LABELS: usize = 16;

#[derive(Debug)]
pub enum CliError {
    Core(nexlq_core::Error),
    Usage(String),
}

impl CliError {
    pub fn is_usage(&self) -> bool {
        matches!(self, CliError::Usage(_) | CliError::Core(nexlq_core::Error::Parse { .. }))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl From<nexlq_core::Error> for CliError {
    fn from(e: nexlq_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Outcome = Result<Vec<String>, CliError>;

/// A problem ready to solve, with whatever references it carries.
struct Instance {
    source: String,
    problem: ProblemData,
    init: Option<InitialCondition>,
    systemic: Option<(SystemicRiskConfig, SystemicRiskParams)>,
}

fn systemic_instance(source: String, config: SystemicRiskConfig, n: usize) -> Result<Instance, CliError> {
    let grid = build_grid(n)?;
    let params = config.sample(&grid)?;
    let problem = build_model(&params, &grid)?;
    let init = config.initial_condition(&grid)?;
    Ok(Instance { source, problem, init: Some(init), systemic: Some((config, params)) })
}

fn load(src: &SourceArgs) -> Result<Instance, CliError> {
    let n = src.n.map(|n| n as usize);
    match (&src.problem, src.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)?;
            let located = |e: nexlq_core::Error| match e {
                nexlq_core::Error::Parse { location, message } => {
                    nexlq_core::Error::Parse { location: format!("{}: {location}", path.display()), message }
                }
                other => other,
            };
            let file = ProblemFile::parse(&text).map_err(located)?;
            let loaded = file.build(n).map_err(located)?;
            Ok(Instance { source: path.display().to_string(), problem: loaded.problem, init: loaded.initial, systemic: None })
        }
        (None, Some(Preset::SystemicRisk)) => {
            systemic_instance("preset:systemic-risk".into(), SystemicRiskConfig::heterogeneous(), n.unwrap_or(PRESET_LABELS))
        }
        (None, Some(Preset::SystemicRiskHomogeneous)) => systemic_instance(
            "preset:systemic-risk-homogeneous".into(),
            SystemicRiskConfig::homogeneous(-1.0, 0.4, 1.0, 0.5, 1.0),
            n.unwrap_or(PRESET_LABELS),
        ),
        (None, None) => Err(CliError::Usage("give --problem or --preset".into())),
    }
}

fn time_grid(p: &ProblemData, steps_per_unit: u64) -> Result<TimeGrid, CliError> {
    let h = p.horizon();
    Ok(TimeGrid::with_steps_per_unit(h.t0, h.t_end, steps_per_unit as usize)?)
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    value: f64,
    limit: f64,
    passed: bool,
}

impl Check {
    fn at_most(name: &'static str, value: f64, limit: f64) -> Self {
        Self { name, value, limit, passed: value <= limit }
    }

    fn at_least(name: &'static str, value: f64, limit: f64) -> Self {
        Self { name, value, limit, passed: value >= limit }
    }

    fn flag(name: &'static str, ok: bool) -> Self {
        Self { name, value: if ok { 1.0 } else { 0.0 }, limit: 1.0, passed: ok }
    }
}

fn failures(checks: &[Check]) -> Vec<String> {
    checks.iter().filter(|c| !c.passed).map(|c| c.name.to_string()).collect()
}

fn solve_checks(rep: &SolveReport, tol: &ToleranceArgs) -> Vec<Check> {
    let mut checks = vec![
        Check::at_least("k_psd", rep.k_min_eig, -tol.tol_psd * (1.0 + rep.k_sup_norm)),
        Check::at_most("kbar_flip_symmetry", rep.kbar_max_flip_deviation, tol.tol_flip),
        Check::flag("kbar_norm_converged", rep.kbar_norm_iterations_converged),
    ];
    if let Some(dev) = rep.explicit_k_max_deviation {
        checks.push(Check::at_most("explicit_k", dev, tol.tol_explicit));
    }
    checks
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn solve_instance(inst: &Instance, steps_per_unit: u64) -> Result<(Solution, SolveReport), CliError> {
    let tg = time_grid(&inst.problem, steps_per_unit)?;
    log::info!("solving {} on {} labels, {} steps", inst.source, inst.problem.labels(), tg.steps());
    let sol = run_solve(&inst.problem, &tg, SolveOptions::default())?;
    let mut report = SolveReport::new(&inst.problem, &sol, &validate(&inst.problem), inst.init.as_ref());
    if let Some((_, params)) = &inst.systemic {
        report.explicit_k_max_deviation = Some(explicit_k_deviation(params, &sol.k));
    }
    Ok((sol, report))
}

fn write_solution(out: &Path, inst: &Instance, sol: &Solution) -> Result<(), CliError> {
    to_file(out.join("k.csv"), |w| output::write_k(w, &sol.k))?;
    to_file(out.join("kbar.csv"), |w| output::write_kbar(w, &sol.kbar))?;
    to_file(out.join("y.csv"), |w| output::write_y(w, &sol.y))?;
    to_file(out.join("lambda.csv"), |w| output::write_lambda(w, &sol.lambda))?;
    to_file(out.join("law_local.csv"), |w| output::write_law_local(w, &sol.law))?;
    to_file(out.join("law_mean_gain.csv"), |w| output::write_law_mean_gain(w, &sol.law))?;
    if let Some(init) = &inst.init {
        let flow = solve_mean_flow(&inst.problem, sol.law.policy(), init, &sol.tg)?;
        to_file(out.join("mean_flow.csv"), |w| output::write_mean_flow(w, &flow))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    source: &'a str,
    solve: &'a SolveReport,
    checks: &'a [Check],
    passed: bool,
}

pub fn solve(args: &SolveArgs) -> Outcome {
    let inst = load(&args.source)?;
    fs::create_dir_all(&args.source.out)?;
    let (sol, report) = solve_instance(&inst, args.source.steps_per_unit)?;
    write_solution(&args.source.out, &inst, &sol)?;
    let checks = solve_checks(&report, &args.tol);
    let failed = failures(&checks);
    let doc = SolveOutput { source: &inst.source, solve: &report, checks: &checks, passed: failed.is_empty() };
    write_json(&args.source.out.join("report.json"), &doc)?;
    println!("solve {}: {}", inst.source, if failed.is_empty() { "PASS" } else { "FAIL" });
    Ok(failed)
}

fn need_init(inst: &Instance) -> Result<&InitialCondition, CliError> {
    inst.init
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{}: an [initial] section is needed to simulate", inst.source)))
}

fn sim_config(mc: &MonteCarloArgs) -> SimConfig {
    SimConfig::new(mc.paths as usize, mc.seed)
}

fn certify_checks(rep: &CertifyReport) -> Vec<Check> {
    let budget = |g: &GapReport| rep.tolerances.budget(g);
    let mut checks = vec![Check::at_most("optimal_gap", rep.optimal.gap.abs(), budget(&rep.optimal))];
    let worst_perturbed = rep
        .perturbed
        .iter()
        .map(|g| g.gap + rep.tolerances.stderr_factor * g.stderr)
        .fold(f64::INFINITY, f64::min);
    if !rep.perturbed.is_empty() {
        checks.push(Check::at_least("perturbed_gaps_nonnegative", worst_perturbed, 0.0));
    }
    let worst_penalty = std::iter::once(&rep.optimal)
        .chain(&rep.perturbed)
        .map(|g| g.gap_minus_penalty.abs() - budget(g))
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::at_most("gap_equals_penalty", worst_penalty, 0.0));
    checks
}

#[derive(Serialize)]
struct CertifyOutput<'a> {
    source: &'a str,
    solve: &'a SolveReport,
    certify: &'a CertifyReport,
    checks: &'a [Check],
    passed: bool,
}

fn certify_instance(inst: &Instance, sol: &Solution, mc: &MonteCarloArgs, tol: &ToleranceArgs) -> Result<CertifyReport, CliError> {
    let init = need_init(inst)?;
    let tol = CertifyTolerances { stderr_factor: tol.tol_stderr, relative: tol.tol_rel };
    log::info!("certifying with {} paths per label", mc.paths);
    Ok(run_certify(&inst.problem, sol, init, &standard_perturbations(), sim_config(mc), tol)?)
}

pub fn certify(args: &CertifyArgs) -> Outcome {
    let inst = load(&args.source)?;
    need_init(&inst)?;
    fs::create_dir_all(&args.source.out)?;
    let (sol, report) = solve_instance(&inst, args.source.steps_per_unit)?;
    let cert = certify_instance(&inst, &sol, &args.mc, &args.tol)?;
    let mut checks = solve_checks(&report, &args.tol);
    checks.extend(certify_checks(&cert));
    let failed = failures(&checks);
    let gaps: Vec<GapReport> = std::iter::once(cert.optimal.clone()).chain(cert.perturbed.iter().cloned()).collect();
    to_file(args.source.out.join("gap_report.csv"), |w| output::write_gap_reports(w, &gaps))?;
    let doc = CertifyOutput { source: &inst.source, solve: &report, certify: &cert, checks: &checks, passed: failed.is_empty() };
    write_json(&args.source.out.join("certify.json"), &doc)?;
    println!(
        "certify {}: V = {}, optimal gap = {} ± {}: {}",
        inst.source,
        fmt_f64(cert.value),
        fmt_f64(cert.optimal.gap),
        fmt_f64(cert.optimal.stderr),
        if failed.is_empty() { "PASS" } else { "FAIL" }
    );
    Ok(failed)
}

pub fn simulate(args: &CertifyArgs) -> Outcome {
    let inst = load(&args.source)?;
    let init = need_init(&inst)?;
    fs::create_dir_all(&args.source.out)?;
    let (sol, report) = solve_instance(&inst, args.source.steps_per_unit)?;
    let policy = sol.law.policy();
    let flow = solve_mean_flow(&inst.problem, policy, init, &sol.tg)?;
    let ens = run_simulate(&inst.problem, policy, &flow, init, sim_config(&args.mc), Some(&sol.law))?;
    to_file(args.source.out.join("mean_flow.csv"), |w| output::write_mean_flow(w, &flow))?;
    to_file(args.source.out.join("empirical_moments.csv"), |w| output::write_empirical_moments(w, &ens))?;
    let gap = check_fundamental_relation(&inst.problem, &sol, policy, "optimal", init, sim_config(&args.mc))?;
    to_file(args.source.out.join("cost_report.csv"), |w| output::write_gap_reports(w, std::slice::from_ref(&gap)))?;
    let checks = solve_checks(&report, &args.tol);
    let failed = failures(&checks);
    println!("simulate {}: J = {} ± {}, V = {}", inst.source, fmt_f64(gap.j), fmt_f64(gap.stderr), fmt_f64(gap.value));
    Ok(failed)
}

#[derive(Serialize)]
struct SystemicRiskOutput<'a> {
    config: &'a SystemicRiskConfig,
    solve: &'a SolveReport,
    kernel_equation_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    homogeneous: Option<HomogeneousDeviation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    certify: Option<&'a CertifyReport>,
    checks: &'a [Check],
    passed: bool,
}

#[derive(Serialize)]
struct HomogeneousDeviation {
    k: f64,
    kbar: f64,
    lambda: f64,
}

fn homogeneous_deviation(config: &SystemicRiskConfig, sol: &Solution) -> Result<HomogeneousDeviation, CliError> {
    let reference = homogeneous_reference(config, &sol.tg)?;
    let mut dev = HomogeneousDeviation { k: 0.0, kbar: 0.0, lambda: 0.0 };
    for s in 0..sol.tg.len() {
        let g = sol.kbar.at(s);
        for i in 0..g.labels() {
            dev.k = dev.k.max((sol.k.at(s)[i][(0, 0)] - reference.k[s]).abs());
            dev.lambda = dev.lambda.max((sol.lambda.at(s)[i] - reference.lambda[s]).abs());
            for j in 0..g.labels() {
                dev.kbar = dev.kbar.max((g.scalar(i, j) - reference.kbar[s]).abs());
            }
        }
    }
    Ok(dev)
}

pub fn systemic_risk(args: &SystemicRiskArgs) -> Outcome {
    let mut config = match (&args.config, args.homogeneous) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)?;
            SystemicRiskConfig::from_toml(&text).map_err(|e| match e {
                nexlq_core::Error::Parse { location, message } => {
                    nexlq_core::Error::Parse { location: format!("{}: {location}", path.display()), message }
                }
                other => other,
            })?
        }
        (None, true) => SystemicRiskConfig::homogeneous(-1.0, 0.4, 1.0, 0.5, 1.0),
        (None, false) => SystemicRiskConfig::heterogeneous(),
    };
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(s) = args.sigma {
        config.sigma.base = s;
    }
    if let Some(e) = args.eta {
        config.eta.base = e;
    }
    if let Some(r) = args.r {
        config.r.base = r;
    }
    if let Some(t) = args.t_end {
        config.t_end = t;
    }
    let inst = systemic_instance("systemic-risk".into(), config, args.n as usize).map_err(|e| match e {
        CliError::Core(nexlq_core::Error::Domain(m)) => CliError::Usage(format!("invalid model parameters: {m}")),
        other => other,
    })?;
    let out = &args.out;
    fs::create_dir_all(out)?;
    let (sol, report) = solve_instance(&inst, args.steps_per_unit)?;
    write_solution(out, &inst, &sol)?;
    let (_, params) = inst.systemic.as_ref().expect("systemic instance");
    to_file(out.join("explicit_k.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["t", "label", "k_explicit"])?;
        for s in 0..sol.tg.len() {
            for (i, x) in explicit_k(params, sol.tg.node(s)).into_iter().enumerate() {
                csv.write_record([fmt_f64(sol.tg.node(s)), i.to_string(), fmt_f64(x)])?;
            }
        }
        csv.flush()?;
        Ok(())
    })?;
    let residual = kernel_equation_residual(params, inst.problem.grid(), &sol.k, &sol.kbar);
    let mut checks = solve_checks(&report, &args.tol);
    let homogeneous = if config.is_homogeneous() {
        let dev = homogeneous_deviation(&config, &sol)?;
        checks.push(Check::at_most("homogeneous_k", dev.k, args.tol.tol_explicit));
        checks.push(Check::at_most("homogeneous_kbar", dev.kbar, args.tol.tol_explicit));
        checks.push(Check::at_most("homogeneous_lambda", dev.lambda, args.tol.tol_explicit));
        Some(dev)
    } else {
        None
    };
    let cert = match args.paths {
        Some(paths) => {
            let mc = MonteCarloArgs { paths, seed: args.seed };
            let cert = certify_instance(&inst, &sol, &mc, &args.tol)?;
            checks.extend(certify_checks(&cert));
            let gaps: Vec<GapReport> = std::iter::once(cert.optimal.clone()).chain(cert.perturbed.iter().cloned()).collect();
            to_file(out.join("gap_report.csv"), |w| output::write_gap_reports(w, &gaps))?;
            Some(cert)
        }
        None => None,
    };
    let failed = failures(&checks);
    let doc = SystemicRiskOutput {
        config: &config,
        solve: &report,
        kernel_equation_residual: residual,
        homogeneous,
        certify: cert.as_ref(),
        checks: &checks,
        passed: failed.is_empty(),
    };
    write_json(&out.join("systemic_risk.json"), &doc)?;
    println!(
        "systemic-risk: explicit-K deviation {}: {}",
        fmt_f64(report.explicit_k_max_deviation.unwrap_or(f64::NAN)),
        if failed.is_empty() { "PASS" } else { "FAIL" }
    );
    Ok(failed)
}

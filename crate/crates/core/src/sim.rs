//! Euler–Maruyama ensembles under affine policies, Monte Carlo cost
//! estimates and the particle-mode cross-check.
//!
//! Every `(label, path)` pair draws from its own ChaCha8 stream
//! `seed_from_u64(seed)` with stream id `label * paths + path`, and paths are
//! processed in fixed blocks whose results are combined in a fixed order, so
//! results do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::control::{AffinePolicy, FeedbackLaw, InitialCondition, MeanFlow};
use crate::error::{Error, Result};
use crate::grid::apply_kernel;
use crate::kernel::LabelField;
use crate::model::{CenteredCosts, ProblemData};
use crate::time::TimeGrid;

const BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub paths: usize,
    pub seed: u64,
    /// Keep every state and control sample (memory grows with labels x paths x steps).
    pub record: bool,
}

impl SimConfig {
    pub fn new(paths: usize, seed: u64) -> Self {
        Self { paths, seed, record: false }
    }
}

/// Time-integrated quantities of one path.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathSummary {
    /// `∫⟨X,QX⟩`.
    pub state: f64,
    /// `∫⟨α,Rα⟩`.
    pub control: f64,
    /// `⟨X_T,HX_T⟩`.
    pub terminal: f64,
    /// `∫⟨O(α − α̂), α − α̂⟩`, zero when no optimal law was supplied.
    pub penalty: f64,
}

impl PathSummary {
    pub fn cost(&self) -> f64 {
        self.state + self.control + self.terminal
    }
}

/// Full state and control samples of a recorded run.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedPaths {
    steps: usize,
    state_dim: usize,
    control_dim: usize,
    paths: usize,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
}

impl RecordedPaths {
    pub fn paths(&self) -> usize {
        self.paths
    }

    /// `X` of label `i`, path `q` at node `k`.
    pub fn state(&self, i: usize, q: usize, k: usize) -> DVector<f64> {
        let d = self.state_dim;
        DVector::from_column_slice(&self.states[i * self.paths + q][k * d..(k + 1) * d])
    }

    /// `α` of label `i`, path `q` at node `k`.
    pub fn control(&self, i: usize, q: usize, k: usize) -> DVector<f64> {
        let m = self.control_dim;
        DVector::from_column_slice(&self.controls[i * self.paths + q][k * m..(k + 1) * m])
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Result of [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    tg: TimeGrid,
    state_dim: usize,
    config: SimConfig,
    summaries: Vec<Vec<PathSummary>>,
    sum: Vec<DVector<f64>>,
    sumsq: Vec<DVector<f64>>,
    recorded: Option<RecordedPaths>,
}

impl Ensemble {
    pub fn time_grid(&self) -> &TimeGrid {
        &self.tg
    }

    pub fn config(&self) -> SimConfig {
        self.config
    }

    pub fn paths(&self) -> usize {
        self.config.paths
    }

    /// Per-path summaries of label `i`.
    pub fn summaries(&self, i: usize) -> &[PathSummary] {
        &self.summaries[i]
    }

    /// Empirical per-label means at node `k`.
    pub fn empirical_mean(&self, k: usize) -> LabelField {
        LabelField::from_vector(self.state_dim, &self.sum[k] / self.config.paths as f64)
    }

    /// Unbiased per-label, per-component sample variances at node `k`.
    pub fn empirical_variance(&self, k: usize) -> LabelField {
        let m = self.config.paths as f64;
        let mean = &self.sum[k] / m;
        let var = if self.config.paths > 1 {
            (&self.sumsq[k] - mean.component_mul(&mean) * m).map(|x| x.max(0.0)) / (m - 1.0)
        } else {
            DVector::zeros(mean.len())
        };
        LabelField::from_vector(self.state_dim, var)
    }

    pub fn recorded(&self) -> Option<&RecordedPaths> {
        self.recorded.as_ref()
    }
}

/// Per-node quantities shared by every path: the mean-field drift and
/// diffusion shifts and the state-independent parts of the policies.
struct NodeTerms {
    ga_x: DVector<f64>,
    gc_x: DVector<f64>,
    mean_part: DVector<f64>,
    opt_mean_part: Option<DVector<f64>>,
}

fn node_terms(p: &ProblemData, policy: &AffinePolicy, optimal: Option<&FeedbackLaw>, j: usize, xbar: &LabelField) -> NodeTerms {
    let wx = xbar.weighted(p.grid());
    NodeTerms {
        ga_x: p.kernels().g_a.matrix() * wx.vector(),
        gc_x: p.kernels().g_c.matrix() * wx.vector(),
        mean_part: policy.mean_part(j, wx.vector()),
        opt_mean_part: optimal.map(|o| o.policy().mean_part(j, wx.vector())),
    }
}

struct BlockOut {
    summaries: Vec<PathSummary>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    states: Vec<Vec<f64>>,
    controls: Vec<Vec<f64>>,
}

pub(crate) fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Ctx<'a> {
    p: &'a ProblemData,
    policy: &'a AffinePolicy,
    optimal: Option<&'a FeedbackLaw>,
    init: &'a InitialCondition,
    tg: &'a TimeGrid,
    terms: &'a [NodeTerms],
    config: SimConfig,
}

fn simulate_block(ctx: &Ctx<'_>, i: usize, first: usize, last: usize) -> BlockOut {
    if ctx.p.state_dim() == 1 && ctx.p.control_dim() == 1 {
        return simulate_block_scalar(ctx, i, first, last);
    }
    let p = ctx.p;
    let co = p.coeffs();
    let (d, m) = (p.state_dim(), p.control_dim());
    let steps = ctx.tg.steps();
    let h = ctx.tg.dt();
    let sqrt_h = h.sqrt();
    let mut out = BlockOut {
        summaries: Vec::with_capacity(last - first),
        sum: vec![0.0; (steps + 1) * d],
        sumsq: vec![0.0; (steps + 1) * d],
        states: Vec::new(),
        controls: Vec::new(),
    };
    let count = last - first;
    let mut rngs: Vec<ChaCha8Rng> =
        (first..last).map(|q| path_rng(ctx.config.seed, (i * ctx.config.paths + q) as u64)).collect();
    let mut xs: Vec<f64> = Vec::with_capacity(count * d);
    for rng in rngs.iter_mut() {
        xs.extend_from_slice(sample_init(ctx.init, i, rng).as_slice());
    }
    let mut summaries = vec![PathSummary::default(); count];
    let record = ctx.config.record;
    let mut states: Vec<Vec<f64>> = if record { vec![Vec::with_capacity((steps + 1) * d); count] } else { Vec::new() };
    let mut controls: Vec<Vec<f64>> = if record { vec![Vec::with_capacity((steps + 1) * m); count] } else { Vec::new() };
    // one scratch slot per path keeps consecutive paths free of false memory dependencies
    let mut alpha = vec![0.0; count * m];
    let mut delta = vec![0.0; count * m];
    let mut drift = vec![0.0; count * d];
    let mut diffusion = vec![0.0; count * d];
    let (q_i, r_i, h_i) = (&co.q[i], &co.r[i], &co.h[i]);
    let (a_i, b_i, c_i, d_i) = (&co.a[i], &co.b[i], &co.c[i], &co.d[i]);
    for k in 0..=steps {
        let j = 2 * k;
        let terms = &ctx.terms[k];
        let mp = &terms.mean_part.as_slice()[i * m..(i + 1) * m];
        let gain = ctx.policy.state_gain(j, i);
        let wt = if k == 0 || k == steps { 0.5 * h } else { h };
        for (x, a) in xs.chunks_exact(d).zip(alpha.chunks_exact_mut(m)) {
            a.copy_from_slice(mp);
            mat_vec_add(a, gain, x);
        }
        for ((x, a), summary) in xs.chunks_exact(d).zip(alpha.chunks_exact(m)).zip(summaries.iter_mut()) {
            summary.state += wt * quad(q_i, x);
            summary.control += wt * quad(r_i, a);
        }
        if let (Some(o), Some(omp)) = (ctx.optimal, terms.opt_mean_part.as_ref()) {
            let opt_mp = &omp.as_slice()[i * m..(i + 1) * m];
            let (opt_gain, o_ji) = (o.policy().state_gain(j, i), o.o(j, i));
            for (((x, a), dl), summary) in
                xs.chunks_exact(d).zip(alpha.chunks_exact(m)).zip(delta.chunks_exact_mut(m)).zip(summaries.iter_mut())
            {
                for ((dv, av), ov) in dl.iter_mut().zip(a).zip(opt_mp) {
                    *dv = av - ov;
                }
                mat_vec_sub(dl, opt_gain, x);
                summary.penalty += wt * quad(o_ji, dl);
            }
        }
        for x in xs.chunks_exact(d) {
            for c in 0..d {
                out.sum[k * d + c] += x[c];
                out.sumsq[k * d + c] += x[c] * x[c];
            }
        }
        if record {
            for (path, (x, a)) in xs.chunks_exact(d).zip(alpha.chunks_exact(m)).enumerate() {
                states[path].extend_from_slice(x);
                controls[path].extend_from_slice(a);
            }
        }
        if k == steps {
            for (x, summary) in xs.chunks_exact(d).zip(summaries.iter_mut()) {
                summary.terminal = quad(h_i, x);
            }
            break;
        }
        for c in 0..d {
            let (dr, df) = (co.beta[i][c] + terms.ga_x[i * d + c], co.gamma[i][c] + terms.gc_x[i * d + c]);
            drift.iter_mut().skip(c).step_by(d).for_each(|v| *v = dr);
            diffusion.iter_mut().skip(c).step_by(d).for_each(|v| *v = df);
        }
        for (((x, a), dr), df) in
            xs.chunks_exact(d).zip(alpha.chunks_exact(m)).zip(drift.chunks_exact_mut(d)).zip(diffusion.chunks_exact_mut(d))
        {
            mat_vec_add(dr, a_i, x);
            mat_vec_add(dr, b_i, a);
            mat_vec_add(df, c_i, x);
            mat_vec_add(df, d_i, a);
        }
        for (((x, rng), dr), df) in
            xs.chunks_exact_mut(d).zip(rngs.iter_mut()).zip(drift.chunks_exact(d)).zip(diffusion.chunks_exact(d))
        {
            let dw = sqrt_h * rng.sample::<f64, _>(StandardNormal);
            for c in 0..d {
                x[c] += dr[c] * h + df[c] * dw;
            }
        }
    }
    out.summaries = summaries;
    out.states = states;
    out.controls = controls;
    out
}

/// [`simulate_block`] for one state and one control component, on plain
/// scalars. Draws the same random numbers in the same order.
fn simulate_block_scalar(ctx: &Ctx<'_>, i: usize, first: usize, last: usize) -> BlockOut {
    let co = ctx.p.coeffs();
    let steps = ctx.tg.steps();
    let h = ctx.tg.dt();
    let sqrt_h = h.sqrt();
    let count = last - first;
    let record = ctx.config.record;
    let mut rngs: Vec<ChaCha8Rng> =
        (first..last).map(|q| path_rng(ctx.config.seed, (i * ctx.config.paths + q) as u64)).collect();
    let mut xs: Vec<f64> = rngs.iter_mut().map(|rng| sample_init(ctx.init, i, rng)[0]).collect();
    let mut summaries = vec![PathSummary::default(); count];
    let mut sum = vec![0.0; steps + 1];
    let mut sumsq = vec![0.0; steps + 1];
    let mut states: Vec<Vec<f64>> = if record { vec![Vec::with_capacity(steps + 1); count] } else { Vec::new() };
    let mut controls: Vec<Vec<f64>> = if record { vec![Vec::with_capacity(steps + 1); count] } else { Vec::new() };
    let s = |m: &DMatrix<f64>| m[(0, 0)];
    let (q, r, hh) = (s(&co.q[i]), s(&co.r[i]), s(&co.h[i]));
    let (a, b, c, dd) = (s(&co.a[i]), s(&co.b[i]), s(&co.c[i]), s(&co.d[i]));
    for k in 0..=steps {
        let j = 2 * k;
        let terms = &ctx.terms[k];
        let mp = terms.mean_part[i];
        let gain = s(ctx.policy.state_gain(j, i));
        let opt = ctx
            .optimal
            .zip(terms.opt_mean_part.as_ref())
            .map(|(o, omp)| (s(o.policy().state_gain(j, i)), omp[i], s(o.o(j, i))));
        let wt = if k == 0 || k == steps { 0.5 * h } else { h };
        let drift0 = co.beta[i][0] + terms.ga_x[i];
        let diffusion0 = co.gamma[i][0] + terms.gc_x[i];
        for (path, (x, rng)) in xs.iter_mut().zip(rngs.iter_mut()).enumerate() {
            let summary = &mut summaries[path];
            let alpha = gain * *x + mp;
            summary.state += wt * q * *x * *x;
            summary.control += wt * r * alpha * alpha;
            if let Some((og, omp, o)) = opt {
                let delta = alpha - (og * *x + omp);
                summary.penalty += wt * o * delta * delta;
            }
            sum[k] += *x;
            sumsq[k] += *x * *x;
            if record {
                states[path].push(*x);
                controls[path].push(alpha);
            }
            if k == steps {
                summary.terminal = hh * *x * *x;
                continue;
            }
            let drift = drift0 + a * *x + b * alpha;
            let diffusion = diffusion0 + c * *x + dd * alpha;
            let dw = sqrt_h * rng.sample::<f64, _>(StandardNormal);
            *x += drift * h + diffusion * dw;
        }
    }
    BlockOut { summaries, sum, sumsq, states, controls }
}

#[inline]
fn mat_vec_add(out: &mut [f64], a: &DMatrix<f64>, x: &[f64]) {
    let rows = out.len();
    let a = a.as_slice();
    for c in 0..x.len() {
        let xc = x[c];
        for r in 0..rows {
            out[r] += a[c * rows + r] * xc;
        }
    }
}

#[inline]
fn mat_vec_sub(out: &mut [f64], a: &DMatrix<f64>, x: &[f64]) {
    let rows = out.len();
    let a = a.as_slice();
    for c in 0..x.len() {
        let xc = x[c];
        for r in 0..rows {
            out[r] -= a[c * rows + r] * xc;
        }
    }
}

/// `⟨x, a x⟩`.
#[inline]
fn quad(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let a = a.as_slice();
    let mut s = 0.0;
    for c in 0..n {
        for r in 0..n {
            s += x[r] * a[c * n + r] * x[c];
        }
    }
    s
}

fn check_inputs(p: &ProblemData, policy: &AffinePolicy, init: &InitialCondition, tg: &TimeGrid, paths: usize) -> Result<()> {
    if policy.time_grid() != tg || policy.labels() != p.labels() {
        return Err(Error::Domain("policy was built on a different grid".into()));
    }
    if init.labels() != p.labels() || init.dim() != p.state_dim() {
        return Err(Error::Dimension("initial condition does not match the problem".into()));
    }
    if paths == 0 {
        return Err(Error::Domain("at least one path is required".into()));
    }
    Ok(())
}

/// Simulates `config.paths` independent paths per label with mean-field
/// terms read from `means`. With `optimal`, also accumulates the penalty of
/// the fundamental relation along each path.
pub fn simulate(
    p: &ProblemData,
    policy: &AffinePolicy,
    means: &MeanFlow,
    init: &InitialCondition,
    config: SimConfig,
    optimal: Option<&FeedbackLaw>,
) -> Result<Ensemble> {
    let tg = *means.time_grid();
    check_inputs(p, policy, init, &tg, config.paths)?;
    let n = p.labels();
    let d = p.state_dim();
    let steps = tg.steps();
    let terms: Vec<NodeTerms> = (0..=steps).map(|k| node_terms(p, policy, optimal, 2 * k, means.at(k))).collect();
    let ctx = Ctx { p, policy, optimal, init, tg: &tg, terms: &terms, config };

    let blocks_per_label = config.paths.div_ceil(BLOCK);
    let jobs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..blocks_per_label).map(move |b| (i, b))).collect();
    let results: Vec<BlockOut> = jobs
        .par_iter()
        .map(|&(i, b)| simulate_block(&ctx, i, b * BLOCK, ((b + 1) * BLOCK).min(config.paths)))
        .collect();

    let mut summaries = vec![Vec::with_capacity(config.paths); n];
    let mut sum = vec![DVector::zeros(n * d); steps + 1];
    let mut sumsq = vec![DVector::zeros(n * d); steps + 1];
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for (&(i, _), block) in jobs.iter().zip(results) {
        summaries[i].extend(block.summaries);
        for k in 0..=steps {
            for c in 0..d {
                sum[k][i * d + c] += block.sum[k * d + c];
                sumsq[k][i * d + c] += block.sumsq[k * d + c];
            }
        }
        states.extend(block.states);
        controls.extend(block.controls);
    }
    if summaries.iter().flatten().any(|s| !s.cost().is_finite()) {
        return Err(Error::BlowUp { label: None, time: tg.t_end() });
    }
    let recorded = config.record.then(|| RecordedPaths {
        steps,
        state_dim: d,
        control_dim: p.control_dim(),
        paths: config.paths,
        states,
        controls,
    });
    Ok(Ensemble { tg, state_dim: d, config, summaries, sum, sumsq, recorded })
}

/// Monte Carlo estimate of `J` with its standard error, plus the penalty
/// estimate when the ensemble carried one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub j: f64,
    pub stderr: f64,
    pub running_state: f64,
    pub running_control: f64,
    pub running_mean: f64,
    pub terminal: f64,
    pub penalty: f64,
    pub penalty_stderr: f64,
}

fn weighted_mean_and_stderr(p: &ProblemData, ens: &Ensemble, f: impl Fn(&PathSummary) -> f64) -> (f64, f64) {
    let w = p.grid().weights();
    let m = ens.paths() as f64;
    let (mut est, mut var) = (0.0, 0.0);
    for i in 0..p.labels() {
        let vals: Vec<f64> = ens.summaries(i).iter().map(&f).collect();
        let mean = vals.iter().sum::<f64>() / m;
        est += w[i] * mean;
        if ens.paths() > 1 {
            let s2 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
            var += w[i] * w[i] * s2 / m;
        }
    }
    (est, var.sqrt())
}

/// `J` from an ensemble: Monte Carlo over paths for the state, control and
/// terminal terms, trapezoid in time, and the mean-mean kernel terms taken
/// from the deterministic mean flow.
pub fn evaluate_cost(p: &ProblemData, ens: &Ensemble, means: &MeanFlow, tg: &TimeGrid) -> Result<CostEstimate> {
    if ens.time_grid() != tg || means.time_grid() != tg {
        return Err(Error::Domain("ensemble, mean flow and time grid disagree".into()));
    }
    let grid = p.grid();
    let h = tg.dt();
    let steps = tg.steps();
    let mut running_mean = 0.0;
    for k in 0..=steps {
        let wx = means.at(k).weighted(grid);
        let wt = if k == 0 || k == steps { 0.5 * h } else { h };
        running_mean += wt * wx.vector().dot(&(p.kernels().g_q.matrix() * wx.vector()));
    }
    let wx = means.at(steps).weighted(grid);
    let terminal_mean = wx.vector().dot(&(p.kernels().g_h.matrix() * wx.vector()));

    let (j_paths, stderr) = weighted_mean_and_stderr(p, ens, PathSummary::cost);
    let (running_state, _) = weighted_mean_and_stderr(p, ens, |s| s.state);
    let (running_control, _) = weighted_mean_and_stderr(p, ens, |s| s.control);
    let (terminal, _) = weighted_mean_and_stderr(p, ens, |s| s.terminal);
    let (penalty, penalty_stderr) = weighted_mean_and_stderr(p, ens, |s| s.penalty);
    Ok(CostEstimate {
        j: j_paths + running_mean + terminal_mean,
        stderr,
        running_state,
        running_control,
        running_mean,
        terminal: terminal + terminal_mean,
        penalty,
        penalty_stderr,
    })
}

fn recorded_means(rec: &RecordedPaths, n: usize, k: usize) -> LabelField {
    let vals: Vec<DVector<f64>> = (0..n)
        .map(|i| (0..rec.paths).fold(DVector::zeros(rec.state_dim), |acc, q| acc + rec.state(i, q, k)) / rec.paths as f64)
        .collect();
    LabelField::from_labels(&vals)
}

fn check_recorded(p: &ProblemData, rec: &RecordedPaths, tg: &TimeGrid) -> Result<()> {
    if rec.steps != tg.steps() || rec.states.len() != p.labels() * rec.paths || rec.state_dim != p.state_dim() {
        return Err(Error::Dimension("recorded paths do not match the problem and time grid".into()));
    }
    Ok(())
}

/// Trapezoid-in-time cost of a recorded ensemble in standard form, with the
/// mean-field terms evaluated on the ensemble's own empirical means.
pub fn recorded_cost_standard(p: &ProblemData, rec: &RecordedPaths, tg: &TimeGrid) -> Result<f64> {
    check_recorded(p, rec, tg)?;
    let co = p.coeffs();
    let grid = p.grid();
    let w = grid.weights();
    let (n, mp) = (p.labels(), rec.paths as f64);
    let steps = tg.steps();
    let mut total = 0.0;
    for k in 0..=steps {
        let wt = if k == 0 || k == steps { 0.5 * tg.dt() } else { tg.dt() };
        let xbar = recorded_means(rec, n, k).weighted(grid);
        let mut local = 0.0;
        let mut term = 0.0;
        for i in 0..n {
            for q in 0..rec.paths {
                let (x, a) = (rec.state(i, q, k), rec.control(i, q, k));
                local += w[i] * (x.dot(&(&co.q[i] * &x)) + a.dot(&(&co.r[i] * &a))) / mp;
                if k == steps {
                    term += w[i] * x.dot(&(&co.h[i] * &x)) / mp;
                }
            }
        }
        total += wt * (local + xbar.vector().dot(&(p.kernels().g_q.matrix() * xbar.vector())));
        if k == steps {
            total += term + xbar.vector().dot(&(p.kernels().g_h.matrix() * xbar.vector()));
        }
    }
    Ok(total)
}

/// The same cost in centered form, `⟨Q(X − G̃_Q x̄), X − G̃_Q x̄⟩` and its
/// terminal analogue, on the ensemble's own empirical means.
pub fn recorded_cost_centered(p: &ProblemData, costs: &CenteredCosts, rec: &RecordedPaths, tg: &TimeGrid) -> Result<f64> {
    check_recorded(p, rec, tg)?;
    let co = p.coeffs();
    let grid = p.grid();
    let w = grid.weights();
    let (n, d, mp) = (p.labels(), p.state_dim(), rec.paths as f64);
    let steps = tg.steps();
    let mut total = 0.0;
    for k in 0..=steps {
        let wt = if k == 0 || k == steps { 0.5 * tg.dt() } else { tg.dt() };
        let xbar = recorded_means(rec, n, k);
        let target_q = apply_kernel(&costs.tilde_g_q, &xbar, grid)?;
        let target_h = apply_kernel(&costs.tilde_g_h, &xbar, grid)?;
        for i in 0..n {
            for q in 0..rec.paths {
                let (x, a) = (rec.state(i, q, k), rec.control(i, q, k));
                let e = &x - target_q.vector().rows(i * d, d);
                total += wt * w[i] * (e.dot(&(&co.q[i] * &e)) + a.dot(&(&co.r[i] * &a))) / mp;
                if k == steps {
                    let e = &x - target_h.vector().rows(i * d, d);
                    total += w[i] * e.dot(&(&co.h[i] * &e)) / mp;
                }
            }
        }
    }
    Ok(total)
}

/// Empirical means of the interacting particle system in which every
/// mean-field term uses the current per-label sample means.
pub fn simulate_particles(
    p: &ProblemData,
    policy: &AffinePolicy,
    init: &InitialCondition,
    tg: &TimeGrid,
    config: SimConfig,
) -> Result<Vec<LabelField>> {
    check_inputs(p, policy, init, tg, config.paths)?;
    let (n, d) = (p.labels(), p.state_dim());
    let co = p.coeffs();
    let mpaths = config.paths;
    let h = tg.dt();
    let sqrt_h = h.sqrt();

    let mut rngs: Vec<Vec<ChaCha8Rng>> =
        (0..n).map(|i| (0..mpaths).map(|q| path_rng(config.seed, (i * mpaths + q) as u64)).collect()).collect();
    let mut xs: Vec<Vec<DVector<f64>>> = rngs
        .par_iter_mut()
        .enumerate()
        .map(|(i, label_rngs)| label_rngs.iter_mut().map(|rng| sample_init(init, i, rng)).collect())
        .collect();

    let empirical = |xs: &Vec<Vec<DVector<f64>>>| {
        let vals: Vec<DVector<f64>> =
            xs.iter().map(|label| label.iter().fold(DVector::zeros(d), |acc, x| acc + x) / mpaths as f64).collect();
        LabelField::from_labels(&vals)
    };
    let mut out = vec![empirical(&xs)];
    for k in 0..tg.steps() {
        let xbar = out[k].clone();
        let terms = node_terms(p, policy, None, 2 * k, &xbar);
        xs.par_iter_mut().zip(rngs.par_iter_mut()).enumerate().for_each(|(i, (label, label_rngs))| {
            for (x, rng) in label.iter_mut().zip(label_rngs.iter_mut()) {
                let alpha = policy.eval(2 * k, i, x, &terms.mean_part);
                let drift = &co.beta[i] + &co.a[i] * &*x + terms.ga_x.rows(i * d, d) + &co.b[i] * &alpha;
                let diffusion = &co.gamma[i] + &co.c[i] * &*x + terms.gc_x.rows(i * d, d) + &co.d[i] * &alpha;
                let dw = sqrt_h * rng.sample::<f64, _>(StandardNormal);
                *x += drift * h + diffusion * dw;
            }
        });
        out.push(empirical(&xs));
    }
    Ok(out)
}

/// Draws the initial state from the path's own stream.
pub(crate) fn sample_init(init: &InitialCondition, i: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let cell = std::cell::RefCell::new(rng);
    init.sample(
        i,
        &mut || cell.borrow_mut().sample::<f64, _>(StandardNormal),
        &mut || cell.borrow_mut().random::<f64>(),
    )
}

//! TOML problem files.
//!
//! ```toml
//! [grid]
//! n = 8
//!
//! [horizon]
//! t0 = 0.0
//! t_end = 1.0
//!
//! [coefficients]
//! state_dim = 1
//! control_dim = 1
//! coercivity = 1e-8                 # optional
//! a = { constant = [[-1.0]] }
//! b = { expr = [["1 + u"]] }        # expression in the label u
//! q = { labels = [[[1.0]], [[2.0]]] }  # one matrix per label
//! r = { constant = [[1.0]] }
//! beta = { constant = [0.0] }       # c, d, q, h, beta, gamma default to zero
//!
//! [kernels]
//! formulation = "standard"          # or "centered", "symmetric"
//! g_a = { kind = "expr", expr = [["exp(-abs(u - v))"]] }
//! g_q = { kind = "table", table = [[0.1, 0.0], [0.0, 0.1]] }  # (n·d) x (n·d), row-major
//! g_h = { kind = "zero" }
//!
//! [initial]                         # optional
//! kind = "gaussian"
//! mean = { expr = ["1 + u"] }
//! covariance = { constant = [[0.1]] }
//! ```
//!
//! Matrices are row-major. With `formulation = "centered"`, `g_q` and `g_h`
//! are the centered kernels `G̃_Q`, `G̃_H`; with `"symmetric"` they are `G̃_Q`,
//! `G̃_H` and `[kernels]` also takes the weights `bar_q`, `bar_h`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::InitialCondition;
use crate::error::{Error, Result};
use crate::grid::{build_grid, sample_kernel, LabelGrid};
use crate::kernel::Kernel;
use crate::model::{
    from_centered, from_symmetric, CenteredCosts, CoefficientField, CouplingKernels, DynamicsKernels, Horizon,
    ProblemData, SymmetricCosts,
};

const DEFAULT_COERCIVITY: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub grid: GridSection,
    pub horizon: HorizonSection,
    pub coefficients: CoefficientSection,
    pub kernels: KernelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HorizonSection {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSection {
    pub state_dim: usize,
    pub control_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coercivity: Option<f64>,
    pub a: MatrixSpec,
    pub b: MatrixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<MatrixSpec>,
    pub r: MatrixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<VectorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<VectorSpec>,
}

/// A label-dependent matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MatrixSpec {
    Constant(Vec<Vec<f64>>),
    Labels(Vec<Vec<Vec<f64>>>),
    Expr(Vec<Vec<String>>),
}

/// A label-dependent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VectorSpec {
    Constant(Vec<f64>),
    Labels(Vec<Vec<f64>>),
    Expr(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    #[default]
    Standard,
    Centered,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default)]
    pub formulation: Formulation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_a: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_c: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_q: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_h: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bar_q: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bar_h: Option<MatrixSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Zero,
    /// Dense `(n·rows) × (n·cols)` table, row-major.
    Table { table: Vec<Vec<f64>> },
    /// One expression in `u`, `v` per block entry.
    Expr { expr: Vec<Vec<String>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialSection {
    Deterministic { mean: VectorSpec },
    Gaussian { mean: VectorSpec, covariance: MatrixSpec },
    UniformBox { mean: VectorSpec, half_width: VectorSpec },
}

/// A problem and its optional initial law.
#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub problem: ProblemData,
    pub initial: Option<InitialCondition>,
}

fn parse_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse { location: location.into(), message: message.into() }
}

fn compile1(src: &str, var: &str, at: &str) -> Result<impl Fn(f64) -> f64> {
    let expr: meval::Expr = src.parse().map_err(|e| parse_err(at, format!("bad expression `{src}`: {e}")))?;
    expr.bind(var).map_err(|e| parse_err(at, format!("bad expression `{src}`: {e}")))
}

fn compile2(src: &str, at: &str) -> Result<impl Fn(f64, f64) -> f64> {
    let expr: meval::Expr = src.parse().map_err(|e| parse_err(at, format!("bad expression `{src}`: {e}")))?;
    expr.bind2("u", "v").map_err(|e| parse_err(at, format!("bad expression `{src}`: {e}")))
}

fn rows_to_matrix(rows: &[Vec<f64>], shape: (usize, usize), at: &str) -> Result<DMatrix<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(parse_err(at, format!("expected a {}x{} matrix", shape.0, shape.1)));
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

fn check_finite(vals: impl IntoIterator<Item = f64>, at: &str) -> Result<()> {
    if vals.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(parse_err(at, "non-finite value"))
    }
}

impl MatrixSpec {
    pub fn build(&self, grid: &LabelGrid, shape: (usize, usize), at: &str) -> Result<Vec<DMatrix<f64>>> {
        let n = grid.len();
        let out = match self {
            MatrixSpec::Constant(rows) => vec![rows_to_matrix(rows, shape, at)?; n],
            MatrixSpec::Labels(per) => {
                if per.len() != n {
                    return Err(parse_err(at, format!("expected {n} label matrices, found {}", per.len())));
                }
                per.iter().map(|rows| rows_to_matrix(rows, shape, at)).collect::<Result<_>>()?
            }
            MatrixSpec::Expr(rows) => {
                if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
                    return Err(parse_err(at, format!("expected a {}x{} matrix", shape.0, shape.1)));
                }
                let fs = rows
                    .iter()
                    .map(|r| r.iter().map(|s| compile1(s, "u", at)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                grid.points().iter().map(|&u| DMatrix::from_fn(shape.0, shape.1, |i, j| fs[i][j](u))).collect()
            }
        };
        check_finite(out.iter().flat_map(|m| m.iter().copied()), at)?;
        Ok(out)
    }
}

impl VectorSpec {
    pub fn build(&self, grid: &LabelGrid, dim: usize, at: &str) -> Result<Vec<DVector<f64>>> {
        let n = grid.len();
        let vec_of = |v: &[f64]| {
            if v.len() != dim {
                return Err(parse_err(at, format!("expected a vector of length {dim}")));
            }
            Ok(DVector::from_column_slice(v))
        };
        let out = match self {
            VectorSpec::Constant(v) => vec![vec_of(v)?; n],
            VectorSpec::Labels(per) => {
                if per.len() != n {
                    return Err(parse_err(at, format!("expected {n} label vectors, found {}", per.len())));
                }
                per.iter().map(|v| vec_of(v)).collect::<Result<_>>()?
            }
            VectorSpec::Expr(v) => {
                if v.len() != dim {
                    return Err(parse_err(at, format!("expected a vector of length {dim}")));
                }
                let fs = v.iter().map(|s| compile1(s, "u", at)).collect::<Result<Vec<_>>>()?;
                grid.points().iter().map(|&u| DVector::from_fn(dim, |i, _| fs[i](u))).collect()
            }
        };
        check_finite(out.iter().flat_map(|m| m.iter().copied()), at)?;
        Ok(out)
    }
}

impl KernelSpec {
    pub fn build(&self, grid: &LabelGrid, rows: usize, cols: usize, at: &str) -> Result<Kernel> {
        let n = grid.len();
        match self {
            KernelSpec::Zero => Ok(Kernel::zeros(n, rows, cols)),
            KernelSpec::Table { table } => {
                let m = rows_to_matrix(table, (n * rows, n * cols), at)?;
                check_finite(m.iter().copied(), at)?;
                Ok(Kernel::from_matrix(n, rows, cols, m))
            }
            KernelSpec::Expr { expr } => {
                if expr.len() != rows || expr.iter().any(|r| r.len() != cols) {
                    return Err(parse_err(at, format!("expected {rows}x{cols} block expressions")));
                }
                let fs = expr
                    .iter()
                    .map(|r| r.iter().map(|s| compile2(s, at)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                sample_kernel(grid, rows, cols, |u, v| DMatrix::from_fn(rows, cols, |i, j| fs[i][j](u, v)))
                    .map_err(|e| parse_err(at, e.to_string()))
            }
        }
    }

    fn is_resolution_free(&self) -> bool {
        !matches!(self, KernelSpec::Table { .. })
    }
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.matches('\n').count() + 1;
                    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
                    format!("line {line}, column {col}")
                }
                None => "document".to_string(),
            };
            parse_err(location, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| parse_err("document", e.to_string()))
    }

    /// `true` when every field can be sampled on any grid size.
    pub fn is_resolution_free(&self) -> bool {
        let c = &self.coefficients;
        let mats = [Some(&c.a), Some(&c.b), c.c.as_ref(), c.d.as_ref(), c.q.as_ref(), Some(&c.r), c.h.as_ref()];
        let k = &self.kernels;
        mats.iter().flatten().all(|m| !matches!(m, MatrixSpec::Labels(_)))
            && [&c.beta, &c.gamma].iter().all(|v| !matches!(v, Some(VectorSpec::Labels(_))))
            && [&k.g_a, &k.g_c, &k.g_q, &k.g_h].iter().flat_map(|s| s.as_ref()).all(KernelSpec::is_resolution_free)
    }

    /// Builds the problem on the file's grid, or on `n` labels when given.
    pub fn build(&self, n: Option<usize>) -> Result<LoadedProblem> {
        let n = n.unwrap_or(self.grid.n);
        if n == 0 {
            return Err(parse_err("grid.n", "need at least one label"));
        }
        let grid = build_grid(n)?;
        let c = &self.coefficients;
        let (d, m) = (c.state_dim, c.control_dim);
        if d == 0 || m == 0 {
            return Err(parse_err("coefficients", "state_dim and control_dim must be positive"));
        }
        let mat = |spec: Option<&MatrixSpec>, shape: (usize, usize), name: &str| match spec {
            Some(s) => s.build(&grid, shape, &format!("coefficients.{name}")),
            None => Ok(vec![DMatrix::zeros(shape.0, shape.1); n]),
        };
        let vecf = |spec: Option<&VectorSpec>, name: &str| match spec {
            Some(s) => s.build(&grid, d, &format!("coefficients.{name}")),
            None => Ok(vec![DVector::zeros(d); n]),
        };
        let coeffs = CoefficientField {
            state_dim: d,
            control_dim: m,
            a: mat(Some(&c.a), (d, d), "a")?,
            b: mat(Some(&c.b), (d, m), "b")?,
            c: mat(c.c.as_ref(), (d, d), "c")?,
            d: mat(c.d.as_ref(), (d, m), "d")?,
            q: mat(c.q.as_ref(), (d, d), "q")?,
            r: mat(Some(&c.r), (m, m), "r")?,
            h: mat(c.h.as_ref(), (d, d), "h")?,
            beta: vecf(c.beta.as_ref(), "beta")?,
            gamma: vecf(c.gamma.as_ref(), "gamma")?,
        };
        let k = &self.kernels;
        let kern = |spec: &Option<KernelSpec>, name: &str| match spec {
            Some(s) => s.build(&grid, d, d, &format!("kernels.{name}")),
            None => Ok(Kernel::zeros(n, d, d)),
        };
        let (g_a, g_c, g_q, g_h) = (kern(&k.g_a, "g_a")?, kern(&k.g_c, "g_c")?, kern(&k.g_q, "g_q")?, kern(&k.g_h, "g_h")?);
        let horizon = Horizon::new(self.horizon.t0, self.horizon.t_end)?;
        let coercivity = c.coercivity.unwrap_or(DEFAULT_COERCIVITY);
        let dynamics = DynamicsKernels { g_a, g_c };
        let problem = match k.formulation {
            Formulation::Standard => {
                if k.bar_q.is_some() || k.bar_h.is_some() {
                    return Err(parse_err("kernels", "bar_q/bar_h only apply to the symmetric formulation"));
                }
                let kernels = CouplingKernels { g_a: dynamics.g_a, g_c: dynamics.g_c, g_q, g_h };
                ProblemData::new(grid.clone(), coeffs, kernels, horizon, coercivity)?
            }
            Formulation::Centered => {
                let costs = CenteredCosts { tilde_g_q: g_q, tilde_g_h: g_h };
                from_centered(grid.clone(), coeffs, dynamics, &costs, horizon, coercivity)?
            }
            Formulation::Symmetric => {
                let costs = SymmetricCosts {
                    tilde_g_q: g_q,
                    bar_q: mat(k.bar_q.as_ref(), (d, d), "bar_q")?,
                    tilde_g_h: g_h,
                    bar_h: mat(k.bar_h.as_ref(), (d, d), "bar_h")?,
                };
                from_symmetric(grid.clone(), coeffs, dynamics, &costs, horizon, coercivity)?
            }
        };
        let initial = match &self.initial {
            None => None,
            Some(init) => Some(match init {
                InitialSection::Deterministic { mean } => {
                    InitialCondition::deterministic(mean.build(&grid, d, "initial.mean")?)?
                }
                InitialSection::Gaussian { mean, covariance } => InitialCondition::gaussian(
                    mean.build(&grid, d, "initial.mean")?,
                    covariance.build(&grid, (d, d), "initial.covariance")?,
                )?,
                InitialSection::UniformBox { mean, half_width } => InitialCondition::uniform_box(
                    mean.build(&grid, d, "initial.mean")?,
                    half_width.build(&grid, d, "initial.half_width")?,
                )?,
            }),
        };
        Ok(LoadedProblem { problem, initial })
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn labels_matrix(ms: &[DMatrix<f64>]) -> MatrixSpec {
    MatrixSpec::Labels(ms.iter().map(matrix_rows).collect())
}

fn labels_vector(vs: &[DVector<f64>]) -> VectorSpec {
    VectorSpec::Labels(vs.iter().map(|v| v.iter().copied().collect()).collect())
}

/// Standard-form file with every field written out per label and every
/// kernel as a table.
pub fn problem_to_file(p: &ProblemData, initial: Option<&InitialCondition>) -> ProblemFile {
    let c = p.coeffs();
    let h = p.horizon();
    let table = |g: &Kernel| Some(KernelSpec::Table { table: matrix_rows(g.matrix()) });
    let initial = initial.map(|init| {
        let n = init.labels();
        let mean: Vec<DVector<f64>> = (0..n).map(|i| init.mean(i).clone()).collect();
        if init.is_deterministic() {
            InitialSection::Deterministic { mean: labels_vector(&mean) }
        } else if let Some(hw) = init.half_width() {
            InitialSection::UniformBox { mean: labels_vector(&mean), half_width: labels_vector(hw) }
        } else {
            let cov: Vec<DMatrix<f64>> = (0..n).map(|i| init.covariance(i).clone()).collect();
            InitialSection::Gaussian { mean: labels_vector(&mean), covariance: labels_matrix(&cov) }
        }
    });
    ProblemFile {
        grid: GridSection { n: p.labels() },
        horizon: HorizonSection { t0: h.t0, t_end: h.t_end },
        coefficients: CoefficientSection {
            state_dim: p.state_dim(),
            control_dim: p.control_dim(),
            coercivity: Some(p.coercivity()),
            a: labels_matrix(&c.a),
            b: labels_matrix(&c.b),
            c: Some(labels_matrix(&c.c)),
            d: Some(labels_matrix(&c.d)),
            q: Some(labels_matrix(&c.q)),
            r: labels_matrix(&c.r),
            h: Some(labels_matrix(&c.h)),
            beta: Some(labels_vector(&c.beta)),
            gamma: Some(labels_vector(&c.gamma)),
        },
        kernels: KernelSection {
            formulation: Formulation::Standard,
            g_a: table(&p.kernels().g_a),
            g_c: table(&p.kernels().g_c),
            g_q: table(&p.kernels().g_q),
            g_h: table(&p.kernels().g_h),
            bar_q: None,
            bar_h: None,
        },
        initial,
    }
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<LoadedProblem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let file = ProblemFile::parse(&text).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse { location: format!("{}: {location}", path.display()), message },
        other => other,
    })?;
    file.build(None)
}

pub fn save_problem(p: &ProblemData, initial: Option<&InitialCondition>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, problem_to_file(p, initial).to_toml()?)?;
    Ok(())
}

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use nexlq_core::grid::sample_kernel;
use nexlq_core::model::{CoefficientField, CouplingKernels, Horizon, ProblemData};
use nexlq_core::build_grid;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * (2.0 * r.random::<f64>() - 1.0))
}

pub fn rand_psd(r: &mut ChaCha8Rng, d: usize, shift: f64) -> DMatrix<f64> {
    let m = rand_mat(r, d, d, 1.0);
    &m * m.transpose() * 0.5 + DMatrix::identity(d, d) * shift
}

/// A generic problem with every coupling active and nonzero affine terms.
/// Kernels are scaled so the positivity checks pass.
pub fn random_problem(seed: u64, n: usize, d: usize, m: usize, t_end: f64) -> ProblemData {
    let mut r = rng(seed);
    let grid = build_grid(n).unwrap();
    let per = |r: &mut ChaCha8Rng, f: &dyn Fn(&mut ChaCha8Rng) -> DMatrix<f64>| (0..n).map(|_| f(r)).collect::<Vec<_>>();
    let coeffs = CoefficientField {
        state_dim: d,
        control_dim: m,
        a: per(&mut r, &|r| rand_mat(r, d, d, 0.5)),
        b: per(&mut r, &|r| rand_mat(r, d, m, 1.0)),
        c: per(&mut r, &|r| rand_mat(r, d, d, 0.3)),
        d: per(&mut r, &|r| rand_mat(r, d, m, 0.3)),
        q: per(&mut r, &|r| rand_psd(r, d, 0.5)),
        r: per(&mut r, &|r| rand_psd(r, m, 1.0)),
        h: per(&mut r, &|r| rand_psd(r, d, 0.5)),
        beta: (0..n).map(|_| DVector::from_fn(d, |_, _| 2.0 * r.random::<f64>() - 1.0)).collect(),
        gamma: (0..n).map(|_| DVector::from_fn(d, |_, _| 0.5 * (2.0 * r.random::<f64>() - 1.0))).collect(),
    };
    let smooth = |r: &mut ChaCha8Rng, scale: f64| {
        let c0 = rand_mat(r, d, d, scale);
        let c1 = rand_mat(r, d, d, scale);
        let c2 = rand_mat(r, d, d, scale);
        sample_kernel(&grid, d, d, move |u, v| &c0 + &c1 * (u - v) + &c2 * (u * v)).unwrap()
    };
    let kernels = CouplingKernels {
        g_a: smooth(&mut r, 0.5),
        g_c: smooth(&mut r, 0.2),
        g_q: smooth(&mut r, 0.2),
        g_h: smooth(&mut r, 0.2),
    };
    ProblemData::new(grid, coeffs, kernels, Horizon::new(0.0, t_end).unwrap(), 0.5).unwrap()
}

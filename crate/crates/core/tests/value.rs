mod common;

use nalgebra::{DMatrix, DVector};
use nexlq_core::control::InitialCondition;
use nexlq_core::model::ScalarCoefficients;
use nexlq_core::pipeline::{solve, SolveOptions};
use nexlq_core::systemic_risk::{build_model, homogeneous_reference, SystemicRiskConfig};
use nexlq_core::{build_grid, CoefficientField, CouplingKernels, Horizon, ProblemData, TimeGrid};

#[test]
fn zero_start_without_affine_terms_has_zero_value() {
    let mut p = common::random_problem(3, 3, 2, 1, 1.0);
    let co = p.coeffs().clone();
    let coeffs = CoefficientField {
        beta: vec![DVector::zeros(2); 3],
        gamma: vec![DVector::zeros(2); 3],
        ..co
    };
    p = ProblemData::new(p.grid().clone(), coeffs, p.kernels().clone(), p.horizon(), p.coercivity()).unwrap();
    let tg = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let sol = solve(&p, &tg, SolveOptions::default()).unwrap();
    let init = InitialCondition::deterministic(vec![DVector::zeros(2); 3]).unwrap();
    assert_eq!(sol.value(&init, &p), 0.0);
}

#[test]
fn homogeneous_deterministic_start_leaves_only_the_noise_term() {
    let grid = build_grid(5).unwrap();
    let cfg = SystemicRiskConfig::homogeneous(-0.5, 0.7, 1.2, 0.4, 1.0);
    let p = build_model(&cfg.sample(&grid).unwrap(), &grid).unwrap();
    let tg = TimeGrid::new(0.0, 1.0, 1000).unwrap();
    let sol = solve(&p, &tg, SolveOptions::default()).unwrap();
    let init = InitialCondition::deterministic(vec![DVector::from_element(1, 1.7); 5]).unwrap();
    let r = homogeneous_reference(&cfg, &tg).unwrap();
    assert!((sol.value(&init, &p) - r.lambda[0]).abs() < 1e-6);
}

#[test]
fn zero_mean_gaussian_value_is_trace_plus_noise() {
    let p = common::random_problem(8, 3, 2, 2, 1.0);
    let tg = TimeGrid::new(0.0, 1.0, 200).unwrap();
    let sol = solve(&p, &tg, SolveOptions::default()).unwrap();
    let mut r = common::rng(1);
    let covs: Vec<DMatrix<f64>> = (0..3).map(|_| common::rand_psd(&mut r, 2, 0.2)).collect();
    let init = InitialCondition::gaussian(vec![DVector::zeros(2); 3], covs.clone()).unwrap();
    let w = p.grid().weights();
    let expected: f64 =
        (0..3).map(|i| w[i] * ((&sol.k.at(0)[i] * &covs[i]).trace() + sol.lambda.at(0)[i])).sum();
    assert!((sol.value(&init, &p) - expected).abs() < 1e-12 * (1.0 + expected.abs()));
}

#[test]
fn costless_problem_has_the_zero_law() {
    let grid = build_grid(4).unwrap();
    let coeffs = CoefficientField::scalar(&grid, |u| ScalarCoefficients { a: u, b: 1.0, c: 0.2, r: 1.0, ..Default::default() });
    let p = ProblemData::new(grid, coeffs, CouplingKernels::zeros(4, 1), Horizon::new(0.0, 1.0).unwrap(), 1e-8).unwrap();
    let tg = TimeGrid::new(0.0, 1.0, 20).unwrap();
    let sol = solve(&p, &tg, SolveOptions::default()).unwrap();
    let law = sol.law.policy();
    for j in 0..=2 * tg.steps() {
        for i in 0..4 {
            assert_eq!(law.state_gain(j, i)[(0, 0)], 0.0);
        }
        assert_eq!(law.mean_gain(j).max_abs(), 0.0);
        assert_eq!(law.offset(j).vector().amax(), 0.0);
    }
}

#[test]
fn systemic_risk_law_reads_off_the_riccati_solutions() {
    let grid = build_grid(6).unwrap();
    let cfg = SystemicRiskConfig::heterogeneous();
    let p = build_model(&cfg.sample(&grid).unwrap(), &grid).unwrap();
    let tg = TimeGrid::new(0.0, 1.0, 100).unwrap();
    let sol = solve(&p, &tg, SolveOptions::default()).unwrap();
    let law = sol.law.policy();
    for s in [0, 37, 100] {
        for i in 0..6 {
            assert!((law.state_gain(2 * s, i)[(0, 0)] + sol.k.scalar(s, i)).abs() < 1e-14);
            for j in 0..6 {
                assert!((law.mean_gain(2 * s).scalar(i, j) + sol.kbar.at(s).scalar(i, j)).abs() < 1e-14);
            }
        }
    }
}

//! The fundamental relation checked with exact moments instead of sampling.

mod common;

use nalgebra::{DMatrix, DVector};
use nexlq_core::control::{build_feedback, evaluate_cost_moments, value_function, InitialCondition};
use nexlq_core::linear_closers::{solve_lambda, solve_y};
use nexlq_core::model::validate;
use nexlq_core::riccati_abstract::{solve_abstract_riccati, AbstractOptions};
use nexlq_core::riccati_standard::solve_standard_riccati;
use nexlq_core::{LabelField, TimeGrid};

#[test]
fn optimal_cost_equals_value_and_gap_equals_penalty() {
    for seed in 0..4 {
        let (n, d, m) = (3, 2, if seed % 2 == 0 { 1 } else { 2 });
        let p = common::random_problem(seed, n, d, m, 1.0);
        assert!(validate(&p).passed(), "{:?}", validate(&p).failures);
        let tg = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let k = solve_standard_riccati(&p, &tg).unwrap();
        let kb = solve_abstract_riccati(&k, &p, &tg, AbstractOptions::default()).unwrap();
        let y = solve_y(&k, &kb, &p, &tg).unwrap();
        let lam = solve_lambda(&k, &y, &p, &tg).unwrap();
        let law = build_feedback(&k, &kb, &y, &p, &tg).unwrap();

        let mut r = common::rng(100 + seed);
        let init = InitialCondition::gaussian(
            (0..n).map(|_| DVector::from_fn(d, |_, _| 1.0 + common::rand_mat(&mut r, 1, 1, 1.0)[(0, 0)])).collect(),
            (0..n).map(|_| common::rand_psd(&mut r, d, 0.1)).collect(),
        )
        .unwrap();
        let v = value_function(&init, &k, &kb, &y, &lam, &p);
        let opt = evaluate_cost_moments(&p, law.policy(), &init, &tg, Some(&law)).unwrap();
        assert!((opt.total() - v).abs() < 1e-8 * (1.0 + v.abs()), "seed {seed}: J {} V {v}", opt.total());
        assert!(opt.penalty.abs() < 1e-14);

        let perturbed = [
            law.policy().shifted(0.3),
            law.policy().with_mean_gain_scaled(0.0),
            law.policy().with_state_gain(&vec![DMatrix::from_element(m, d, 0.2); n]),
            law.policy().with_offset(&LabelField::constant(n, &vec![-0.1; m])),
        ];
        for pol in &perturbed {
            let c = evaluate_cost_moments(&p, pol, &init, &tg, Some(&law)).unwrap();
            let gap = c.total() - v;
            assert!(gap > 0.0);
            assert!((gap - c.penalty).abs() < 1e-8 * (1.0 + v.abs()), "seed {seed}: gap {gap} penalty {}", c.penalty);
        }
    }
}

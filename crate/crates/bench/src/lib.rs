//! Fixtures shared by the benchmarks in `benches/`.

use nexlq_core::control::InitialCondition;
use nexlq_core::systemic_risk::{build_model, SystemicRiskConfig};
use nexlq_core::{build_grid, ProblemData, TimeGrid};

/// The heterogeneous systemic-risk model on `n` labels with its initial law
/// and a grid of `steps` steps over the horizon.
pub fn systemic_risk(n: usize, steps: usize) -> (ProblemData, InitialCondition, TimeGrid) {
    let config = SystemicRiskConfig::heterogeneous();
    let grid = build_grid(n).expect("n >= 1");
    let params = config.sample(&grid).expect("preset parameters are valid");
    let p = build_model(&params, &grid).expect("preset model builds");
    let init = config.initial_condition(&grid).expect("preset initial law is valid");
    let tg = TimeGrid::new(0.0, config.t_end, steps).expect("steps >= 1");
    (p, init, tg)
}

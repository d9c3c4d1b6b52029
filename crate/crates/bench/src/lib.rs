//! Fixtures shared by the benchmarks.

use stgp_cli::config::bending;
use stgp_cli::pipeline;
use stgp_core::sim::{generate_measurements, GroundTruth, ScenarioConfig};
use stgp_core::{bind_offgrid, build_prior_factors, FactorSet, Grid, Measurement, Posterior};

/// The bundled scenario resized to `n × k` knots.
pub fn scenario(n: usize, k: usize) -> ScenarioConfig {
    let mut cfg = bending().scenario;
    cfg.n_space = n;
    cfg.n_time = k;
    cfg
}

pub fn measurements(cfg: &ScenarioConfig) -> Vec<Measurement> {
    let truth = GroundTruth::new(cfg).expect("valid scenario");
    generate_measurements(cfg, &truth).expect("measurements")
}

/// Initial grid and full factor set, ready for Gauss-Newton.
pub fn problem(cfg: &ScenarioConfig) -> (Grid, FactorSet) {
    let ms = measurements(cfg);
    let grid = stgp_core::sim::initial_grid(cfg, &ms).expect("initial grid");
    let params = cfg.prior_params();
    let mut factors = build_prior_factors(&grid, &params);
    for m in ms {
        factors.measurements.push(bind_offgrid(m, &grid, &params).expect("in hull"));
    }
    (grid, factors)
}

pub fn posterior(cfg: &ScenarioConfig) -> Posterior {
    pipeline::solve(cfg, &measurements(cfg)).expect("solve")
}

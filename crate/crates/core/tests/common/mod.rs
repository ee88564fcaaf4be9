#![allow(dead_code)]

use agestruct::graph::SpatialGraph;
use agestruct::inference::FitResult;
use agestruct::model::{Hyperparameters, ModelSpec};
use agestruct::simulate::{simulate_dataset, PopulationPolicy, Simulation};

pub const ALPHA: f64 = -0.75;

pub fn spec(s: &str) -> ModelSpec {
    s.parse().unwrap()
}

pub fn grid(rows: usize, cols: usize) -> SpatialGraph {
    if rows == 1 {
        SpatialGraph::path(cols).unwrap()
    } else {
        SpatialGraph::grid(rows, cols).unwrap()
    }
}

/// Simulation with every precision equal to `tau`, λ = 0.5 and 10⁴ people per cell.
pub fn simulate(
    g: &SpatialGraph,
    t: usize,
    k: usize,
    spec: &ModelSpec,
    tau: f64,
    seed: u64,
) -> Simulation {
    let hyper = Hyperparameters::uniform(spec, tau, 0.5);
    simulate_dataset(
        g,
        t,
        k,
        spec,
        &hyper,
        ALPHA,
        &PopulationPolicy::default(),
        seed,
    )
    .unwrap()
}

/// Largest absolute mean difference and largest relative sd difference over
/// the intercept and every latent coordinate.
pub fn agreement(a: &FitResult, b: &FitResult) -> (f64, f64) {
    let mut mean = (a.alpha.mean - b.alpha.mean).abs();
    let mut sd = (a.alpha.sd / b.alpha.sd - 1.0).abs();
    for (x, y) in a.latent.iter().zip(&b.latent) {
        assert_eq!(x.block, y.block);
        for i in 0..x.mean.len() {
            mean = mean.max((x.mean[i] - y.mean[i]).abs());
            sd = sd.max((x.sd[i] / y.sd[i] - 1.0).abs());
        }
    }
    (mean, sd)
}

//! Synthetic datasets with known latent truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{
    constraint_set, interaction_for, leroux_precision, main_structure, sample_with, Block,
    Interaction, InteractionKind, Kriging, StructureMatrix, JITTER,
};
use crate::graph::{connected_components, icar_structure, SpatialGraph};
use crate::model::{predictor_all, Dims, Hyperparameters, LatentState, ModelSpec};
use crate::sparse::{Cholesky, SymMatrix};
use crate::standardize::{expected_counts, stratum_rates, Dataset};

/// How populations `N_ijk` are assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PopulationPolicy {
    /// The same population in every cell.
    Constant { population: f64 },
    /// A fixed total per area and period split across age groups by weight.
    AgePyramid { total: f64, weights: Vec<f64> },
}

impl Default for PopulationPolicy {
    fn default() -> Self {
        PopulationPolicy::Constant { population: 1e4 }
    }
}

impl PopulationPolicy {
    pub fn populations(&self, k: usize) -> Result<Vec<f64>> {
        let out = match self {
            PopulationPolicy::Constant { population } => vec![*population; k],
            PopulationPolicy::AgePyramid { total, weights } => {
                if weights.len() != k {
                    return Err(Error::InvalidInput(format!(
                        "age pyramid has {} weights for {k} age groups",
                        weights.len()
                    )));
                }
                let sum: f64 = weights.iter().sum();
                weights.iter().map(|w| total * w / sum).collect()
            }
        };
        if out.iter().any(|n| !(n.is_finite() && *n > 0.0)) {
            return Err(Error::InvalidInput(
                "population policy must give positive finite populations".into(),
            ));
        }
        Ok(out)
    }
}

/// Reference stratum rates rising log-linearly from 0.002 to 0.02.
pub fn designated_rates(k: usize) -> Vec<f64> {
    let (lo, hi) = (0.002f64.ln(), 0.02f64.ln());
    (0..k)
        .map(|i| {
            let f = if k > 1 {
                i as f64 / (k - 1) as f64
            } else {
                0.0
            };
            (lo + f * (hi - lo)).exp()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: ModelSpec,
    pub hyper: Hyperparameters,
    pub rates: Vec<f64>,
    pub latent: LatentState,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    /// `N_ijk q_k` from the designated rates, in cell order.
    pub expected: Vec<f64>,
    pub truth: Truth,
}

fn prior_precision(structure: &StructureMatrix, tau: f64) -> SymMatrix {
    let m = if structure.is_structured() {
        structure
            .matrix()
            .add_scaled(&SymMatrix::identity(structure.dim()), JITTER)
    } else {
        structure.matrix().clone()
    };
    m.scaled(tau)
}

fn draw_constrained(
    q: &SymMatrix,
    rows: &nalgebra::DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let chol = Cholesky::from_matrix(q)?;
    let x = sample_with(&chol, rng);
    Ok(Kriging::new(&chol, rows).project(&x))
}

/// Draws every latent block from its constrained prior, then counts
/// `O_ijk ~ Poisson(N_ijk q_k exp(η_ijk))`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_dataset(
    g: &SpatialGraph,
    t: usize,
    k: usize,
    spec: &ModelSpec,
    hyper: &Hyperparameters,
    alpha: f64,
    policy: &PopulationPolicy,
    seed: u64,
) -> Result<Simulation> {
    hyper.validate(spec)?;
    let s = g.n_areas();
    if s == 0 || t == 0 || k == 0 {
        return Err(Error::InvalidDimension(format!("S={s}, T={t}, K={k}")));
    }
    let dims = Dims::new(s, t, k);
    let pops = policy.populations(k)?;
    let rates = designated_rates(k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let components = connected_components(g);
    let constraints = constraint_set(spec, s, t, k, &components);
    let r_phi = icar_structure(g);

    let mut latent = LatentState::zeros(spec, dims);
    latent.alpha = alpha;
    let phi_q = leroux_precision(&r_phi, hyper.lambda_phi, hyper.tau_phi)?;
    latent.phi = draw_constrained(&phi_q, constraints[&Block::Phi].rows(), &mut rng)?;
    if let (Some(effect), Some(tau)) = (spec.delta, hyper.tau_delta) {
        let q = prior_precision(&main_structure(effect, t)?, tau);
        latent.delta = Some(draw_constrained(
            &q,
            constraints[&Block::Delta].rows(),
            &mut rng,
        )?);
    }
    if let (Some(effect), Some(tau)) = (spec.gamma, hyper.tau_gamma) {
        let q = prior_precision(&main_structure(effect, k)?, tau);
        latent.gamma = Some(draw_constrained(
            &q,
            constraints[&Block::Gamma].rows(),
            &mut rng,
        )?);
    }
    for which in Interaction::ALL {
        let (Some(ty), Some(tau)) = (spec.interaction(which), hyper.tau_zeta(which)) else {
            continue;
        };
        let structure = interaction_for(InteractionKind::new(which, ty), &r_phi, t, k)?;
        let q = prior_precision(&structure, tau);
        let rows = constraints[&Block::interaction(which)].rows();
        *latent.zeta_mut(which) = Some(draw_constrained(&q, rows, &mut rng)?);
    }

    let eta = predictor_all(spec, &latent, dims)?;
    let mut population = Vec::with_capacity(dims.n_cells());
    let mut expected = Vec::with_capacity(dims.n_cells());
    let mut observed = Vec::with_capacity(dims.n_cells());
    for c in 0..dims.n_cells() {
        let kk = c % k;
        population.push(pops[kk]);
        let e = pops[kk] * rates[kk];
        expected.push(e);
        observed.push(poisson(e * eta[c].exp(), &mut rng)?);
    }
    let dataset = Dataset::new(
        g.area_ids().to_vec(),
        (1..=t).map(|j| format!("t{j}")).collect(),
        (1..=k).map(|a| format!("k{a}")).collect(),
        observed,
        population,
    )?;
    Ok(Simulation {
        dataset,
        expected,
        truth: Truth {
            spec: *spec,
            hyper: hyper.clone(),
            rates,
            latent,
        },
    })
}

fn poisson(mean: f64, rng: &mut ChaCha8Rng) -> Result<u64> {
    if mean <= 0.0 {
        return Ok(0);
    }
    if !mean.is_finite() {
        return Err(Error::InvalidInput(format!(
            "Poisson mean {mean} is not finite"
        )));
    }
    let d = Poisson::new(mean).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(d.sample(rng) as u64)
}

fn poisson_quantile(mean: f64, u: f64) -> Result<u64> {
    if mean <= 0.0 {
        return Ok(0);
    }
    let d =
        statrs::distribution::Poisson::new(mean).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(statrs::distribution::DiscreteCDF::inverse_cdf(&d, u))
}

/// Redraws counts from stratum risks bent by an area-dependent age gradient,
/// `θ̂_ij q_k b_ik / mean_i b_ik` with `b_ik = exp(2 s sin(π (z_k + u_i)))`,
/// `z_k` spanning `[0, 1]` over age groups and `u_i ~ U(0, 1)` per area. At
/// strength 0 the counts are redrawn from the proportional fit of `d`.
pub fn make_proportionality_violation(d: &Dataset, strength: f64, seed: u64) -> Result<Dataset> {
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "crossover strength must be a non-negative number, got {strength}"
        )));
    }
    let dims = d.dims();
    let q = stratum_rates(d)?;
    let std = expected_counts(d, &q)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts: Vec<f64> = (0..dims.s).map(|_| rng.random::<f64>()).collect();
    // Counts come from one uniform per cell through the Poisson quantile, so
    // each count is non-decreasing in its mean across strengths.
    let uniforms: Vec<f64> = (0..dims.n_cells()).map(|_| rng.random::<f64>()).collect();
    let z = |k: usize| {
        if dims.k > 1 {
            k as f64 / (dims.k - 1) as f64
        } else {
            0.0
        }
    };
    let pi = std::f64::consts::PI;
    let bend: Vec<Vec<f64>> = shifts
        .iter()
        .map(|u| {
            (0..dims.k)
                .map(|k| (2.0 * strength * (pi * (z(k) + u)).sin()).exp())
                .collect()
        })
        .collect();
    // Mean one across areas, so the stratum rates stay put and only the
    // shape within each area bends.
    let norm: Vec<f64> = (0..dims.k)
        .map(|k| bend.iter().map(|b| b[k]).sum::<f64>() / dims.s as f64)
        .collect();
    let mut observed = Vec::with_capacity(dims.n_cells());
    for i in 0..dims.s {
        for j in 0..dims.t {
            let sir = std.sir[i * dims.t + j].unwrap_or(1.0);
            for k in 0..dims.k {
                let c = dims.cell(i, j, k);
                let mean = d.population()[c] * q[k] * sir * bend[i][k] / norm[k];
                observed.push(poisson_quantile(mean, uniforms[c])?);
            }
        }
    }
    d.with_observed(observed)
}

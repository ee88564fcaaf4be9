//! Posterior inference for a fixed model specification: the Laplace fitter
//! used for model search, and a block MCMC sampler used to validate it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Hyperparameters, ModelSpec, PriorFamily};

pub mod export;
pub mod laplace;
mod layout;
pub mod mcmc;
pub mod summary;
pub mod waic;

pub use export::{export_effects, EffectRow};
pub use laplace::fit_laplace;
pub use mcmc::{fit_mcmc, McmcOptions};
pub use summary::{posterior_summary, Summary};
pub use waic::{waic, Waic, WaicAccumulator};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Number of posterior draws used for summaries and WAIC.
    pub n_draws: usize,
    pub seed: u64,
    /// Mix Gaussian approximations over a central composite design around the
    /// hyperparameter mode.
    pub ccd: bool,
    /// Skip the outer optimization and condition on these values.
    pub fixed_hyper: Option<Hyperparameters>,
    pub max_outer_iterations: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            n_draws: 1000,
            seed: 1,
            ccd: true,
            fixed_hyper: None,
            max_outer_iterations: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Laplace,
    Mcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSummary {
    pub name: String,
    #[serde(flatten)]
    pub summary: Summary,
}

/// Posterior means and standard deviations of one latent block, in the
/// block's natural index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block: String,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub outer_evaluations: usize,
    pub newton_iterations: usize,
    /// Laplace log marginal at the hyperparameter mode.
    pub log_marginal: Option<f64>,
    /// Hyperparameter mode on the internal `(log τ, logit λ)` scale.
    pub theta_mode: Vec<f64>,
    pub design_points: usize,
    pub max_constraint_residual: f64,
    /// MCMC iterations, zero for the Laplace fitter.
    pub iterations: usize,
    /// MCMC acceptance rates by update.
    pub acceptance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub method: Method,
    pub prior: PriorFamily,
    pub area_ids: Vec<String>,
    pub period_labels: Vec<String>,
    pub age_labels: Vec<String>,
    pub waic: f64,
    pub p_eff: f64,
    pub lppd: f64,
    /// On the σ and λ scales.
    pub hyper: Vec<HyperSummary>,
    pub alpha: Summary,
    pub latent: Vec<BlockSummary>,
    pub diagnostics: Diagnostics,
}

impl FitResult {
    pub fn block(&self, name: &str) -> Option<&BlockSummary> {
        self.latent.iter().find(|b| b.block == name)
    }

    pub fn hyper(&self, name: &str) -> Option<&Summary> {
        self.hyper
            .iter()
            .find(|h| h.name == name)
            .map(|h| &h.summary)
    }
}

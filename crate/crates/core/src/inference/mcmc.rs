//! Metropolis-within-Gibbs sampler. Each latent block is drawn by an
//! independence proposal from the Gaussian approximation of its full
//! conditional on the constraint subspace; hyperparameters move by adaptive
//! random walks on the internal scale.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::laplace::in_box;
use super::layout::{BlockInfo, Problem};
use super::summary::posterior_summary;
use super::waic::WaicAccumulator;
use super::{BlockSummary, Diagnostics, FitResult, HyperSummary, Method};
use crate::error::{Error, Result};
use crate::gmrf::Block;
use crate::graph::SpatialGraph;
use crate::model::{Hyperparameters, ModelSpec, PriorFamily};
use crate::standardize::Dataset;

const TARGET_ACCEPTANCE: f64 = 0.44;
const ADAPT_BATCH: usize = 50;
const BLOCK_NEWTON_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcOptions {
    pub iterations: usize,
    /// Defaults to a quarter of `iterations`.
    pub burn_in: Option<usize>,
    pub thin: usize,
    pub seed: u64,
    /// With the likelihood off the chain targets the prior and `α` stays at 0.
    pub likelihood: bool,
    pub fixed_hyper: Option<Hyperparameters>,
}

impl Default for McmcOptions {
    fn default() -> Self {
        McmcOptions {
            iterations: 20_000,
            burn_in: None,
            thin: 5,
            seed: 1,
            likelihood: true,
            fixed_hyper: None,
        }
    }
}

/// Orthonormal basis of the null space of the rows of `a` (`n` columns).
pub(crate) fn null_space_basis(a: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    let proj = DMatrix::identity(n, n) - a.transpose() * a;
    let svd = proj.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 0.5)
        .collect();
    DMatrix::from_fn(n, keep.len(), |r, c| u[(r, keep[c])])
}

struct BlockSampler {
    info: BlockInfo,
    /// Local block index of every cell.
    cells: Vec<usize>,
    basis: DMatrix<f64>,
    proposed: usize,
    accepted: usize,
}

impl BlockSampler {
    fn new(p: &Problem, info: BlockInfo) -> Self {
        let cells = (0..p.n_cells())
            .map(|c| {
                p.cell_indices(c)
                    .iter()
                    .map(|&i| i as usize)
                    .find(|i| info.range().contains(i))
                    .expect("every cell touches every block")
                    - info.offset
            })
            .collect();
        let basis = null_space_basis(&p.block_constraints(info.block), info.len);
        BlockSampler {
            info,
            cells,
            basis,
            proposed: 0,
            accepted: 0,
        }
    }

    /// Log full conditional of the block at `y`, given per-cell offsets.
    fn log_target(
        &self,
        p: &Problem,
        q: &DMatrix<f64>,
        offsets: &[f64],
        y: &DVector<f64>,
        lik: bool,
    ) -> f64 {
        let mut f = -0.5 * y.dot(&(q * y));
        if lik {
            for (c, &off) in offsets.iter().enumerate() {
                let e = p.expected()[c];
                if e > 0.0 {
                    let h = off + y[self.cells[c]];
                    f += p.observed()[c] * h - e * h.exp();
                }
            }
        }
        f
    }

    /// Gradient and Hessian of the log conditional on the basis coordinates.
    fn derivatives(
        &self,
        p: &Problem,
        q: &DMatrix<f64>,
        offsets: &[f64],
        y: &DVector<f64>,
        lik: bool,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.info.len;
        let mut g = -(q * y);
        let mut w = DVector::<f64>::zeros(n);
        if lik {
            for (c, &off) in offsets.iter().enumerate() {
                let e = p.expected()[c];
                if e > 0.0 {
                    let i = self.cells[c];
                    let mu = e * (off + y[i]).exp();
                    g[i] += p.observed()[c] - mu;
                    w[i] += mu;
                }
            }
        }
        let z = &self.basis;
        let mut h = q.clone();
        for i in 0..n {
            h[(i, i)] += w[i];
        }
        let hz = z.transpose() * h * z;
        (z.transpose() * g, 0.5 * (&hz + hz.transpose()))
    }

    fn update(
        &mut self,
        p: &Problem,
        theta: &[f64],
        x: &mut [f64],
        lik: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let q = p.block_precision_dense(theta, self.info.block);
        let eta = p.eta(x);
        let current = DVector::from_column_slice(&x[self.info.range()]);
        let offsets: Vec<f64> = eta
            .iter()
            .enumerate()
            .map(|(c, h)| h - current[self.cells[c]])
            .collect();
        let z = &self.basis;

        // Mode of the conditional, from a fixed start so the proposal does
        // not depend on the current block value.
        let mut u = DVector::zeros(z.ncols());
        let mut f = self.log_target(p, &q, &offsets, &(z * &u), lik);
        let mut converged = false;
        for _ in 0..BLOCK_NEWTON_ITERATIONS {
            let (g, h) = self.derivatives(p, &q, &offsets, &(z * &u), lik);
            if g.amax() < 1e-9 {
                converged = true;
                break;
            }
            let chol = h.cholesky().ok_or(Error::NotPositiveDefinite)?;
            let step = chol.solve(&g);
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..=super::laplace::MAX_HALVINGS {
                let trial = &u + &step * t;
                let ft = self.log_target(p, &q, &offsets, &(z * &trial), lik);
                if ft >= f {
                    u = trial;
                    f = ft;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || step.amax() * t < 1e-12 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NonConvergence(format!(
                "conditional mode of block {} did not converge",
                self.info.block
            )));
        }
        let (_, h) = self.derivatives(p, &q, &offsets, &(z * &u), lik);
        let l = h.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.l();

        let eps = DVector::from_fn(u.len(), |_, _| StandardNormal.sample(rng));
        let dev = l
            .transpose()
            .solve_upper_triangular(&eps)
            .ok_or(Error::NotPositiveDefinite)?;
        let proposal = &u + dev;
        let log_q = |v: &DVector<f64>| {
            let d = v - &u;
            -0.5 * d.dot(&(&h * &d))
        };
        let u_cur = z.transpose() * &current;
        let y_new = z * &proposal;
        let log_ratio = self.log_target(p, &q, &offsets, &y_new, lik)
            - self.log_target(p, &q, &offsets, &(z * &u_cur), lik)
            + log_q(&u_cur)
            - log_q(&proposal);
        self.proposed += 1;
        if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
            self.accepted += 1;
            x[self.info.range()].copy_from_slice(y_new.as_slice());
        } else {
            // Re-project the kept value to clear accumulated rounding.
            x[self.info.range()].copy_from_slice((z * u_cur).as_slice());
        }
        Ok(())
    }
}

struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Welford {
            n: 0.0,
            mean: vec![0.0; d],
            m2: vec![0.0; d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / self.n;
            *s += delta * (v - *m);
        }
    }

    fn sd(&self) -> Vec<f64> {
        self.m2
            .iter()
            .map(|s| (s / (self.n - 1.0)).max(0.0).sqrt())
            .collect()
    }
}

/// Runs the sampler. `expected` are the expected counts in cell order.
pub fn fit_mcmc(
    data: &Dataset,
    graph: &SpatialGraph,
    expected: &[f64],
    spec: &ModelSpec,
    prior: PriorFamily,
    opts: &McmcOptions,
) -> Result<FitResult> {
    let p = Problem::new(data, graph, expected, spec, prior)?;
    let burn_in = opts.burn_in.unwrap_or(opts.iterations / 4);
    let thin = opts.thin.max(1);
    if opts.iterations <= burn_in || (opts.iterations - burn_in) / thin < 2 {
        return Err(Error::InsufficientDraws(
            (opts.iterations.saturating_sub(burn_in)) / thin,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut theta = match &opts.fixed_hyper {
        Some(h) => h.to_internal(spec)?,
        None => vec![0.0; p.n_params()],
    };
    let mut x = vec![0.0; p.n];
    let alpha_info = p.block(Block::Alpha).unwrap();
    if opts.likelihood {
        let o: f64 = p.observed().iter().sum();
        let e: f64 = p.expected().iter().sum();
        x[alpha_info.offset] = if o > 0.0 { (o / e).ln() } else { 0.0 };
    }
    let mut samplers: Vec<BlockSampler> = p
        .blocks
        .iter()
        .filter(|b| opts.likelihood || b.block != Block::Alpha)
        .map(|&b| BlockSampler::new(&p, b))
        .collect();

    let d = theta.len();
    let mut log_step = vec![0.0_f64; d];
    let mut batch_accepts = vec![0usize; d];
    let mut hyper_accepts = vec![0usize; d];
    let mut hyper_proposed = vec![0usize; d];
    let log_theta_target = |theta: &[f64], x: &[f64]| -> f64 {
        if !in_box(&p, theta) {
            return f64::NEG_INFINITY;
        }
        p.log_hyperprior(theta) + p.log_prior_latent(theta, x)
    };

    let mut acc = WaicAccumulator::new(p.n_cells());
    let mut moments = Welford::new(p.n);
    let mut alpha = Vec::new();
    let mut hyper_draws: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut residual: f64 = 0.0;
    let mut ll = vec![0.0; p.n_cells()];

    for it in 0..opts.iterations {
        for s in samplers.iter_mut() {
            s.update(&p, &theta, &mut x, opts.likelihood, &mut rng)?;
        }
        if opts.fixed_hyper.is_none() {
            let mut current = log_theta_target(&theta, &x);
            for i in 0..d {
                let mut trial = theta.clone();
                let eps: f64 = StandardNormal.sample(&mut rng);
                trial[i] += log_step[i].exp() * eps;
                let lt = log_theta_target(&trial, &x);
                hyper_proposed[i] += 1;
                if lt - current >= 0.0 || rng.random::<f64>().ln() < lt - current {
                    theta = trial;
                    current = lt;
                    hyper_accepts[i] += 1;
                    batch_accepts[i] += 1;
                }
            }
            if it < burn_in && (it + 1) % ADAPT_BATCH == 0 {
                let delta = (1.0 / (((it + 1) / ADAPT_BATCH) as f64).sqrt()).min(0.1);
                for i in 0..d {
                    let rate = batch_accepts[i] as f64 / ADAPT_BATCH as f64;
                    log_step[i] += if rate > TARGET_ACCEPTANCE {
                        delta
                    } else {
                        -delta
                    };
                    batch_accepts[i] = 0;
                }
            }
            if it + 1 == burn_in {
                hyper_accepts.iter_mut().for_each(|a| *a = 0);
                hyper_proposed.iter_mut().for_each(|a| *a = 0);
            }
        }
        if it >= burn_in && (it - burn_in) % thin == 0 {
            residual = residual.max(p.constraint_residual(&x));
            p.pointwise_into(&p.eta(&x), &mut ll);
            acc.push(&ll);
            moments.push(&x);
            alpha.push(x[alpha_info.offset]);
            for (i, param) in p.params.iter().enumerate() {
                hyper_draws[i].push(param.to_report(theta[i]));
            }
        }
    }

    let waic = acc.finish()?;
    let sd = moments.sd();
    let hyper = p
        .params
        .iter()
        .zip(&hyper_draws)
        .map(|(param, draws)| {
            Ok(HyperSummary {
                name: param.report_name().to_string(),
                summary: posterior_summary(draws)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let latent = p
        .blocks
        .iter()
        .filter(|b| b.block != Block::Alpha)
        .map(|b| BlockSummary {
            block: b.block.name().to_string(),
            mean: moments.mean[b.range()].to_vec(),
            sd: sd[b.range()].to_vec(),
        })
        .collect();
    let mut acceptance = BTreeMap::new();
    for s in &samplers {
        acceptance.insert(
            s.info.block.name().to_string(),
            s.accepted as f64 / s.proposed.max(1) as f64,
        );
    }
    if opts.fixed_hyper.is_none() {
        for (i, param) in p.params.iter().enumerate() {
            acceptance.insert(
                param.report_name().to_string(),
                hyper_accepts[i] as f64 / hyper_proposed[i].max(1) as f64,
            );
        }
    }

    Ok(FitResult {
        spec: *spec,
        method: Method::Mcmc,
        prior,
        area_ids: data.area_ids().to_vec(),
        period_labels: data.period_labels().to_vec(),
        age_labels: data.age_labels().to_vec(),
        waic: waic.waic,
        p_eff: waic.p_eff,
        lppd: waic.lppd,
        hyper,
        alpha: posterior_summary(&alpha)?,
        latent,
        diagnostics: Diagnostics {
            converged: true,
            outer_evaluations: 0,
            newton_iterations: 0,
            log_marginal: None,
            theta_mode: theta,
            design_points: 0,
            max_constraint_residual: residual,
            iterations: opts.iterations,
            acceptance,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::leroux_precision;
    use crate::graph::icar_structure;

    #[test]
    fn prior_only_matches_constrained_leroux_covariance() {
        let g = SpatialGraph::path(4).unwrap();
        let n = 4 * 2 * 2;
        let d = Dataset::new(
            g.area_ids().to_vec(),
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            vec![1; n],
            vec![100.0; n],
        )
        .unwrap();
        let spec = ModelSpec::new(None, None, [None; 3]).unwrap();
        let opts = McmcOptions {
            iterations: 40_000,
            burn_in: Some(0),
            thin: 1,
            seed: 7,
            likelihood: false,
            fixed_hyper: Some(Hyperparameters::uniform(&spec, 1.0, 0.5)),
        };
        let e = vec![1.0; n];
        let fit = fit_mcmc(&d, &g, &e, &spec, PriorFamily::Pc, &opts).unwrap();
        // Dense oracle: Σ − Σ1(1ᵀΣ1)⁻¹1ᵀΣ.
        let q = leroux_precision(&icar_structure(&g), 0.5, 1.0)
            .unwrap()
            .to_dense();
        let sigma = q.try_inverse().unwrap();
        let ones = DVector::from_element(4, 1.0);
        let s1 = &sigma * &ones;
        let cond = &sigma - &s1 * s1.transpose() / ones.dot(&s1);
        let phi = fit.block("phi").unwrap();
        for i in 0..4 {
            assert!(phi.mean[i].abs() < 0.05);
            assert!((phi.sd[i] - cond[(i, i)].sqrt()).abs() < 0.05, "{i}");
        }
        assert!(fit.diagnostics.max_constraint_residual < 1e-9);
    }

    #[test]
    fn chain_is_deterministic() {
        let g = SpatialGraph::path(3).unwrap();
        let n = 3 * 2 * 2;
        let d = Dataset::new(
            g.area_ids().to_vec(),
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into()],
            (0..n as u64).map(|c| 4 + c % 3).collect(),
            vec![100.0; n],
        )
        .unwrap();
        let spec: ModelSpec = "delta=rw1".parse().unwrap();
        let e = vec![5.0; n];
        let opts = McmcOptions {
            iterations: 600,
            ..McmcOptions::default()
        };
        let a = fit_mcmc(&d, &g, &e, &spec, PriorFamily::Pc, &opts).unwrap();
        let b = fit_mcmc(&d, &g, &e, &spec, PriorFamily::Pc, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn null_space_basis_is_orthonormal_complement() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]) / 3f64.sqrt();
        let z = null_space_basis(&a, 3);
        assert_eq!(z.ncols(), 2);
        assert!((&a * &z).amax() < 1e-12);
        assert!((z.transpose() * &z - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}

//! Empirical-Bayes Laplace approximation with optional CCD mixing over the
//! hyperparameters.

use std::cell::{Cell, RefCell};

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::layout::Problem;
use super::summary::posterior_summary;
use super::waic::WaicAccumulator;
use super::{BlockSummary, Diagnostics, FitOptions, FitResult, HyperSummary, Method};
use crate::error::{Error, Result};
use crate::gmrf::{Block, Kriging};
use crate::graph::SpatialGraph;
use crate::model::{ModelSpec, PriorFamily};
use crate::sparse::Cholesky;
use crate::standardize::Dataset;

/// Cells whose predictor exceeds this magnitude abort the Newton iteration.
pub const ETA_LIMIT: f64 = 30.0;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
pub const MAX_NEWTON_ITERATIONS: usize = 100;
pub const MAX_HALVINGS: usize = 20;
const MAX_RESTARTS: usize = 4;
const RESTART_TOLERANCE: f64 = 1e-3;
const REFINEMENT_STEPS: usize = 2;

/// Box on the internal scale: `log τ` and `logit λ`.
const LOG_TAU_RANGE: (f64, f64) = (-10.0, 20.0);
const LOGIT_LAMBDA_RANGE: (f64, f64) = (-10.0, 10.0);
const HESSIAN_STEP: f64 = 0.05;
/// Smallest curvature accepted along any hyperparameter direction.
const MIN_CURVATURE: f64 = 0.25;
/// Draws used to estimate predictor variances for the mean correction.
const SHIFT_DRAWS: usize = 256;

/// Constrained posterior mode of the latent field at fixed hyperparameters.
pub(crate) struct Mode {
    pub x: Vec<f64>,
    pub chol: Cholesky,
    pub kriging: Kriging,
    pub iterations: usize,
    pub log_marginal: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn find_mode(p: &Problem, theta: &[f64], start: &[f64]) -> Result<Mode> {
    let prec = p.precision(theta);
    let objective = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        let eta = p.eta(x);
        if eta.iter().any(|h| !(h.abs() <= ETA_LIMIT)) {
            return None;
        }
        Some((p.loglik_kernel(&eta) - 0.5 * prec.quad(x), eta))
    };
    let mut x = start.to_vec();
    p.project_euclidean(&mut x);
    let (mut f, mut eta) = match objective(&x) {
        Some(v) => v,
        None => {
            x = vec![0.0; p.n];
            objective(&x).expect("zero predictor is in range")
        }
    };

    let mut iterations = 0;
    let mut small_step = false;
    let mut lambda = DVector::zeros(p.constraints.nrows());
    loop {
        let mu = p.means(&eta);
        let values = p.hessian_values(&prec, &mu);
        let chol = p.symbolic.factorize(&values)?;
        let kriging = Kriging::with_rows(&chol, p.constraints.clone());
        if !kriging.is_valid() {
            return Err(Error::NotPositiveDefinite);
        }
        let g = p.gradient(&prec, &x, &mu);
        let mut gp = g.clone();
        p.project_euclidean(&mut gp);
        let gmax = max_abs(&gp);
        if gmax < GRADIENT_TOLERANCE || small_step {
            let loglik = p.loglik_full(&eta);
            let log_marginal = p.log_hyperprior(theta) + 0.5 * p.prior_log_det(theta) + loglik
                - 0.5 * prec.quad(&x)
                - 0.5 * (chol.log_det() + kriging.log_det());
            return Ok(Mode {
                x,
                chol,
                kriging,
                iterations,
                log_marginal,
            });
        }
        if iterations >= MAX_NEWTON_ITERATIONS {
            return Err(Error::NonConvergence(format!(
                "Newton iteration stopped after {iterations} steps with gradient {gmax:e}"
            )));
        }
        iterations += 1;

        let step = refined_step(p, &prec, &mu, &chol, &kriging, &g, &mut lambda);
        let smax = max_abs(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            if let Some((ft, et)) = objective(&trial) {
                // Improvements below rounding in `f` count as progress.
                if ft >= f - 1e-12 * (1.0 + f.abs()) || t * smax < 1e-8 {
                    x = trial;
                    f = ft;
                    eta = et;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence(format!(
                "line search failed at Newton step {iterations} (gradient {gmax:e}); predictor may exceed |η| > {ETA_LIMIT}"
            )));
        }
        small_step = t * smax < 1e-10;
        log::trace!("newton {iterations}: gradient {gmax:e} step {smax:e} t {t} f {f}");
    }
}

/// Constrained Newton step with iterative refinement on the full system
/// `H s + Aᵀ λ = g, A s = 0`. `lambda` carries the multipliers between
/// iterations: the jittered null directions make `H` badly conditioned, and
/// solving against `g` directly amplifies rounding by the multiplier size.
fn refined_step(
    p: &Problem,
    prec: &super::layout::Precision<'_>,
    mu: &[f64],
    chol: &Cholesky,
    kriging: &Kriging,
    g: &[f64],
    lambda: &mut DVector<f64>,
) -> Vec<f64> {
    let a = p.constraints.as_ref();
    let shifted = |lam: &DVector<f64>| -> Vec<f64> {
        if lam.is_empty() {
            return g.to_vec();
        }
        let atl = a.transpose() * lam;
        g.iter().zip(atl.iter()).map(|(x, y)| x - y).collect()
    };
    let (mut step, coef) = kriging.split(&chol.solve(&shifted(lambda)));
    *lambda += coef;
    for _ in 0..REFINEMENT_STEPS {
        let hs = p.hessian_matvec(prec, mu, &step);
        let r: Vec<f64> = shifted(lambda)
            .iter()
            .zip(&hs)
            .map(|(a, b)| a - b)
            .collect();
        let (delta, coef) = kriging.split(&chol.solve(&r));
        *lambda += coef;
        for (s, d) in step.iter_mut().zip(&delta) {
            *s += d;
        }
    }
    step
}

pub(crate) fn in_box(p: &Problem, theta: &[f64]) -> bool {
    theta.iter().zip(&p.params).all(|(&v, &param)| {
        let (lo, hi) = if param == crate::model::HyperParam::LambdaPhi {
            LOGIT_LAMBDA_RANGE
        } else {
            LOG_TAU_RANGE
        };
        (lo..=hi).contains(&v)
    })
}

/// Negative Laplace log marginal with warm starts between evaluations.
struct Objective<'p> {
    p: &'p Problem,
    warm: RefCell<Vec<f64>>,
    evaluations: Cell<usize>,
}

impl Objective<'_> {
    fn eval(&self, theta: &[f64]) -> Option<Mode> {
        self.evaluations.set(self.evaluations.get() + 1);
        let start = self.warm.borrow().clone();
        match find_mode(self.p, theta, &start) {
            Ok(m) if m.log_marginal.is_finite() => {
                self.warm.replace(m.x.clone());
                Some(m)
            }
            Ok(_) => None,
            Err(e) => {
                log::debug!("evaluation at {theta:?} failed: {e}");
                None
            }
        }
    }

    fn cost(&self, theta: &[f64]) -> f64 {
        if !in_box(self.p, theta) {
            let excess: f64 = theta.iter().map(|v| (v.abs() - 10.0).max(0.0)).sum();
            return 1e12 * (1.0 + excess);
        }
        self.eval(theta).map_or(1e12, |m| -m.log_marginal)
    }
}

struct Cost<'a, 'p>(&'a Objective<'p>);

impl CostFunction for Cost<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.0.cost(theta))
    }
}

fn nelder_mead(
    obj: &Objective<'_>,
    start: &[f64],
    step: f64,
    max_iters: u64,
) -> Result<(Vec<f64>, f64, bool)> {
    let d = start.len();
    let mut simplex = vec![start.to_vec()];
    for i in 0..d {
        let mut v = start.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-6)
        .map_err(|e| Error::NonConvergence(e.to_string()))?;
    let res = Executor::new(Cost(obj), solver)
        .configure(|s| s.max_iters(max_iters))
        .run()
        .map_err(|e| Error::NonConvergence(e.to_string()))?;
    let state = res.state();
    let best = state
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::NonConvergence("optimizer returned no parameters".into()))?;
    let converged = state.get_iter() < max_iters;
    Ok((best, state.get_best_cost(), converged))
}

/// Finite-difference Hessian of the log marginal at `theta`.
fn marginal_hessian(obj: &Objective<'_>, theta: &[f64], centre: f64) -> DMatrix<f64> {
    let d = theta.len();
    let h = HESSIAN_STEP;
    let f = |offsets: &[(usize, f64)]| -> f64 {
        let mut t = theta.to_vec();
        for &(i, s) in offsets {
            t[i] += s;
        }
        obj.eval(&t).map_or(f64::NAN, |m| m.log_marginal)
    };
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let fp = f(&[(i, h)]);
        let fm = f(&[(i, -h)]);
        hess[(i, i)] = (fp - 2.0 * centre + fm) / (h * h);
    }
    for i in 0..d {
        for j in i + 1..d {
            let v = (f(&[(i, h), (j, h)]) - f(&[(i, h), (j, -h)]) - f(&[(i, -h), (j, h)])
                + f(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Covariance and its square root from the negative Hessian, with curvature
/// floored along flat directions.
fn covariance_from_hessian(hess: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = hess.nrows();
    let neg = -hess.clone();
    let neg = if neg.iter().all(|v| v.is_finite()) {
        neg
    } else {
        DMatrix::identity(d, d) * MIN_CURVATURE
    };
    let eig = nalgebra::SymmetricEigen::new(0.5 * (&neg + neg.transpose()));
    let mut sqrt = DMatrix::zeros(d, d);
    let mut cov = DMatrix::zeros(d, d);
    for k in 0..d {
        let lam = eig.eigenvalues[k].max(MIN_CURVATURE);
        let v = eig.eigenvectors.column(k);
        sqrt.column_mut(k).copy_from(&(v / lam.sqrt()));
        cov += v * v.transpose() / lam;
    }
    (cov, sqrt)
}

struct DesignPoint {
    weight: f64,
    mode: Mode,
}

/// First-order skewness correction to the Gaussian mean,
/// `½ Σ Xᵀ (f‴ ∘ Var η)` with `f‴ = -μ` for the Poisson likelihood. Without
/// it the intercept sits high by about half the average predictor variance,
/// which is many posterior sds once the lattice is large.
fn mean_shift(p: &Problem, mode: &Mode, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mu = p.means(&p.eta(&mode.x));
    let mut var = vec![0.0; p.n_cells()];
    for _ in 0..SHIFT_DRAWS {
        let z: Vec<f64> = (0..p.n).map(|_| StandardNormal.sample(rng)).collect();
        let dev = mode.kriging.project(&mode.chol.correlate(&z));
        for (v, e) in var.iter_mut().zip(p.eta(&dev)) {
            *v += e * e;
        }
    }
    let v: Vec<f64> = var
        .iter()
        .zip(&mu)
        .map(|(s, m)| -0.5 * m * s / SHIFT_DRAWS as f64)
        .collect();
    mode.kriging.project(&mode.chol.solve(&p.scatter(&v)))
}

/// Fits `spec` by the Laplace approximation. `expected` are the expected
/// counts `E_ijk` in cell order.
pub fn fit_laplace(
    data: &Dataset,
    graph: &SpatialGraph,
    expected: &[f64],
    spec: &ModelSpec,
    prior: PriorFamily,
    opts: &FitOptions,
) -> Result<FitResult> {
    let p = Problem::new(data, graph, expected, spec, prior)?;
    let d = p.n_params();
    let obj = Objective {
        p: &p,
        warm: RefCell::new(vec![0.0; p.n]),
        evaluations: Cell::new(0),
    };

    let (theta_star, outer_converged, sqrt_cov) = match &opts.fixed_hyper {
        Some(h) => (h.to_internal(spec)?, true, None),
        None => {
            let start = vec![0.0; d];
            let (mut best, mut cost, _) =
                nelder_mead(&obj, &start, 1.0, opts.max_outer_iterations)?;
            // Restarts from the best point guard against early simplex
            // collapse; the mode is accepted once a restart converges without
            // moving the objective.
            let mut converged = false;
            for _ in 0..MAX_RESTARTS {
                let (again, next, conv) =
                    nelder_mead(&obj, &best, 0.25, opts.max_outer_iterations)?;
                log::debug!("restart: {cost} -> {next} (converged: {conv})");
                let gain = cost - next;
                if next < cost {
                    best = again;
                    cost = next;
                }
                if conv && gain < RESTART_TOLERANCE {
                    converged = true;
                    break;
                }
            }
            if cost >= 1e12 {
                return Err(Error::NonConvergence(
                    "no hyperparameter value gave a convergent inner optimization".into(),
                ));
            }
            (best, converged, Some(()))
        }
    };

    let centre = obj.eval(&theta_star).ok_or_else(|| {
        Error::NonConvergence(format!(
            "inner Newton iteration failed at θ = {theta_star:?}"
        ))
    })?;
    let lm_star = centre.log_marginal;
    let newton_iterations = centre.iterations;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (points, hyper_draws) = match sqrt_cov {
        None => (
            vec![DesignPoint {
                weight: 1.0,
                mode: centre,
            }],
            vec![theta_star.clone(); opts.n_draws],
        ),
        Some(()) => {
            let hess = marginal_hessian(&obj, &theta_star, lm_star);
            log::debug!("mode {theta_star:?} log marginal {lm_star} hessian {hess}");
            let (_, sqrt) = covariance_from_hessian(&hess);
            let hyper_draws: Vec<Vec<f64>> = (0..opts.n_draws)
                .map(|_| {
                    let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                    let t = DVector::from_column_slice(&theta_star) + &sqrt * z;
                    t.as_slice().to_vec()
                })
                .collect();
            let mut points = vec![DesignPoint {
                weight: 1.0 / (d as f64 + 1.0),
                mode: centre,
            }];
            if opts.ccd {
                let f = (d as f64 + 1.0).sqrt();
                let wa = 1.0 / (2.0 * (d as f64 + 1.0));
                for k in 0..d {
                    for sign in [1.0, -1.0] {
                        let t =
                            DVector::from_column_slice(&theta_star) + sqrt.column(k) * (sign * f);
                        obj.warm.replace(points[0].mode.x.clone());
                        if let Some(m) = obj.eval(t.as_slice()) {
                            let w = wa * (m.log_marginal - lm_star + 0.5 * f * f).exp();
                            if w.is_finite() && w > 0.0 {
                                points.push(DesignPoint { weight: w, mode: m });
                            }
                        }
                    }
                }
            }
            (points, hyper_draws)
        }
    };
    let mut shift_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    shift_rng.set_stream(1);
    let centres: Vec<Vec<f64>> = points
        .iter()
        .map(|pt| {
            let shift = mean_shift(&p, &pt.mode, &mut shift_rng);
            pt.mode.x.iter().zip(&shift).map(|(a, b)| a + b).collect()
        })
        .collect();
    let total: f64 = points.iter().map(|p| p.weight).sum();
    let weights: Vec<f64> = points.iter().map(|p| p.weight / total).collect();

    // Latent draws from the (mixture) Gaussian approximation.
    let m = opts.n_draws.max(2);
    let mut counts = vec![0usize; points.len()];
    for _ in 0..m {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = points.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        counts[k] += 1;
    }
    let mut acc = WaicAccumulator::new(p.n_cells());
    let mut sum = vec![0.0; p.n];
    let mut sumsq = vec![0.0; p.n];
    let mut alpha = Vec::with_capacity(m);
    let mut residual: f64 = 0.0;
    let mut ll = vec![0.0; p.n_cells()];
    let alpha_idx = p.block(Block::Alpha).unwrap().offset;
    for ((pt, centre), &count) in points.iter().zip(&centres).zip(&counts) {
        for _ in 0..count {
            let z: Vec<f64> = (0..p.n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dev = pt.mode.kriging.project(&pt.mode.chol.correlate(&z));
            let x: Vec<f64> = centre.iter().zip(&dev).map(|(a, b)| a + b).collect();
            residual = residual.max(p.constraint_residual(&x));
            p.pointwise_into(&p.eta(&x), &mut ll);
            acc.push(&ll);
            for i in 0..p.n {
                sum[i] += x[i];
                sumsq[i] += x[i] * x[i];
            }
            alpha.push(x[alpha_idx]);
        }
    }
    residual = residual.max(p.constraint_residual(&points[0].mode.x));
    let waic = acc.finish()?;
    let mf = m as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / mf).collect();
    let sd: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(q, mu)| ((q - mf * mu * mu) / (mf - 1.0)).max(0.0).sqrt())
        .collect();

    let hyper = p
        .params
        .iter()
        .enumerate()
        .map(|(i, &param)| {
            let draws: Vec<f64> = hyper_draws.iter().map(|t| param.to_report(t[i])).collect();
            Ok(HyperSummary {
                name: param.report_name().to_string(),
                summary: posterior_summary(&draws)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let latent = p
        .blocks
        .iter()
        .filter(|b| b.block != Block::Alpha)
        .map(|b| BlockSummary {
            block: b.block.name().to_string(),
            mean: mean[b.range()].to_vec(),
            sd: sd[b.range()].to_vec(),
        })
        .collect();

    Ok(FitResult {
        spec: *spec,
        method: Method::Laplace,
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
            converged: outer_converged,
            outer_evaluations: obj.evaluations.get(),
            newton_iterations,
            log_marginal: Some(lm_star),
            theta_mode: theta_star,
            design_points: points.len(),
            max_constraint_residual: residual,
            iterations: 0,
            acceptance: Default::default(),
        },
    })
}

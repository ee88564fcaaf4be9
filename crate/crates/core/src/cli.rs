//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::inference::{export_effects, fit_laplace, fit_mcmc, FitOptions, FitResult, McmcOptions};
use crate::io;
use crate::model::{enumerate_models, Hyperparameters, ModelSpec, PriorFamily};
use crate::search::{run_search, write_summary, SearchOptions};
use crate::simulate::{make_proportionality_violation, simulate_dataset, PopulationPolicy};
use crate::standardize::{
    expected_counts, proportionality_check, stratum_rates, Dataset, DEFAULT_MIN_POINTS,
    DEFAULT_R2_THRESHOLD,
};

pub const EXIT_INPUT: u8 = 1;
pub const EXIT_VIOLATIONS: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "agestruct",
    version,
    about = "Age-structured spatio-temporal models for small-area counts"
)]
pub struct Cli {
    /// JSON configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Standardize the data and run the proportionality diagnostic.
    Check(CheckArgs),
    /// Fit one model.
    Fit(FitArgs),
    /// Fit many models and rank them by WAIC.
    Search(SearchArgs),
    /// Write a synthetic dataset with its ground truth.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Default)]
pub struct InputArgs {
    /// Dataset CSV `area_id,period,age_group,observed,population`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Adjacency file, one `<area_id>: <neighbours>` record per line.
    #[arg(long)]
    pub adjacency: Option<PathBuf>,
    /// External reference rates, CSV `age_group,q`. Estimated from the data
    /// when absent.
    #[arg(long)]
    pub rates: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub min_points: Option<usize>,
    #[arg(long)]
    pub r2_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub spec: Option<String>,
    /// `pc` or `noninformative`.
    #[arg(long)]
    pub prior: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub draws: Option<usize>,
    /// Also run the MCMC sampler and report its agreement with the Laplace fit.
    #[arg(long)]
    pub mcmc_check: bool,
    #[arg(long)]
    pub mcmc_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Fit the whole model space.
    #[arg(long, conflicts_with = "specs_file")]
    pub full: bool,
    /// One spec per line.
    #[arg(long)]
    pub specs_file: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Skip specs already in the results file.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prior: Option<String>,
    #[arg(long)]
    pub draws: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub spec: Option<String>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub periods: Option<usize>,
    #[arg(long)]
    pub ages: Option<usize>,
    /// Crossover strength of an injected proportionality violation.
    #[arg(long)]
    pub violation: Option<f64>,
}

/// Simulation settings of the configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub rows: usize,
    pub cols: usize,
    pub periods: usize,
    pub ages: usize,
    pub spec: String,
    pub alpha: f64,
    /// Every precision when `hyper` is absent.
    pub tau: f64,
    pub lambda: f64,
    pub hyper: Option<Hyperparameters>,
    pub population: PopulationPolicy,
    pub violation: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            rows: 4,
            cols: 4,
            periods: 4,
            ages: 5,
            spec: "delta=rw1;gamma=rw1;z1=II".into(),
            alpha: -0.75,
            tau: 10.0,
            lambda: 0.5,
            hyper: None,
            population: PopulationPolicy::default(),
            violation: 0.0,
        }
    }
}

/// The configuration document. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    pub rates: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub spec: Option<String>,
    pub prior: Option<String>,
    pub draws: Option<usize>,
    pub min_points: Option<usize>,
    pub r2_threshold: Option<f64>,
    pub jobs: Option<usize>,
    pub mcmc_iterations: Option<usize>,
    pub specs_file: Option<PathBuf>,
    pub simulate: SimulationConfig,
}

struct Inputs {
    data: Dataset,
    graph: SpatialGraph,
    expected: Vec<f64>,
    q: Vec<f64>,
    out: PathBuf,
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| Error::InvalidInput(format!("--{name} is required")))
}

fn load(args: InputArgs, cfg: &Config) -> Result<Inputs> {
    let data_path = required(args.data, &cfg.data, "data")?;
    let graph = io::read_graph(&required(args.adjacency, &cfg.adjacency, "adjacency")?)?;
    let data = io::read_dataset(&data_path, Some(&graph))?;
    let q = match args.rates.or_else(|| cfg.rates.clone()) {
        Some(p) => io::read_rates(&p, &data)?,
        None => stratum_rates(&data)?,
    };
    let expected = expected_counts(&data, &q)?.expected;
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;
    Ok(Inputs {
        data,
        graph,
        expected,
        q,
        out,
    })
}

fn prior_of(flag: Option<String>, cfg: &Config) -> Result<PriorFamily> {
    flag.or_else(|| cfg.prior.clone())
        .map_or(Ok(PriorFamily::Pc), |p| p.parse())
}

fn cmd_check(args: CheckArgs, cfg: &Config) -> Result<u8> {
    let min_points = args
        .min_points
        .or(cfg.min_points)
        .unwrap_or(DEFAULT_MIN_POINTS);
    let threshold = args
        .r2_threshold
        .or(cfg.r2_threshold)
        .unwrap_or(DEFAULT_R2_THRESHOLD);
    let inp = load(args.input, cfg)?;
    let report = proportionality_check(&inp.data, &inp.q, min_points, threshold)?;
    io::write_report(&inp.out.join("proportionality.csv"), &report, &inp.data)?;
    io::write_points(
        &inp.out.join("proportionality_points.csv"),
        &report,
        &inp.data,
    )?;
    io::write_rates(&inp.out.join("rates.csv"), &inp.data, &inp.q)?;
    println!(
        "{} of {} assessed cells flagged ({:.1}%)",
        report.n_flagged(),
        report.n_assessed(),
        100.0 * report.flagged_fraction()
    );
    Ok(if report.n_flagged() > 0 {
        EXIT_VIOLATIONS
    } else {
        0
    })
}

fn write_fit(out: &Path, stem: &str, fit: &FitResult) -> Result<()> {
    io::write_json(&out.join(format!("{stem}.json")), fit)?;
    io::write_effects(
        &out.join(format!("{stem}_effects.csv")),
        &export_effects(fit),
    )
}

fn cmd_fit(args: FitArgs, cfg: &Config) -> Result<u8> {
    let spec: ModelSpec = args
        .spec
        .or_else(|| cfg.spec.clone())
        .ok_or_else(|| Error::InvalidInput("--spec is required".into()))?
        .parse()?;
    let prior = prior_of(args.prior, cfg)?;
    let seed = args.seed.or(cfg.seed).unwrap_or(1);
    let inp = load(args.input, cfg)?;
    let opts = FitOptions {
        seed,
        n_draws: args
            .draws
            .or(cfg.draws)
            .unwrap_or(FitOptions::default().n_draws),
        ..FitOptions::default()
    };
    let fit = fit_laplace(&inp.data, &inp.graph, &inp.expected, &spec, prior, &opts)?;
    write_fit(&inp.out, "fit", &fit)?;
    println!("{spec}: WAIC {:.3}, p_eff {:.2}", fit.waic, fit.p_eff);

    if args.mcmc_check {
        let mopts = McmcOptions {
            seed,
            iterations: args
                .mcmc_iterations
                .or(cfg.mcmc_iterations)
                .unwrap_or(McmcOptions::default().iterations),
            ..McmcOptions::default()
        };
        let mc = fit_mcmc(&inp.data, &inp.graph, &inp.expected, &spec, prior, &mopts)?;
        write_fit(&inp.out, "fit_mcmc", &mc)?;
        let mut mean_gap = (fit.alpha.mean - mc.alpha.mean).abs();
        let mut sd_gap = (fit.alpha.sd / mc.alpha.sd - 1.0).abs();
        for (a, b) in fit.latent.iter().zip(&mc.latent) {
            for i in 0..a.mean.len() {
                mean_gap = mean_gap.max((a.mean[i] - b.mean[i]).abs());
                sd_gap = sd_gap.max((a.sd[i] / b.sd[i] - 1.0).abs());
            }
        }
        println!(
            "MCMC check: largest mean difference {mean_gap:.4}, largest relative sd difference {:.1}%",
            100.0 * sd_gap
        );
    }
    if !fit.diagnostics.converged {
        eprintln!(
            "hyperparameter optimization did not converge after {} evaluations (mode {:?})",
            fit.diagnostics.outer_evaluations, fit.diagnostics.theta_mode
        );
        return Ok(EXIT_NOT_CONVERGED);
    }
    Ok(0)
}

fn cmd_search(args: SearchArgs, cfg: &Config) -> Result<u8> {
    let specs = match args.specs_file.clone().or_else(|| cfg.specs_file.clone()) {
        Some(p) if !args.full => io::parse_specs(&fs::read_to_string(p)?)?,
        _ if args.full => enumerate_models(),
        _ => {
            return Err(Error::InvalidInput(
                "either --full or --specs-file is required".into(),
            ))
        }
    };
    let prior = prior_of(args.prior, cfg)?;
    let inp = load(args.input, cfg)?;
    let opts = SearchOptions {
        jobs: args.jobs.or(cfg.jobs).unwrap_or(0),
        seed: args.seed.or(cfg.seed).unwrap_or(1),
        fit: FitOptions {
            n_draws: args
                .draws
                .or(cfg.draws)
                .unwrap_or(FitOptions::default().n_draws),
            ..FitOptions::default()
        },
        results_path: Some(inp.out.join("search_results.csv")),
        resume: args.resume,
    };
    let report = run_search(&inp.data, &inp.graph, &inp.expected, &specs, prior, &opts)?;
    write_summary(&inp.out.join("search_summary.csv"), &report)?;
    let failed = report.rows.iter().filter(|r| !r.converged).count();
    println!(
        "{} models fitted, {failed} not converged; best {}",
        report.rows.len(),
        report.overall_best
    );
    Ok(0)
}

fn cmd_simulate(args: SimulateArgs, cfg: &Config) -> Result<u8> {
    let mut sc = cfg.simulate.clone();
    if let Some(s) = args.spec {
        sc.spec = s;
    }
    sc.rows = args.rows.unwrap_or(sc.rows);
    sc.cols = args.cols.unwrap_or(sc.cols);
    sc.periods = args.periods.unwrap_or(sc.periods);
    sc.ages = args.ages.unwrap_or(sc.ages);
    sc.violation = args.violation.unwrap_or(sc.violation);
    let seed = args.seed.or(cfg.seed).unwrap_or(1);
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out)?;

    let spec: ModelSpec = sc.spec.parse()?;
    let graph = SpatialGraph::grid(sc.rows, sc.cols)?;
    let hyper = sc
        .hyper
        .clone()
        .unwrap_or_else(|| Hyperparameters::uniform(&spec, sc.tau, sc.lambda));
    let sim = simulate_dataset(
        &graph,
        sc.periods,
        sc.ages,
        &spec,
        &hyper,
        sc.alpha,
        &sc.population,
        seed,
    )?;
    let data = if sc.violation > 0.0 {
        make_proportionality_violation(&sim.dataset, sc.violation, seed)?
    } else {
        sim.dataset
    };
    io::write_dataset(&out.join("data.csv"), &data)?;
    fs::write(out.join("adjacency.txt"), graph.to_adjacency_text())?;
    io::write_rates(&out.join("rates.csv"), &data, &sim.truth.rates)?;
    io::write_json(&out.join("truth.json"), &sim.truth)?;
    println!(
        "wrote {} rows for {} to {}",
        data.dims().n_cells(),
        spec,
        out.display()
    );
    Ok(0)
}

pub fn execute(cli: Cli) -> Result<u8> {
    let cfg: Config = match &cli.config {
        Some(p) => io::read_json(p)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Check(a) => cmd_check(a, &cfg),
        Command::Fit(a) => cmd_fit(a, &cfg),
        Command::Search(a) => cmd_search(a, &cfg),
        Command::Simulate(a) => cmd_simulate(a, &cfg),
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NonConvergence(_) => EXIT_NOT_CONVERGED,
                _ => EXIT_INPUT,
            })
        }
    }
}

//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when any
//! criterion fails.

mod common;

use std::collections::HashMap;
use std::time::{Duration, Instant};

use clap::Parser;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agestruct::cli::{execute, Cli};
use agestruct::gmrf::{
    constraint_set, interaction_for, rw1_structure, Block, Interaction, InteractionKind,
    InteractionType,
};
use agestruct::graph::{connected_components, icar_structure, SpatialGraph};
use agestruct::inference::{fit_laplace, fit_mcmc, waic, FitOptions, McmcOptions};
use agestruct::model::{enumerate_models, Hyperparameters, ModelSpec, PriorFamily};
use agestruct::search::read_results;
use agestruct::simulate::make_proportionality_violation;
use agestruct::standardize::{
    expected_counts, proportionality_check, stratum_rates, Dataset, DEFAULT_MIN_POINTS,
    DEFAULT_R2_THRESHOLD,
};

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn enumeration() -> Outcome {
    let start = Instant::now();
    let specs = enumerate_models();
    let elapsed = start.elapsed();
    let mut order: Vec<[bool; 5]> = Vec::new();
    let mut counts: HashMap<[bool; 5], usize> = HashMap::new();
    for s in &specs {
        let key = [
            s.delta.is_some(),
            s.gamma.is_some(),
            s.zeta[0].is_some(),
            s.zeta[1].is_some(),
            s.zeta[2].is_some(),
        ];
        if !counts.contains_key(&key) {
            order.push(key);
        }
        *counts.entry(key).or_default() += 1;
    }
    let got: Vec<usize> = order.iter().map(|k| counts[k]).collect();
    let want = vec![2, 2, 4, 8, 16, 8, 16, 16, 64, 64, 64, 256];
    let mut distinct: Vec<String> = specs.iter().map(|s| s.to_string()).collect();
    distinct.sort();
    distinct.dedup();
    let pass = specs.len() == 520
        && distinct.len() == 520
        && got == want
        && within(elapsed, Duration::from_secs(1));
    outcome(
        pass,
        format!(
            "{} specs, family counts {got:?}, {elapsed:.2?}",
            specs.len()
        ),
    )
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let max = eig.amax().max(1.0);
    eig.iter().filter(|&&v| v > 1e-9 * max).count()
}

/// Null-space size by the rule: unstructured operand dimension for mixed
/// types, sum of dimensions minus one for two structured operands.
fn expected_deficiency(
    which: Interaction,
    ty: InteractionType,
    s: usize,
    t: usize,
    k: usize,
) -> usize {
    use InteractionType::*;
    let (left, right) = match which {
        Interaction::SpaceTime => (s, t),
        Interaction::SpaceAge => (s, k),
        Interaction::TimeAge => (k, t),
    };
    match ty {
        I => 0,
        // Space-time and space-age: II is structured in the second index,
        // time-age: II is structured in age, the first index.
        II if which == Interaction::TimeAge => right,
        II => left,
        III if which == Interaction::TimeAge => left,
        III => right,
        IV => left + right - 1,
    }
}

fn structure_fidelity() -> Outcome {
    let start = Instant::now();
    let r = rw1_structure(7).unwrap().matrix().to_dense();
    let eq = DMatrix::from_fn(7, 7, |i, j| match (i, j) {
        (0, 0) | (6, 6) => 1.0,
        (i, j) if i == j => 2.0,
        (i, j) if i.abs_diff(j) == 1 => -1.0,
        _ => 0.0,
    });
    let mut mismatches = Vec::new();
    let mut checked = 0;
    for s in 2..=6 {
        let g = SpatialGraph::path(s).unwrap();
        let r_phi = icar_structure(&g);
        for t in 2..=6 {
            for k in 2..=6 {
                for which in Interaction::ALL {
                    for ty in InteractionType::ALL {
                        let m = interaction_for(InteractionKind::new(which, ty), &r_phi, t, k)
                            .unwrap()
                            .matrix()
                            .to_dense();
                        let want = m.nrows() - expected_deficiency(which, ty, s, t, k);
                        checked += 1;
                        if numerical_rank(&m) != want {
                            mismatches.push(format!("{which:?} {ty} S={s} T={t} K={k}"));
                        }
                    }
                }
            }
        }
    }
    // Spot values of the space-time rule, written out.
    let st = |ty, s, t| expected_deficiency(Interaction::SpaceTime, ty, s, t, 2);
    let table = st(InteractionType::II, 4, 5) == 4
        && st(InteractionType::III, 4, 5) == 5
        && st(InteractionType::IV, 4, 5) == 8;
    let elapsed = start.elapsed();
    let pass =
        r == eq && mismatches.is_empty() && table && within(elapsed, Duration::from_secs(10));
    outcome(
        pass,
        format!(
            "rw1(7) exact: {}, {checked} interaction matrices, {} rank mismatches {:?}, {elapsed:.2?}",
            r == eq,
            mismatches.len(),
            mismatches.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn constraint_correctness() -> Outcome {
    // Fitted modes and draws for every spec.
    let g = grid(2, 2);
    let truth = spec("delta=rw1;gamma=rw1;z1=II;z2=II;z3=II");
    let sim = simulate(&g, 3, 3, &truth, 10.0, 17);
    let opts = FitOptions {
        n_draws: 200,
        ..FitOptions::default()
    };
    let mut worst_fit: f64 = 0.0;
    let mut failed = Vec::new();
    for sp in enumerate_models() {
        match fit_laplace(&sim.dataset, &g, &sim.expected, &sp, PriorFamily::Pc, &opts) {
            Ok(f) => worst_fit = worst_fit.max(f.diagnostics.max_constraint_residual),
            Err(e) => failed.push(format!("{sp}: {e}")),
        }
    }

    // Constraint rows against a numerically computed null space.
    let (s, t, k) = (4, 5, 3);
    let graph = SpatialGraph::grid(2, 2).unwrap();
    let r_phi = icar_structure(&graph);
    let components = connected_components(&graph);
    let mut worst_null: f64 = 0.0;
    for which in Interaction::ALL {
        for ty in InteractionType::ALL {
            let mut z = [None; 3];
            z[which.index()] = Some(ty);
            let sp = ModelSpec::new(
                Some(agestruct::model::MainEffect::Rw1),
                Some(agestruct::model::MainEffect::Rw1),
                z,
            )
            .unwrap();
            let r = interaction_for(InteractionKind::new(which, ty), &r_phi, t, k)
                .unwrap()
                .matrix()
                .to_dense();
            let cons = constraint_set(&sp, s, t, k, &components);
            let a = cons[&Block::interaction(which)].rows().clone();
            let eig = r.clone().symmetric_eigen();
            let max = eig.eigenvalues.amax().max(1.0);
            let null: Vec<usize> = (0..r.nrows())
                .filter(|&i| eig.eigenvalues[i].abs() < 1e-9 * max)
                .collect();
            // Every null vector must lie in the row space of the constraints.
            let svd = a.clone().svd(true, true);
            let rank = svd.singular_values.iter().filter(|&&v| v > 1e-10).count();
            let v_t = svd.v_t.unwrap();
            let basis = v_t.rows(0, rank).transpose();
            for &i in &null {
                let n = eig.eigenvectors.column(i).into_owned();
                let resid = &n - &basis * (basis.transpose() * &n);
                worst_null = worst_null.max(resid.amax());
            }
            // And every constraint row must be annihilated by the structure.
            if !null.is_empty() {
                worst_null = worst_null.max((&r * a.transpose()).amax());
            }
        }
    }
    let pass = failed.is_empty() && worst_fit < 1e-6 && worst_null < 1e-8;
    outcome(
        pass,
        format!(
            "520 fits: max residual {worst_fit:.2e}, {} failures {:?}; null-space residual {worst_null:.2e}",
            failed.len(),
            failed.iter().take(2).collect::<Vec<_>>()
        ),
    )
}

fn standardization_balance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (s, t, k) = (
            rng.random_range(1..8),
            rng.random_range(1..6),
            rng.random_range(1..10),
        );
        let n = s * t * k;
        let population: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < 0.05 {
                    0.0
                } else {
                    rng.random_range(1.0..1e5)
                }
            })
            .collect();
        let observed: Vec<u64> = population
            .iter()
            .map(|&p| {
                if p == 0.0 {
                    0
                } else {
                    rng.random_range(0..(p * 0.05) as u64 + 2)
                }
            })
            .collect();
        let labels = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let d = Dataset::new(
            labels("a", s),
            labels("t", t),
            labels("k", k),
            observed,
            population,
        )
        .unwrap();
        let Ok(q) = stratum_rates(&d) else { continue };
        let e: f64 = expected_counts(&d, &q).unwrap().expected.iter().sum();
        let o = d.total_observed() as f64;
        if o > 0.0 {
            worst = worst.max((e - o).abs() / o);
        }
    }
    outcome(worst < 1e-9, format!("max relative imbalance {worst:.2e}"))
}

fn diagnostic_calibration() -> Outcome {
    let start = Instant::now();
    let g = grid(10, 10);
    // Area-period risks over the designated age curve, with no extra age effect.
    let sp = spec("delta=rw1;z1=II");
    let (mut clean_max, mut bent_min): (f64, f64) = (0.0, 1.0);
    for rep in 0..100 {
        let sim = simulate(&g, 7, 16, &sp, 10.0, 1000 + rep);
        let check = |d: &Dataset| {
            let q = stratum_rates(d).unwrap();
            proportionality_check(d, &q, DEFAULT_MIN_POINTS, DEFAULT_R2_THRESHOLD)
                .unwrap()
                .flagged_fraction()
        };
        clean_max = clean_max.max(check(&sim.dataset));
        let bent = make_proportionality_violation(&sim.dataset, 2.0, 2000 + rep).unwrap();
        bent_min = bent_min.min(check(&bent));
    }
    let elapsed = start.elapsed();
    let pass = clean_max < 0.10 && bent_min > 0.50 && within(elapsed, Duration::from_secs(120));
    outcome(
        pass,
        format!(
            "100 replicates: proportional data flag at most {:.1}%, strength 2 flags at least {:.1}%, {elapsed:.1?}",
            100.0 * clean_max,
            100.0 * bent_min
        ),
    )
}

fn oracle_agreement() -> Outcome {
    let start = Instant::now();
    let instances = [
        (1, 4, 3, 3, "delta=rw1;gamma=rw1"),
        (3, 3, 4, 3, "delta=rw1;gamma=rw1;z1=II;z2=IV"),
        (2, 3, 4, 3, "delta=iid;gamma=rw1;z1=IV;z3=III"),
        (2, 2, 3, 4, "delta=rw1;gamma=iid;z2=II;z3=IV"),
        (3, 3, 3, 3, "delta=rw1;gamma=rw1;z1=I;z2=III;z3=II"),
    ];
    let mut worst = (0.0f64, 0.0f64);
    let mut lines = Vec::new();
    for (n, &(rows, cols, t, k, s)) in instances.iter().enumerate() {
        let g = grid(rows, cols);
        let sp = spec(s);
        let sim = simulate(&g, t, k, &sp, 10.0, 300 + n as u64);
        let lap = fit_laplace(
            &sim.dataset,
            &g,
            &sim.expected,
            &sp,
            PriorFamily::Pc,
            &FitOptions::default(),
        )
        .unwrap();
        let mc = fit_mcmc(
            &sim.dataset,
            &g,
            &sim.expected,
            &sp,
            PriorFamily::Pc,
            &McmcOptions {
                iterations: 40_000,
                seed: 400 + n as u64,
                ..Default::default()
            },
        )
        .unwrap();
        let dim = 1 + lap.latent.iter().map(|b| b.mean.len()).sum::<usize>();
        assert!(dim <= 100);
        let (m, sd) = agreement(&lap, &mc);
        lines.push(format!("dim {dim}: {m:.3}/{:.0}%", 100.0 * sd));
        worst = (worst.0.max(m), worst.1.max(sd));
    }
    let elapsed = start.elapsed();
    let pass = worst.0 < 0.05 && worst.1 < 0.25 && within(elapsed, Duration::from_secs(600));
    outcome(
        pass,
        format!(
            "worst mean gap {:.4}, worst sd gap {:.1}% [{}], {elapsed:.0?}",
            worst.0,
            100.0 * worst.1,
            lines.join(", ")
        ),
    )
}

fn parameter_recovery() -> Outcome {
    let start = Instant::now();
    let g = grid(10, 10);
    let sp = spec("delta=rw1;gamma=rw1;z1=II;z2=II");
    let covers =
        |fit: &agestruct::inference::FitResult| fit.alpha.q025 < ALPHA && ALPHA < fit.alpha.q975;

    let degenerate = Hyperparameters::uniform(&sp, 1e12, 0.5);
    let fast_opts = FitOptions {
        fixed_hyper: Some(degenerate),
        ..FitOptions::default()
    };
    let mut fast = 0;
    for rep in 0..100 {
        let sim = simulate(&g, 7, 16, &sp, 1e12, 5000 + rep);
        let fit = fit_laplace(
            &sim.dataset,
            &g,
            &sim.expected,
            &sp,
            PriorFamily::Pc,
            &fast_opts,
        )
        .unwrap();
        fast += usize::from(covers(&fit));
    }

    let mut full = 0;
    let mut unconverged = 0;
    for rep in 0..20 {
        let sim = simulate(&g, 7, 16, &sp, 10.0, 6000 + rep);
        let fit = fit_laplace(
            &sim.dataset,
            &g,
            &sim.expected,
            &sp,
            PriorFamily::Pc,
            &FitOptions::default(),
        )
        .unwrap();
        full += usize::from(covers(&fit));
        unconverged += usize::from(!fit.diagnostics.converged);
    }
    let elapsed = start.elapsed();
    outcome(
        fast >= 90 && full >= 18,
        format!(
            "fast path {fast}/100, full model {full}/20 ({unconverged} unconverged), {elapsed:.0?}"
        ),
    )
}

fn model_selection() -> Outcome {
    let start = Instant::now();
    let g = grid(5, 5);
    let truth = spec("delta=rw1;gamma=rw1;z1=II");
    let plain = spec("delta=rw1;gamma=rw1");
    let mut wins = 0;
    let mut gaps = Vec::new();
    for rep in 0..10 {
        let sim = simulate(&g, 5, 4, &truth, 10.0, 7000 + rep);
        let fit = |sp: &ModelSpec| {
            fit_laplace(
                &sim.dataset,
                &g,
                &sim.expected,
                sp,
                PriorFamily::Pc,
                &FitOptions::default(),
            )
            .unwrap()
            .waic
        };
        let (a, b) = (fit(&truth), fit(&plain));
        wins += usize::from(a < b);
        gaps.push(format!("{:.1}", b - a));
    }
    let elapsed = start.elapsed();
    outcome(
        wins >= 8 && within(elapsed, Duration::from_secs(1800)),
        format!(
            "{wins}/10 replicates prefer the type II model (WAIC gains {}), {elapsed:.0?}",
            gaps.join(" ")
        ),
    )
}

fn waic_arithmetic() -> Outcome {
    let w = waic(&[0.5f64.ln(), 0.25f64.ln()], 1).unwrap();
    let ln2 = 2f64.ln();
    let hand = -2.0 * (0.375f64.ln() - ln2 * ln2 / 2.0);
    let exact = (w.waic - hand).abs() < 1e-9;
    // The quoted figure is built from five-decimal intermediates.
    let r5 = |v: f64| (v * 1e5).round() / 1e5;
    let rounded = r5(w.lppd) == -0.98083
        && r5(w.p_eff) == 0.24023
        && r5(-2.0 * (r5(w.lppd) - r5(w.p_eff))) == 2.44212;

    // Dyadic values make the shifted arithmetic exact in floating point.
    let draws = [-1.0, -2.5, -1.25, -0.75, -3.0, -2.0, -0.5, -1.75];
    let shifted: Vec<f64> = draws
        .iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { v + 4.0 } else { *v })
        .collect();
    let (a, b) = (waic(&draws, 2).unwrap(), waic(&shifted, 2).unwrap());
    let invariant = a.p_eff == b.p_eff;
    outcome(
        exact && rounded && invariant,
        format!(
            "waic {:.9} (closed form {:.9}), five-decimal intermediates give 2.44212: {rounded}, p_eff shift-invariant: {invariant}",
            w.waic, hand
        ),
    )
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sim_dir = dir.path().join("data");
    let p = |x: &std::path::Path| x.to_str().unwrap().to_string();
    let run = |args: Vec<String>| execute(Cli::parse_from(args)).unwrap();
    run(vec![
        "agestruct".into(),
        "simulate".into(),
        "--out".into(),
        p(&sim_dir),
        "--rows".into(),
        "2".into(),
        "--cols".into(),
        "2".into(),
        "--periods".into(),
        "3".into(),
        "--ages".into(),
        "3".into(),
        "--seed".into(),
        "8".into(),
    ]);
    let search = |out: &std::path::Path| {
        run(vec![
            "agestruct".into(),
            "search".into(),
            "--full".into(),
            "--data".into(),
            p(&sim_dir.join("data.csv")),
            "--adjacency".into(),
            p(&sim_dir.join("adjacency.txt")),
            "--out".into(),
            p(out),
            "--seed".into(),
            "42".into(),
        ]);
        read_results(&out.join("search_results.csv")).unwrap()
    };
    let a = search(&dir.path().join("a"));
    let b = search(&dir.path().join("b"));
    let same = a.len() == 520
        && a.len() == b.len()
        && a.iter()
            .zip(&b)
            .all(|(x, y)| x.spec == y.spec && x.waic.to_bits() == y.waic.to_bits());
    outcome(
        same,
        format!(
            "{} rows, identical WAIC bits: {same}, {:.0?}",
            a.len(),
            start.elapsed()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("enumeration", enumeration),
        ("structure-matrix fidelity", structure_fidelity),
        ("constraint correctness", constraint_correctness),
        ("standardization balance", standardization_balance),
        ("diagnostic calibration", diagnostic_calibration),
        ("Laplace and MCMC agreement", oracle_agreement),
        ("parameter recovery", parameter_recovery),
        ("WAIC model selection", model_selection),
        ("WAIC arithmetic", waic_arithmetic),
        ("search determinism", determinism),
    ];
    // `cargo test -- <filter>` style selection by criterion number.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let o = check();
        println!(
            "{} {n:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failures += usize::from(!o.pass);
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

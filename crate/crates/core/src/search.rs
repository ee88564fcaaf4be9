//! WAIC-based search over the model space with a best-per-family summary.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::inference::{fit_laplace, FitOptions};
use crate::model::{Family, ModelSpec, PriorFamily};
use crate::standardize::Dataset;

/// One line of the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub spec: ModelSpec,
    pub waic: f64,
    pub p_eff: f64,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyBest {
    pub family: Family,
    /// `None` when no fit in the family converged.
    pub spec: Option<ModelSpec>,
    pub waic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    /// In input order.
    pub rows: Vec<SearchRow>,
    pub best_per_family: Vec<FamilyBest>,
    pub overall_best: ModelSpec,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    pub seed: u64,
    /// Options for every fit. The seed is replaced by a per-spec seed.
    pub fit: FitOptions,
    /// Results file appended to as fits complete and rewritten in input
    /// order at the end.
    pub results_path: Option<PathBuf>,
    /// Reuse rows already present in the results file.
    pub resume: bool,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fit seed for `spec` under a master seed. Depends only on the spec, so
/// repeated specs get identical fits.
pub fn spec_seed(master: u64, spec: &ModelSpec) -> u64 {
    // FNV-1a keeps the value stable across toolchains.
    let h = spec
        .to_string()
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        });
    splitmix64(master ^ splitmix64(h))
}

fn fit_one(
    data: &Dataset,
    graph: &SpatialGraph,
    expected: &[f64],
    spec: &ModelSpec,
    prior: PriorFamily,
    opts: &SearchOptions,
) -> SearchRow {
    let start = Instant::now();
    let fit_opts = FitOptions {
        seed: spec_seed(opts.seed, spec),
        ..opts.fit.clone()
    };
    let fit = fit_laplace(data, graph, expected, spec, prior, &fit_opts);
    let seconds = start.elapsed().as_secs_f64();
    match fit {
        Ok(f) => SearchRow {
            spec: *spec,
            waic: f.waic,
            p_eff: f.p_eff,
            converged: f.diagnostics.converged && f.waic.is_finite(),
            seconds,
        },
        Err(e) => {
            log::warn!("{spec}: {e}");
            SearchRow {
                spec: *spec,
                waic: f64::NAN,
                p_eff: f64::NAN,
                converged: false,
                seconds,
            }
        }
    }
}

pub fn read_results(path: &Path) -> Result<Vec<SearchRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_results(path: &Path, rows: &[SearchRow]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Fits every spec and ranks the converged fits by WAIC.
pub fn run_search(
    data: &Dataset,
    graph: &SpatialGraph,
    expected: &[f64],
    specs: &[ModelSpec],
    prior: PriorFamily,
    opts: &SearchOptions,
) -> Result<SearchReport> {
    if specs.is_empty() {
        return Err(Error::InvalidInput("no model specifications to fit".into()));
    }
    let mut done: HashMap<String, SearchRow> = HashMap::new();
    if let Some(path) = &opts.results_path {
        if opts.resume && path.exists() {
            for r in read_results(path)? {
                done.insert(r.spec.to_string(), r);
            }
            log::info!("resuming with {} completed fits", done.len());
        } else if path.exists() {
            fs::remove_file(path)?;
        }
    }

    let sink = match &opts.results_path {
        Some(path) => {
            let has_header = path.exists() && fs::metadata(path)?.len() > 0;
            let file = OpenOptions::new().create(true).append(true).open(path)?;
            Some(Mutex::new(
                csv::WriterBuilder::new()
                    .has_headers(!has_header)
                    .from_writer(file),
            ))
        }
        None => None,
    };
    let record = |row: &SearchRow| -> Result<()> {
        if let Some(sink) = &sink {
            let mut w = sink.lock().unwrap_or_else(|e| e.into_inner());
            w.serialize(row)?;
            w.flush()?;
        }
        Ok(())
    };

    let todo: Vec<usize> = (0..specs.len())
        .filter(|&i| !done.contains_key(&specs[i].to_string()))
        .collect();
    let run = || -> Result<Vec<(usize, SearchRow)>> {
        todo.par_iter()
            .map(|&i| {
                let row = fit_one(data, graph, expected, &specs[i], prior, opts);
                record(&row)?;
                log::info!("{}: waic {:.3} in {:.1}s", row.spec, row.waic, row.seconds);
                Ok((i, row))
            })
            .collect()
    };
    let fresh = if opts.jobs == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::InvalidInput(format!("cannot start {} workers: {e}", opts.jobs)))?
            .install(run)?
    };
    drop(sink);

    let mut rows: Vec<Option<SearchRow>> = specs
        .iter()
        .map(|s| done.get(&s.to_string()).cloned())
        .collect();
    for (i, row) in fresh {
        rows[i] = Some(row);
    }
    let rows: Vec<SearchRow> = rows.into_iter().map(|r| r.unwrap()).collect();
    if let Some(path) = &opts.results_path {
        write_results(path, &rows)?;
    }
    summarize(rows)
}

/// Family minima and the overall best over converged rows. Ties go to the
/// earlier row.
pub fn summarize(rows: Vec<SearchRow>) -> Result<SearchReport> {
    let better = |best: Option<&SearchRow>, r: &SearchRow| best.is_none_or(|b| r.waic < b.waic);
    let mut overall: Option<&SearchRow> = None;
    let mut per_family: HashMap<Family, &SearchRow> = HashMap::new();
    for r in rows.iter().filter(|r| r.converged && r.waic.is_finite()) {
        if better(overall, r) {
            overall = Some(r);
        }
        if let Some(f) = r.spec.family() {
            if better(per_family.get(&f).copied(), r) {
                per_family.insert(f, r);
            }
        }
    }
    let overall_best = overall.ok_or(Error::SearchFailed)?.spec;
    let best_per_family = Family::ALL
        .iter()
        .map(|&family| FamilyBest {
            family,
            spec: per_family.get(&family).map(|r| r.spec),
            waic: per_family.get(&family).map(|r| r.waic),
        })
        .collect();
    Ok(SearchReport {
        rows,
        best_per_family,
        overall_best,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryRow {
    family: String,
    delta: String,
    gamma: String,
    zeta1: String,
    zeta2: String,
    zeta3: String,
    waic: Option<f64>,
}

/// Best-per-family table, one row per family.
pub fn write_summary(path: &Path, report: &SearchReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for b in &report.best_per_family {
        let cell = |s: Option<String>| s.unwrap_or_else(|| "-".into());
        let spec = b.spec.as_ref();
        w.serialize(SummaryRow {
            family: b.family.label().to_string(),
            delta: cell(spec.and_then(|s| s.delta).map(|m| m.to_string())),
            gamma: cell(spec.and_then(|s| s.gamma).map(|m| m.to_string())),
            zeta1: cell(spec.and_then(|s| s.zeta[0]).map(|t| t.to_string())),
            zeta2: cell(spec.and_then(|s| s.zeta[1]).map(|t| t.to_string())),
            zeta3: cell(spec.and_then(|s| s.zeta[2]).map(|t| t.to_string())),
            waic: b.waic,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(spec: &str, waic: f64, converged: bool) -> SearchRow {
        SearchRow {
            spec: spec.parse().unwrap(),
            waic,
            p_eff: 1.0,
            converged,
            seconds: 0.5,
        }
    }

    #[test]
    fn ties_go_to_first_occurrence() {
        let rows = vec![
            row("delta=rw1", 10.0, true),
            row("delta=iid", 10.0, true),
            row("delta=rw1;gamma=iid", 12.0, true),
        ];
        let r = summarize(rows).unwrap();
        assert_eq!(
            r.overall_best.to_string(),
            "delta=rw1;gamma=-;z1=-;z2=-;z3=-"
        );
        let fam = &r.best_per_family[0];
        assert_eq!(fam.family, Family::Delta);
        assert_eq!(
            fam.spec.unwrap().to_string(),
            "delta=rw1;gamma=-;z1=-;z2=-;z3=-"
        );
        assert_eq!(r.best_per_family.len(), 8);
        assert!(r.best_per_family[2].spec.is_none());
    }

    #[test]
    fn unconverged_rows_are_excluded() {
        let rows = vec![row("delta=rw1", 5.0, false), row("delta=iid", 10.0, true)];
        let r = summarize(rows).unwrap();
        assert_eq!(r.overall_best, "delta=iid".parse().unwrap());
        assert!(matches!(
            summarize(vec![row("delta=rw1", 5.0, false)]),
            Err(Error::SearchFailed)
        ));
    }

    #[test]
    fn seeds_depend_on_spec_only() {
        let a: ModelSpec = "delta=rw1".parse().unwrap();
        let b: ModelSpec = "delta=iid".parse().unwrap();
        assert_eq!(spec_seed(7, &a), spec_seed(7, &a));
        assert_ne!(spec_seed(7, &a), spec_seed(7, &b));
        assert_ne!(spec_seed(7, &a), spec_seed(8, &a));
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.csv");
        let rows = vec![
            row("delta=rw1;gamma=iid;z1=II", 1234.567_890_123_4, true),
            row("delta=iid", 0.1 + 0.2, false),
        ];
        write_results(&path, &rows).unwrap();
        assert_eq!(read_results(&path).unwrap(), rows);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("spec,waic,p_eff,converged,seconds\n"));
    }
}

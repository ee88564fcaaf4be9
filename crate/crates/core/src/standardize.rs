//! Indirect standardization and the proportionality diagnostic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dims;

/// Observed counts and populations on an `S × T × K` lattice, stored in
/// cell order `(i * T + j) * K + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    area_ids: Vec<String>,
    period_labels: Vec<String>,
    age_labels: Vec<String>,
    observed: Vec<u64>,
    population: Vec<f64>,
}

impl Dataset {
    pub fn new(
        area_ids: Vec<String>,
        period_labels: Vec<String>,
        age_labels: Vec<String>,
        observed: Vec<u64>,
        population: Vec<f64>,
    ) -> Result<Self> {
        let n = area_ids.len() * period_labels.len() * age_labels.len();
        if n == 0 {
            return Err(Error::InvalidDimension(
                "dataset has an empty dimension".into(),
            ));
        }
        if observed.len() != n || population.len() != n {
            return Err(Error::InvalidDimension(format!(
                "lattice has {n} cells but {} counts and {} populations were given",
                observed.len(),
                population.len()
            )));
        }
        if let Some(p) = population.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "population {p} must be finite and non-negative"
            )));
        }
        let d = Self {
            area_ids,
            period_labels,
            age_labels,
            observed,
            population,
        };
        let dims = d.dims();
        for i in 0..dims.s {
            for j in 0..dims.t {
                for k in 0..dims.k {
                    let c = dims.cell(i, j, k);
                    if d.population[c] == 0.0 && d.observed[c] > 0 {
                        return Err(Error::ImpossibleCell {
                            area: d.area_ids[i].clone(),
                            period: d.period_labels[j].clone(),
                            age: d.age_labels[k].clone(),
                            observed: d.observed[c],
                        });
                    }
                }
            }
        }
        Ok(d)
    }

    pub fn dims(&self) -> Dims {
        Dims::new(
            self.area_ids.len(),
            self.period_labels.len(),
            self.age_labels.len(),
        )
    }

    pub fn area_ids(&self) -> &[String] {
        &self.area_ids
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn age_labels(&self) -> &[String] {
        &self.age_labels
    }

    pub fn observed(&self) -> &[u64] {
        &self.observed
    }

    pub fn population(&self) -> &[f64] {
        &self.population
    }

    pub fn total_observed(&self) -> u64 {
        self.observed.iter().sum()
    }

    /// Same lattice with new counts.
    pub fn with_observed(&self, observed: Vec<u64>) -> Result<Self> {
        Self::new(
            self.area_ids.clone(),
            self.period_labels.clone(),
            self.age_labels.clone(),
            observed,
            self.population.clone(),
        )
    }
}

/// Internal reference rates `q_k = Σ_ij O_ijk / Σ_ij N_ijk`.
pub fn stratum_rates(d: &Dataset) -> Result<Vec<f64>> {
    let dims = d.dims();
    let mut o = vec![0.0; dims.k];
    let mut n = vec![0.0; dims.k];
    for (c, (&oc, &nc)) in d.observed.iter().zip(&d.population).enumerate() {
        o[c % dims.k] += oc as f64;
        n[c % dims.k] += nc;
    }
    o.iter()
        .zip(&n)
        .enumerate()
        .map(|(k, (&o, &n))| {
            if n > 0.0 {
                Ok(o / n)
            } else {
                Err(Error::EmptyStratum(d.age_labels[k].clone()))
            }
        })
        .collect()
}

/// Rate of the whole dataset, ignoring age.
pub fn global_rate(d: &Dataset) -> Result<f64> {
    let n: f64 = d.population.iter().sum();
    if n <= 0.0 {
        return Err(Error::InvalidInput("total population is zero".into()));
    }
    Ok(d.total_observed() as f64 / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationResult {
    pub q: Vec<f64>,
    /// `E_ijk` in cell order.
    pub expected: Vec<f64>,
    /// `E_ij` in `i * T + j` order.
    pub expected_area_period: Vec<f64>,
    /// `O_ij / E_ij`, absent where `E_ij = 0`.
    pub sir: Vec<Option<f64>>,
}

pub fn expected_counts(d: &Dataset, q: &[f64]) -> Result<StandardizationResult> {
    let dims = d.dims();
    if q.len() != dims.k {
        return Err(Error::InvalidInput(format!(
            "{} reference rates given for {} age groups",
            q.len(),
            dims.k
        )));
    }
    if let Some(r) = q.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "reference rate {r} must be non-negative"
        )));
    }
    let expected: Vec<f64> = d
        .population
        .iter()
        .enumerate()
        .map(|(c, &n)| n * q[c % dims.k])
        .collect();
    let mut e_ij = vec![0.0; dims.s * dims.t];
    let mut o_ij = vec![0u64; dims.s * dims.t];
    for c in 0..dims.n_cells() {
        e_ij[c / dims.k] += expected[c];
        o_ij[c / dims.k] += d.observed[c];
    }
    let sir = e_ij
        .iter()
        .zip(&o_ij)
        .map(|(&e, &o)| (e > 0.0).then(|| o as f64 / e))
        .collect();
    Ok(StandardizationResult {
        q: q.to_vec(),
        expected,
        expected_area_period: e_ij,
        sir,
    })
}

pub const DEFAULT_MIN_POINTS: usize = 3;
pub const DEFAULT_R2_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostic {
    pub area: usize,
    pub period: usize,
    /// `(k, q_k, O_ijk / N_ijk)` for populated strata.
    pub points: Vec<(usize, f64, f64)>,
    pub assessed: bool,
    pub slope: Option<f64>,
    pub r2: Option<f64>,
    pub flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionalityReport {
    pub min_points: usize,
    pub r2_threshold: f64,
    /// One entry per `(i, j)` in `i * T + j` order.
    pub cells: Vec<CellDiagnostic>,
}

impl ProportionalityReport {
    pub fn n_assessed(&self) -> usize {
        self.cells.iter().filter(|c| c.assessed).count()
    }

    pub fn n_flagged(&self) -> usize {
        self.cells.iter().filter(|c| c.flag).count()
    }

    /// Flagged share of assessed cells.
    pub fn flagged_fraction(&self) -> f64 {
        let n = self.n_assessed();
        if n == 0 {
            0.0
        } else {
            self.n_flagged() as f64 / n as f64
        }
    }
}

/// Least-squares slope through the origin and the centered coefficient of
/// determination `1 - SSR / SST` of that fit.
pub fn through_origin_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    let n = points.len() as f64;
    let mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let ssr: f64 = points.iter().map(|p| (p.1 - slope * p.0).powi(2)).sum();
    let sst: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let r2 = if sst > 0.0 {
        1.0 - ssr / sst
    } else if ssr > 0.0 {
        f64::NEG_INFINITY
    } else {
        1.0
    };
    (slope, r2)
}

pub fn proportionality_check(
    d: &Dataset,
    q: &[f64],
    min_points: usize,
    r2_threshold: f64,
) -> Result<ProportionalityReport> {
    let dims = d.dims();
    if q.len() != dims.k {
        return Err(Error::InvalidInput(format!(
            "{} reference rates given for {} age groups",
            q.len(),
            dims.k
        )));
    }
    if min_points < 3 {
        return Err(Error::InvalidInput(format!(
            "min_points must be at least 3, got {min_points}"
        )));
    }
    let cells = (0..dims.s * dims.t)
        .into_par_iter()
        .map(|ij| {
            let points: Vec<(usize, f64, f64)> = (0..dims.k)
                .filter_map(|k| {
                    let c = ij * dims.k + k;
                    let n = d.population[c];
                    (n > 0.0).then(|| (k, q[k], d.observed[c] as f64 / n))
                })
                .collect();
            let assessed = points.len() >= min_points;
            let (slope, r2) = if assessed {
                let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.1, p.2)).collect();
                let (s, r) = through_origin_fit(&xy);
                (Some(s), Some(r))
            } else {
                (None, None)
            };
            CellDiagnostic {
                area: ij / dims.t,
                period: ij % dims.t,
                points,
                assessed,
                slope,
                r2,
                flag: r2.is_some_and(|r| r < r2_threshold),
            }
        })
        .collect();
    Ok(ProportionalityReport {
        min_points,
        r2_threshold,
        cells,
    })
}

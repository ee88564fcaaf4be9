//! File formats: the dataset CSV, diagnostic and effect tables, and JSON
//! documents.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{parse_adjacency, SpatialGraph};
use crate::inference::EffectRow;
use crate::standardize::{Dataset, ProportionalityReport};

pub const DATASET_COLUMNS: [&str; 5] = ["area_id", "period", "age_group", "observed", "population"];

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRecord {
    area_id: String,
    period: String,
    age_group: String,
    observed: u64,
    population: f64,
}

fn csv_error(e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::parse(p.line() as usize, e.to_string()),
        None => Error::Csv(e),
    }
}

fn index_of(labels: &mut Vec<String>, map: &mut HashMap<String, usize>, label: &str) -> usize {
    *map.entry(label.to_string()).or_insert_with(|| {
        labels.push(label.to_string());
        labels.len() - 1
    })
}

/// Reads the long-format dataset. Periods and age groups keep their order of
/// first appearance; areas follow `graph` when given. Every
/// `(area, period, age group)` combination must appear exactly once.
pub fn parse_dataset<R: Read>(reader: R, graph: Option<&SpatialGraph>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    for col in DATASET_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::parse(1, format!("missing column `{col}`")));
        }
    }

    let mut areas = Vec::new();
    let mut area_map = HashMap::new();
    if let Some(g) = graph {
        for id in g.area_ids() {
            index_of(&mut areas, &mut area_map, id);
        }
    }
    let (mut periods, mut period_map) = (Vec::new(), HashMap::new());
    let (mut ages, mut age_map) = (Vec::new(), HashMap::new());
    let mut cells: Vec<(usize, usize, usize, u64, f64, usize)> = Vec::new();
    for rec in rdr.deserialize::<DatasetRecord>() {
        let rec = rec.map_err(csv_error)?;
        let line = cells.len() + 2;
        let i = match (graph, area_map.get(&rec.area_id)) {
            (Some(_), None) => {
                return Err(Error::parse(
                    line,
                    format!("area `{}` is not in the adjacency graph", rec.area_id),
                ))
            }
            (_, Some(&i)) => i,
            (None, None) => index_of(&mut areas, &mut area_map, &rec.area_id),
        };
        let j = index_of(&mut periods, &mut period_map, &rec.period);
        let k = index_of(&mut ages, &mut age_map, &rec.age_group);
        if !(rec.population.is_finite() && rec.population >= 0.0) {
            return Err(Error::parse(
                line,
                format!("invalid population {}", rec.population),
            ));
        }
        cells.push((i, j, k, rec.observed, rec.population, line));
    }
    if cells.is_empty() {
        return Err(Error::InvalidInput("dataset has no rows".into()));
    }

    let (s, t, k) = (areas.len(), periods.len(), ages.len());
    let mut observed = vec![0u64; s * t * k];
    let mut population = vec![0.0; s * t * k];
    let mut seen = vec![false; s * t * k];
    for &(i, j, kk, o, n, line) in &cells {
        let c = (i * t + j) * k + kk;
        if seen[c] {
            return Err(Error::parse(
                line,
                format!(
                    "duplicate row for ({}, {}, {})",
                    areas[i], periods[j], ages[kk]
                ),
            ));
        }
        seen[c] = true;
        observed[c] = o;
        population[c] = n;
    }
    if let Some(c) = seen.iter().position(|&v| !v) {
        let (i, j, kk) = (c / (t * k), c / k % t, c % k);
        return Err(Error::InvalidInput(format!(
            "no row for area `{}`, period `{}`, age group `{}`",
            areas[i], periods[j], ages[kk]
        )));
    }
    Dataset::new(areas, periods, ages, observed, population)
}

pub fn read_dataset(path: &Path, graph: Option<&SpatialGraph>) -> Result<Dataset> {
    parse_dataset(File::open(path)?, graph)
}

pub fn write_dataset_to<W: Write>(writer: W, d: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dims = d.dims();
    for i in 0..dims.s {
        for j in 0..dims.t {
            for k in 0..dims.k {
                let c = dims.cell(i, j, k);
                w.serialize(DatasetRecord {
                    area_id: d.area_ids()[i].clone(),
                    period: d.period_labels()[j].clone(),
                    age_group: d.age_labels()[k].clone(),
                    observed: d.observed()[c],
                    population: d.population()[c],
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    write_dataset_to(File::create(path)?, d)
}

#[derive(Debug, Serialize, Deserialize)]
struct RateRecord {
    age_group: String,
    q: f64,
}

/// External reference rates, CSV `age_group,q`, returned in the dataset's
/// age order.
pub fn read_rates(path: &Path, d: &Dataset) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let mut by_label = HashMap::new();
    for (n, rec) in rdr.deserialize::<RateRecord>().enumerate() {
        let rec = rec.map_err(csv_error)?;
        if by_label.insert(rec.age_group.clone(), rec.q).is_some() {
            return Err(Error::parse(
                n + 2,
                format!("duplicate age group `{}`", rec.age_group),
            ));
        }
    }
    d.age_labels()
        .iter()
        .map(|a| {
            by_label.get(a).copied().ok_or_else(|| {
                Error::InvalidInput(format!("no reference rate for age group `{a}`"))
            })
        })
        .collect()
}

pub fn write_rates(path: &Path, d: &Dataset, q: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for (a, &q) in d.age_labels().iter().zip(q) {
        w.serialize(RateRecord {
            age_group: a.clone(),
            q,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// One spec per line; blank lines and `#` comments are ignored.
pub fn parse_specs(text: &str) -> Result<Vec<crate::model::ModelSpec>> {
    text.lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| l.parse().map_err(|e: Error| Error::parse(n, e.to_string())))
        .collect()
}

pub fn read_graph(path: &Path) -> Result<SpatialGraph> {
    parse_adjacency(&fs::read_to_string(path)?)
}

#[derive(Debug, Serialize)]
struct ReportRow<'a> {
    area_id: &'a str,
    period: &'a str,
    slope: Option<f64>,
    r2: Option<f64>,
    flag: bool,
    assessed: bool,
}

#[derive(Debug, Serialize)]
struct PointRow<'a> {
    area_id: &'a str,
    period: &'a str,
    age_group: &'a str,
    q: f64,
    rate: f64,
}

/// One row per area and period with the through-origin fit.
pub fn write_report(path: &Path, report: &ProportionalityReport, d: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for c in &report.cells {
        w.serialize(ReportRow {
            area_id: &d.area_ids()[c.area],
            period: &d.period_labels()[c.period],
            slope: c.slope,
            r2: c.r2,
            flag: c.flag,
            assessed: c.assessed,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// The scatter points behind each fit: stratum rate against observed rate.
pub fn write_points(path: &Path, report: &ProportionalityReport, d: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for c in &report.cells {
        for &(k, q, rate) in &c.points {
            w.serialize(PointRow {
                area_id: &d.area_ids()[c.area],
                period: &d.period_labels()[c.period],
                age_group: &d.age_labels()[k],
                q,
                rate,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_effects(path: &Path, rows: &[EffectRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(File::create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline. Field order follows the
/// type definition.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

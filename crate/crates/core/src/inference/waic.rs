//! Widely applicable information criterion from pointwise log-likelihood draws.

use serde::{Deserialize, Serialize};

use super::summary::mean_sd;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waic {
    pub waic: f64,
    pub p_eff: f64,
    pub lppd: f64,
}

impl Waic {
    fn from_parts(lppd: f64, p_eff: f64) -> Self {
        Self {
            waic: -2.0 * (lppd - p_eff),
            p_eff,
            lppd,
        }
    }
}

/// `draws` is `M × n` row-major: one row per posterior draw, one column per cell.
pub fn waic(draws: &[f64], n_cells: usize) -> Result<Waic> {
    if n_cells == 0 || draws.len() % n_cells != 0 {
        return Err(Error::InvalidDimension(format!(
            "{} values do not form rows of {n_cells} cells",
            draws.len()
        )));
    }
    let m = draws.len() / n_cells;
    if m < 2 {
        return Err(Error::InsufficientDraws(m));
    }
    let mut lppd = 0.0;
    let mut p_eff = 0.0;
    let mut col = vec![0.0; m];
    for c in 0..n_cells {
        for (r, v) in col.iter_mut().enumerate() {
            *v = draws[r * n_cells + c];
        }
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lme = if max == f64::NEG_INFINITY {
            max
        } else {
            max + (col.iter().map(|v| (v - max).exp()).sum::<f64>() / m as f64).ln()
        };
        lppd += lme;
        let (_, sd) = mean_sd(&col);
        p_eff += sd * sd;
    }
    Ok(Waic::from_parts(lppd, p_eff))
}

/// Streaming version of [`waic`]: rows are pushed one draw at a time.
#[derive(Debug, Clone)]
pub struct WaicAccumulator {
    count: usize,
    max: Vec<f64>,
    sum_exp: Vec<f64>,
    shift: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl WaicAccumulator {
    pub fn new(n_cells: usize) -> Self {
        Self {
            count: 0,
            max: vec![f64::NEG_INFINITY; n_cells],
            sum_exp: vec![0.0; n_cells],
            shift: Vec::new(),
            mean: vec![0.0; n_cells],
            m2: vec![0.0; n_cells],
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.max.len());
        if self.count == 0 {
            self.shift = row.to_vec();
        }
        self.count += 1;
        let n = self.count as f64;
        for (c, &v) in row.iter().enumerate() {
            if v > self.max[c] {
                self.sum_exp[c] = self.sum_exp[c] * (self.max[c] - v).exp() + 1.0;
                self.max[c] = v;
            } else if v > f64::NEG_INFINITY {
                self.sum_exp[c] += (v - self.max[c]).exp();
            }
            let v = v - self.shift[c];
            let delta = v - self.mean[c];
            self.mean[c] += delta / n;
            self.m2[c] += delta * (v - self.mean[c]);
        }
    }

    pub fn finish(&self) -> Result<Waic> {
        if self.count < 2 {
            return Err(Error::InsufficientDraws(self.count));
        }
        let m = self.count as f64;
        let lppd: f64 = self
            .max
            .iter()
            .zip(&self.sum_exp)
            .map(|(&mx, &s)| {
                if mx == f64::NEG_INFINITY {
                    mx
                } else {
                    mx + (s / m).ln()
                }
            })
            .sum();
        let p_eff: f64 = self.m2.iter().map(|v| v / (m - 1.0)).sum();
        Ok(Waic::from_parts(lppd, p_eff))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_draw_example() {
        let w = waic(&[0.5f64.ln(), 0.25f64.ln()], 1).unwrap();
        assert!((w.lppd - 0.375f64.ln()).abs() < 1e-12);
        assert!((w.p_eff - 0.240_226_506_959_1).abs() < 1e-9);
        assert!((w.waic - 2.44212).abs() < 1e-5);
        assert_eq!(w.waic, -2.0 * (w.lppd - w.p_eff));
    }

    #[test]
    fn identical_draws() {
        let row = [-1.0, -2.5, -0.3];
        let draws: Vec<f64> = row.iter().copied().cycle().take(30).collect();
        let w = waic(&draws, 3).unwrap();
        assert_eq!(w.p_eff, 0.0);
        assert!((w.waic - 2.0 * 3.8).abs() < 1e-12);
    }

    #[test]
    fn shift_of_one_cell() {
        let draws = [-1.0, -2.0, -1.5, -2.2, -0.7, -1.9];
        let w = waic(&draws, 2).unwrap();
        let shifted: Vec<f64> = draws
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v + 3.0 } else { *v })
            .collect();
        let w2 = waic(&shifted, 2).unwrap();
        assert!((w2.lppd - w.lppd - 3.0).abs() < 1e-12);
        assert!((w2.p_eff - w.p_eff).abs() < 1e-12);
    }

    #[test]
    fn too_few_draws() {
        assert!(matches!(
            waic(&[1.0, 2.0], 2),
            Err(Error::InsufficientDraws(1))
        ));
    }

    #[test]
    fn accumulator_matches_batch() {
        let draws: Vec<f64> = (0..60)
            .map(|i| -((i * 37 % 17) as f64) / 3.0 - 800.0 * f64::from(i % 2))
            .collect();
        let batch = waic(&draws, 4).unwrap();
        let mut acc = WaicAccumulator::new(4);
        for row in draws.chunks(4) {
            acc.push(row);
        }
        let stream = acc.finish().unwrap();
        assert!((batch.lppd - stream.lppd).abs() < 1e-9);
        assert!((batch.p_eff - stream.p_eff).abs() < 1e-9);
    }
}

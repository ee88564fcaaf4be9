//! Posterior summaries of scalar draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const QUANTILES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q975: f64,
    pub mode: f64,
}

impl Summary {
    pub fn quantiles(&self) -> [f64; 5] {
        [self.q025, self.q25, self.q50, self.q75, self.q975]
    }

    pub fn covers(&self, value: f64) -> bool {
        self.q025 <= value && value <= self.q975
    }
}

/// Linear interpolation between order statistics at `(n - 1) p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Half-sample mode of sorted data.
pub fn half_sample_mode(sorted: &[f64]) -> f64 {
    let mut x = sorted;
    loop {
        match x.len() {
            0 => return f64::NAN,
            1 => return x[0],
            2 => return 0.5 * (x[0] + x[1]),
            3 => {
                let (a, b) = (x[1] - x[0], x[2] - x[1]);
                return if a < b {
                    0.5 * (x[0] + x[1])
                } else if a > b {
                    0.5 * (x[1] + x[2])
                } else {
                    x[1]
                };
            }
            n => {
                let h = n.div_ceil(2);
                let mut best = 0;
                let mut width = f64::INFINITY;
                for s in 0..=n - h {
                    let w = x[s + h - 1] - x[s];
                    if w < width {
                        width = w;
                        best = s;
                    }
                }
                x = &x[best..best + h];
            }
        }
    }
}

/// Mean and sample sd, shifted by the first draw so constant input is exact.
pub fn mean_sd(draws: &[f64]) -> (f64, f64) {
    let Some(&shift) = draws.first() else {
        return (f64::NAN, f64::NAN);
    };
    let n = draws.len() as f64;
    let centred = draws.iter().map(|d| d - shift).sum::<f64>() / n;
    let mean = shift + centred;
    if draws.len() < 2 {
        return (mean, 0.0);
    }
    let var = draws
        .iter()
        .map(|d| (d - shift - centred).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    (mean, var.sqrt())
}

pub fn posterior_summary(draws: &[f64]) -> Result<Summary> {
    if draws.len() < 2 {
        return Err(Error::InsufficientDraws(draws.len()));
    }
    let (mean, sd) = mean_sd(draws);
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = QUANTILES.map(|p| quantile_sorted(&sorted, p));
    Ok(Summary {
        mean,
        sd,
        q025: q[0],
        q25: q[1],
        q50: q[2],
        q75: q[3],
        q975: q[4],
        mode: half_sample_mode(&sorted),
    })
}

/// Column-wise summaries of an `M × d` matrix stored row-major.
pub fn summarize_columns(draws: &[f64], d: usize) -> Result<Vec<Summary>> {
    let m = draws.len() / d.max(1);
    (0..d)
        .map(|c| {
            let col: Vec<f64> = (0..m).map(|r| draws[r * d + c]).collect();
            posterior_summary(&col)
        })
        .collect()
}

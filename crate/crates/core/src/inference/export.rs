//! Long-format effect tables for plotting.

use serde::{Deserialize, Serialize};

use super::FitResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub block: String,
    pub area: Option<String>,
    pub period: Option<String>,
    pub age: Option<String>,
    pub mean: f64,
    pub sd: f64,
    /// `exp(mean)`, the multiplicative effect on the relative risk.
    pub exp_mean: f64,
}

/// One row per latent coordinate, labelled by the area, period and age it
/// indexes. The intercept comes first.
pub fn export_effects(fit: &FitResult) -> Vec<EffectRow> {
    let (areas, periods, ages) = (&fit.area_ids, &fit.period_labels, &fit.age_labels);
    let row = |block: &str, labels: [Option<&String>; 3], mean: f64, sd: f64| EffectRow {
        block: block.to_string(),
        area: labels[0].cloned(),
        period: labels[1].cloned(),
        age: labels[2].cloned(),
        mean,
        sd,
        exp_mean: mean.exp(),
    };
    let mut rows = vec![row(
        "alpha",
        [None, None, None],
        fit.alpha.mean,
        fit.alpha.sd,
    )];
    for b in &fit.latent {
        for (idx, (&mean, &sd)) in b.mean.iter().zip(&b.sd).enumerate() {
            let labels = match b.block.as_str() {
                "phi" => [areas.get(idx), None, None],
                "delta" => [None, periods.get(idx), None],
                "gamma" => [None, None, ages.get(idx)],
                "zeta1" => {
                    let t = periods.len();
                    [areas.get(idx / t), periods.get(idx % t), None]
                }
                "zeta2" => {
                    let k = ages.len();
                    [areas.get(idx / k), None, ages.get(idx % k)]
                }
                "zeta3" => {
                    let t = periods.len();
                    [None, periods.get(idx % t), ages.get(idx / t)]
                }
                _ => [None, None, None],
            };
            rows.push(row(&b.block, labels, mean, sd));
        }
    }
    rows
}

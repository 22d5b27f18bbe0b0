use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ResultRow, RowSource};
use crate::algorithms::Algorithm;
use crate::error::{FedError, Result};
use crate::seed;

/// Aggregate of the successful runs of one (experiment, algorithm, budget, axis point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub algorithm: Algorithm,
    pub mu: f64,
    pub axis_value: f64,
    pub source: RowSource,
    pub mean_mse: f64,
    /// Standard error of the mean; `None` with fewer than two runs.
    pub se: Option<f64>,
    pub median_mse: f64,
    pub count: usize,
    /// Runs that ended in an error.
    pub failures: usize,
}

type GroupKey = (String, Algorithm, u64, u64, RowSource);

fn key(row: &ResultRow) -> GroupKey {
    // Total-order bit patterns keep float keys orderable.
    let bits = |v: f64| {
        let b = v.to_bits();
        if b >> 63 == 1 {
            !b
        } else {
            b | (1 << 63)
        }
    };
    (row.experiment.clone(), row.algorithm, bits(row.mu), bits(row.axis_value), row.source)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Mean, standard error and median of MSE per group. Values are sorted before
/// summation so the result does not depend on row order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<GroupKey, (Vec<f64>, usize, &ResultRow)> = BTreeMap::new();
    for row in rows {
        let entry = groups.entry(key(row)).or_insert_with(|| (Vec::new(), 0, row));
        if row.is_ok() {
            entry.0.push(row.mse);
        } else {
            entry.1 += 1;
        }
    }
    groups
        .into_values()
        .map(|(mut values, failures, first)| {
            values.sort_by(f64::total_cmp);
            let count = values.len();
            let (mean, se, med) = if count == 0 {
                (f64::NAN, None, f64::NAN)
            } else {
                let mean = values.iter().sum::<f64>() / count as f64;
                let se = (count >= 2).then(|| {
                    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
                    (var / count as f64).sqrt()
                });
                (mean, se, median(&values))
            };
            SummaryRow {
                experiment: first.experiment.clone(),
                algorithm: first.algorithm,
                mu: first.mu,
                axis_value: first.axis_value,
                source: first.source,
                mean_mse: mean,
                se,
                median_mse: med,
                count,
                failures,
            }
        })
        .collect()
}

/// Percentile bootstrap confidence interval for the mean.
pub fn bootstrap_mean_ci(values: &[f64], level: f64, resamples: usize, seed_value: u64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(FedError::Empty("values"));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(FedError::invalid("level", "need 0 < level < 1 and at least one resample"));
    }
    let mut rng = seed::rng_from(seed_value);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok((at(alpha), at(1.0 - alpha)))
}

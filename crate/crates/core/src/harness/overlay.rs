//! Theory curves in the result-row schema, evaluated at the design points of
//! an empirical sweep.

use std::collections::BTreeMap;

use super::{summarize, ResultRow, RowSource, STATUS_OK};
use crate::algorithms::Algorithm;
use crate::error::{FedError, Result};
use crate::federation::largest_remainder;
use crate::theory::{upper_bound, RateInputs, TheoryConstants};

/// Quantities the result rows do not record.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayOptions {
    pub d: usize,
    pub tau1: f64,
    pub tau2: f64,
    /// Iterations `K` (FedSGD, FedAvg, FedNewton) when the axis is not iterations.
    pub k: usize,
    /// FedAvg rounds.
    pub r: usize,
    /// The axis values are iteration counts.
    pub iterations_axis: bool,
    pub constants: TheoryConstants,
    /// Rescale each curve so it meets the empirical mean at its first axis point.
    pub calibrate: bool,
}

impl Default for OverlayOptions {
    fn default() -> Self {
        OverlayOptions {
            d: 5,
            tau1: 0.05,
            tau2: 0.25 * 5.0,
            k: 50,
            r: 2,
            iterations_axis: false,
            constants: TheoryConstants::default(),
            calibrate: true,
        }
    }
}

fn equal_sizes(m: usize, n_total: usize) -> Vec<usize> {
    largest_remainder(&vec![1.0 / m as f64; m], n_total)
}

/// One theory row per (experiment, algorithm, budget, axis point) of `rows`.
/// Client sizes are taken as equal with the recorded `m` and `N`. Algorithms
/// without a bound are skipped.
pub fn theory_rows(rows: &[ResultRow], opts: &OverlayOptions) -> Result<Vec<ResultRow>> {
    let empirical: Vec<ResultRow> = rows.iter().filter(|r| r.source == RowSource::Empirical).cloned().collect();
    let means: BTreeMap<(String, Algorithm, u64, u64), f64> = summarize(&empirical)
        .into_iter()
        .map(|s| ((s.experiment, s.algorithm, s.mu.to_bits(), s.axis_value.to_bits()), s.mean_mse))
        .collect();
    let mut points: BTreeMap<(String, Algorithm, u64, u64), ResultRow> = BTreeMap::new();
    for row in empirical.iter().filter(|r| r.is_ok() && r.m > 0 && r.n_total >= r.m) {
        let key = (row.experiment.clone(), row.algorithm, row.mu.to_bits(), row.axis_value.to_bits());
        points.entry(key).or_insert_with(|| row.clone());
    }
    let mut out = Vec::new();
    for ((experiment, algorithm, mu_bits, _), row) in &points {
        if *algorithm == Algorithm::ApproxNewton {
            continue;
        }
        let k = if opts.iterations_axis { row.axis_value as usize } else { opts.k };
        let inputs = RateInputs {
            sizes: equal_sizes(row.m, row.n_total),
            d: opts.d,
            mu: f64::from_bits(*mu_bits),
            k,
            r: opts.r,
            tau1: opts.tau1,
            tau2: opts.tau2,
        };
        let value = upper_bound(*algorithm, &inputs, &opts.constants)?;
        out.push(ResultRow {
            experiment: experiment.clone(),
            rep: 0,
            mse: value,
            runtime_ms: 0,
            seed: 0,
            status: STATUS_OK.into(),
            source: RowSource::Theory,
            ..row.clone()
        });
    }
    if opts.calibrate {
        // Anchor each curve at its smallest axis value.
        let mut scale: BTreeMap<(String, Algorithm, u64), f64> = BTreeMap::new();
        for t in &out {
            let key = (t.experiment.clone(), t.algorithm, t.mu.to_bits());
            if scale.contains_key(&key) {
                continue;
            }
            let emp = means.get(&(t.experiment.clone(), t.algorithm, t.mu.to_bits(), t.axis_value.to_bits()));
            if let Some(&e) = emp.filter(|e| e.is_finite() && **e > 0.0) {
                scale.insert(key, e / t.mse);
            }
        }
        for t in &mut out {
            if let Some(s) = scale.get(&(t.experiment.clone(), t.algorithm, t.mu.to_bits())) {
                t.mse *= s;
            }
        }
    }
    if out.is_empty() && !rows.is_empty() {
        return Err(FedError::Config("no successful empirical rows with a closed-form bound".into()));
    }
    Ok(out)
}

/// Empirical rows followed by their theory rows, each experiment block in canonical order.
pub fn overlay(rows: &[ResultRow], opts: &OverlayOptions) -> Result<Vec<ResultRow>> {
    let theory = theory_rows(rows, opts)?;
    let mut all: Vec<ResultRow> = rows.iter().filter(|r| r.source == RowSource::Empirical).cloned().collect();
    all.extend(theory);
    let order: Vec<String> = {
        let mut seen = Vec::new();
        for r in &all {
            if !seen.contains(&r.experiment) {
                seen.push(r.experiment.clone());
            }
        }
        seen
    };
    let mut sorted = Vec::with_capacity(all.len());
    for name in order {
        let mut block: Vec<ResultRow> = all.iter().filter(|r| r.experiment == name).cloned().collect();
        super::sort_rows(&mut block);
        sorted.extend(block);
    }
    Ok(sorted)
}

//! Experiment orchestration: repeated simulated runs over a sweep axis, result
//! rows, summaries, baselines, presets and plots.

mod baseline;
pub mod overlay;
pub mod plot;
pub mod presets;
mod stats;
pub mod validate;

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algorithms::{self, Algorithm, RunConfig};
use crate::error::{FedError, Result};
use crate::federation::{largest_remainder, partition_with_sizes, plan_sizes, ClientShard, PartitionScheme};
use crate::model::{generate_dataset, ModelSpec, TrueParameter};
use crate::privacy::{calibrate_clip_bound, ClipBound, PrivacyBudget};
use crate::seed::{self, tag};

pub use baseline::{centralized_baseline, local_fit_baseline, BaselineFit};
pub use stats::{bootstrap_mean_ci, summarize, SummaryRow};

/// What the axis values of an experiment mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of clients, each holding about `local_n` samples.
    ClientsFixedLocalN,
    /// Number of clients sharing `total_n` samples.
    ClientsFixedTotalN,
    /// Iteration count: `K2` for FedHybrid, `K` for the others.
    Iterations,
    /// Common local sample size with `m` clients.
    LocalSizeDistribution,
}

/// How the clip bound of each repetition is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Largest per-client 90th percentile of gradient norms at zero.
    #[default]
    Calibrate,
    Fixed(f64),
}

/// A declarative simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub model: ModelSpec,
    pub theta0: TrueParameter,
    #[serde(default = "one")]
    pub sigma_c: f64,
    pub sweep_axis: SweepAxis,
    pub axis_values: Vec<f64>,
    /// Hyper-parameter template; `algorithm`, `mu`, `clip`, `seed` and
    /// `noiseless` are set per run.
    #[serde(default)]
    pub fixed: RunConfig,
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "equal_partition")]
    pub partition: PartitionScheme,
    /// Clients when the axis does not set them.
    #[serde(default)]
    pub m: Option<usize>,
    /// Local sample size for equal partitions.
    #[serde(default)]
    pub local_n: Option<usize>,
    /// Total sample size for the fixed-total axis.
    #[serde(default)]
    pub total_n: Option<usize>,
    #[serde(default = "hundred")]
    pub reps: usize,
    /// Privacy budgets; `inf` requests noiseless runs.
    pub mu_values: Vec<f64>,
    #[serde(default)]
    pub clip: ClipMode,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn hundred() -> usize {
    100
}

fn equal_partition() -> PartitionScheme {
    PartitionScheme::Equal
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |reason: &str| Err(FedError::Config(format!("experiment `{}`: {reason}", self.name)));
        self.model.validate()?;
        if self.theta0.theta0.len() != self.model.d {
            return cfg("theta0 length differs from d");
        }
        if self.reps == 0 {
            return cfg("reps must be at least 1");
        }
        if self.axis_values.is_empty() {
            return cfg("axis_values is empty");
        }
        if self.algorithms.is_empty() {
            return cfg("algorithms is empty");
        }
        if self.mu_values.is_empty() || self.mu_values.iter().any(|m| !(*m > 0.0)) {
            return cfg("mu_values must be nonempty and positive");
        }
        if !(self.sigma_c > 0.0 && self.sigma_c.is_finite()) {
            return cfg("sigma_c must be positive");
        }
        if let ClipMode::Fixed(b) = self.clip {
            if !(b > 0.0 && b.is_finite()) {
                return cfg("fixed clip bound must be positive and finite");
            }
        }
        self.partition.validate()?;
        for &v in &self.axis_values {
            if !(v >= 1.0 && v.fract() == 0.0) {
                return cfg("axis values must be positive integers");
            }
        }
        let needs = |field: Option<usize>, name: &str| match field {
            Some(v) if v > 0 => Ok(()),
            _ => Err(FedError::Config(format!("experiment `{}`: sweep needs `{name}`", self.name))),
        };
        let equal_like = !self.partition.samples_sizes();
        match self.sweep_axis {
            SweepAxis::ClientsFixedLocalN if equal_like => needs(self.local_n, "local_n")?,
            SweepAxis::ClientsFixedLocalN => {}
            SweepAxis::ClientsFixedTotalN => needs(self.total_n, "total_n")?,
            SweepAxis::Iterations => {
                needs(self.m, "m")?;
                if equal_like {
                    needs(self.local_n, "local_n")?;
                }
            }
            SweepAxis::LocalSizeDistribution => needs(self.m, "m")?,
        }
        for alg in &self.algorithms {
            let mut c = self.fixed.clone();
            c.algorithm = *alg;
            c.noiseless = true;
            c.clip = ClipBound::unbounded();
            c.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).map_err(|e| FedError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes")
    }

    /// Client sizes at one axis point for one repetition.
    pub fn client_sizes(&self, axis_value: f64, sizes_seed: u64) -> Result<Vec<usize>> {
        let v = axis_value as usize;
        let (m, total) = match self.sweep_axis {
            SweepAxis::ClientsFixedLocalN => (v, self.local_n.map(|n| n * v)),
            SweepAxis::ClientsFixedTotalN => (v, self.total_n),
            SweepAxis::Iterations => {
                let m = self.m.unwrap_or(1);
                (m, self.local_n.map(|n| n * m))
            }
            SweepAxis::LocalSizeDistribution => {
                let m = self.m.unwrap_or(1);
                (m, Some(v * m))
            }
        };
        match (self.partition.samples_sizes(), self.sweep_axis, total) {
            (true, SweepAxis::ClientsFixedTotalN, Some(total)) => {
                // Sampled sizes set the shares of a fixed total; every client keeps two samples.
                let drawn = plan_sizes(&self.partition, m, None, sizes_seed)?;
                if total < 2 * m {
                    return Err(FedError::InfeasiblePartition(format!("N = {total} cannot give {m} clients two samples each")));
                }
                let sum: usize = drawn.iter().sum();
                let shares: Vec<f64> = drawn.iter().map(|&s| s as f64 / sum as f64).collect();
                Ok(largest_remainder(&shares, total - 2 * m).into_iter().map(|s| s + 2).collect())
            }
            _ => plan_sizes(&self.partition, m, total, sizes_seed),
        }
    }

    fn run_config(&self, algorithm: Algorithm, axis_value: f64, mu: f64, clip: ClipBound, seed: u64) -> RunConfig {
        let mut cfg = self.fixed.clone();
        cfg.algorithm = algorithm;
        cfg.seed = seed;
        if self.sweep_axis == SweepAxis::Iterations {
            let k = axis_value as usize;
            if algorithm == Algorithm::FedHybrid {
                cfg.k2 = k;
            } else {
                cfg.k = k;
            }
        }
        if mu.is_finite() {
            cfg.noiseless = false;
            cfg.mu = PrivacyBudget { mu };
            cfg.clip = clip;
        } else {
            cfg.noiseless = true;
            cfg.mu = PrivacyBudget { mu: f64::INFINITY };
            cfg.clip = ClipBound::unbounded();
        }
        cfg
    }
}

/// Whether a row comes from a simulation or a closed-form curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSource {
    Empirical,
    Theory,
}

/// One CSV line: a single estimator run (or one theory point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub algorithm: Algorithm,
    pub mu: f64,
    pub m: usize,
    #[serde(rename = "N")]
    pub n_total: usize,
    pub axis_value: f64,
    pub rep: usize,
    pub mse: f64,
    pub uplink_scalars: u64,
    pub runtime_ms: u64,
    pub seed: u64,
    pub status: String,
    pub source: RowSource,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }
}

pub const STATUS_OK: &str = "ok";

/// Options that do not change the simulated numbers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HarnessOptions {
    /// Write wall-clock run times; otherwise `runtime_ms` is 0 so output is
    /// reproducible byte for byte.
    pub record_timing: bool,
}

/// `||theta_hat - theta0||^2`.
pub fn mse(theta_hat: &DVector<f64>, theta0: &DVector<f64>) -> f64 {
    (theta_hat - theta0).norm_squared()
}

fn status_of(err: &FedError) -> String {
    match err {
        FedError::Diverged { .. } => "diverged".into(),
        FedError::HessianSingular { .. } => "hessian_singular".into(),
        FedError::SolveFailed(_) => "solve_failed".into(),
        FedError::DegenerateClipBound => "degenerate_clip".into(),
        FedError::InfeasiblePartition(_) => "infeasible_partition".into(),
        _ => "error".into(),
    }
}

/// Seed of one estimator run. Counter-based, so distinct tuples never collide
/// within an experiment.
pub fn run_seed(spec_seed: u64, rep: usize, algorithm: Algorithm, mu_index: usize, axis_index: usize) -> u64 {
    seed::derive(spec_seed, &[tag::RUN, rep as u64, algorithm.id(), mu_index as u64, axis_index as u64])
}

/// Seed of the dataset shared by all runs at one (axis point, repetition).
pub fn data_seed(spec_seed: u64, axis_index: usize, rep: usize) -> u64 {
    seed::derive(spec_seed, &[tag::DATA, axis_index as u64, rep as u64])
}

/// All runs of one (axis point, repetition) on a freshly generated dataset.
fn run_cell(spec: &ExperimentSpec, axis_index: usize, rep: usize, opts: HarnessOptions) -> Vec<ResultRow> {
    let axis_value = spec.axis_values[axis_index];
    // Iteration sweeps reuse one dataset per repetition across the axis.
    let data_axis = if spec.sweep_axis == SweepAxis::Iterations { 0 } else { axis_index };
    let dseed = data_seed(spec.seed, data_axis, rep);
    let theta0 = spec.theta0.as_vector();
    let mut rows = Vec::with_capacity(spec.algorithms.len() * spec.mu_values.len());
    let prepared = (|| -> Result<(Vec<ClientShard>, Option<ClipBound>)> {
        let sizes = spec.client_sizes(axis_value, dseed)?;
        let total: usize = sizes.iter().sum();
        let data = generate_dataset(&spec.model, &spec.theta0, total, spec.sigma_c, dseed)?;
        let shards = partition_with_sizes(&data, &sizes, dseed)?;
        let clip = match spec.clip {
            ClipMode::Fixed(b) => Some(ClipBound::user_fixed(b)?),
            ClipMode::Calibrate if spec.mu_values.iter().any(|m| m.is_finite()) => Some(calibrate_clip_bound(&shards, &spec.model)?),
            ClipMode::Calibrate => None,
        };
        Ok((shards, clip))
    })();
    for &algorithm in &spec.algorithms {
        for (mu_index, &mu) in spec.mu_values.iter().enumerate() {
            let seed = run_seed(spec.seed, rep, algorithm, mu_index, axis_index);
            let mut row = ResultRow {
                experiment: spec.name.clone(),
                algorithm,
                mu,
                m: 0,
                n_total: 0,
                axis_value,
                rep,
                mse: f64::NAN,
                uplink_scalars: 0,
                runtime_ms: 0,
                seed,
                status: STATUS_OK.into(),
                source: RowSource::Empirical,
            };
            match &prepared {
                Err(e) => row.status = status_of(e),
                Ok((shards, clip)) => {
                    row.m = shards.len();
                    row.n_total = shards.iter().map(ClientShard::n).sum();
                    let cfg = spec.run_config(algorithm, axis_value, mu, clip.unwrap_or(ClipBound::unbounded()), seed);
                    let start = Instant::now();
                    match algorithms::run(shards, &spec.model, &cfg) {
                        Ok(tr) => {
                            row.mse = mse(&tr.final_theta, &theta0);
                            row.uplink_scalars = tr.total_ledger().uplink_scalars;
                        }
                        Err(e) => row.status = status_of(&e),
                    }
                    if opts.record_timing {
                        row.runtime_ms = start.elapsed().as_millis() as u64;
                    }
                }
            }
            rows.push(row);
        }
    }
    rows
}

/// Canonical row order: experiment blocks as given, then axis value,
/// algorithm, budget and repetition.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.axis_value
            .total_cmp(&b.axis_value)
            .then(a.algorithm.cmp(&b.algorithm))
            .then(a.mu.total_cmp(&b.mu))
            .then(a.rep.cmp(&b.rep))
            .then(a.source.cmp(&b.source))
    });
}

/// Runs every (axis point, repetition, algorithm, budget) combination. Cells run
/// in parallel on the current rayon pool; rows come back in canonical order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>> {
    run_experiment_with(spec, HarnessOptions::default())
}

pub fn run_experiment_with(spec: &ExperimentSpec, opts: HarnessOptions) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let cells: Vec<(usize, usize)> = (0..spec.axis_values.len()).flat_map(|a| (0..spec.reps).map(move |r| (a, r))).collect();
    log::info!("experiment `{}`: {} cells", spec.name, cells.len());
    let mut rows: Vec<ResultRow> = cells.par_iter().flat_map_iter(|&(a, r)| run_cell(spec, a, r, opts)).collect();
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| FedError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| FedError::Io(e.to_string()))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| FedError::Io(e.to_string())))
        .collect()
}

pub fn write_csv_file(rows: &[ResultRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| FedError::Io(format!("{}: {e}", path.display())))?;
    write_csv(rows, std::io::BufWriter::new(file))
}

pub fn read_csv_file(path: &Path) -> Result<Vec<ResultRow>> {
    let file = std::fs::File::open(path).map_err(|e| FedError::Io(format!("{}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(file))
}

//! Client shards, partitioning, weighted aggregation and communication accounting.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::algorithms::Algorithm;
use crate::error::{FedError, Result};
use crate::model::Sample;
use crate::seed;

/// One client's local data together with the seed of its private random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub id: usize,
    pub samples: Vec<Sample>,
    pub stream_seed: u64,
}

impl ClientShard {
    pub fn new(id: usize, samples: Vec<Sample>, stream_seed: u64) -> Self {
        ClientShard {
            id,
            samples,
            stream_seed,
        }
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }
}

/// Entry of an exported shard manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifestEntry {
    pub client_id: usize,
    pub n_i: usize,
    pub seed: u64,
}

pub fn shard_manifest(shards: &[ClientShard]) -> Vec<ShardManifestEntry> {
    shards
        .iter()
        .map(|s| ShardManifestEntry {
            client_id: s.id,
            n_i: s.n(),
            seed: s.stream_seed,
        })
        .collect()
}

pub fn shard_manifest_json(shards: &[ClientShard]) -> String {
    serde_json::to_string_pretty(&shard_manifest(shards)).expect("manifest serializes")
}

/// Aggregation weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector {
    w: Vec<f64>,
}

impl WeightVector {
    /// Normalises nonnegative scores onto the simplex.
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(FedError::Empty("weights"));
        }
        if scores.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(FedError::invalid("weights", "scores must be finite and nonnegative"));
        }
        let total: f64 = scores.iter().sum();
        if !(total > 0.0) {
            return Err(FedError::invalid("weights", "scores sum to zero"));
        }
        Ok(WeightVector {
            w: scores.into_iter().map(|s| s / total).collect(),
        })
    }

    pub fn one_hot(m: usize, i: usize) -> Self {
        let mut w = vec![0.0; m];
        w[i] = 1.0;
        WeightVector { w }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

/// How a pooled dataset is split across clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionScheme {
    /// Sizes differ by at most one.
    Equal,
    /// Sizes drawn i.i.d. from the discrete uniform distribution on `[lo, hi]`.
    UniformRange { lo: usize, hi: usize },
    /// Sizes drawn i.i.d. log-normal, rounded and floored at 2.
    LogNormal { meanlog: f64, sdlog: f64 },
    /// Sizes proportional to the given shares, rounded by largest remainder.
    Proportions { shares: Vec<f64> },
    /// Every client gets `min`; the remainder is assigned uniformly at random.
    MinSizePlusRandom { min: usize },
}

impl PartitionScheme {
    pub fn validate(&self) -> Result<()> {
        match self {
            PartitionScheme::Equal => Ok(()),
            PartitionScheme::UniformRange { lo, hi } => {
                if lo > hi || *lo == 0 {
                    Err(FedError::invalid("partition", format!("need 1 <= lo <= hi, got [{lo}, {hi}]")))
                } else {
                    Ok(())
                }
            }
            PartitionScheme::LogNormal { meanlog, sdlog } => {
                if !(*sdlog > 0.0) || !meanlog.is_finite() {
                    Err(FedError::invalid("partition", "log-normal needs sdlog > 0"))
                } else {
                    Ok(())
                }
            }
            PartitionScheme::Proportions { shares } => {
                let total: f64 = shares.iter().sum();
                if shares.is_empty() || shares.iter().any(|s| !(*s >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                    Err(FedError::invalid("partition", "proportions must be nonnegative and sum to 1"))
                } else {
                    Ok(())
                }
            }
            PartitionScheme::MinSizePlusRandom { .. } => Ok(()),
        }
    }

    /// Whether the scheme draws client sizes itself (so that they determine `N`).
    pub fn samples_sizes(&self) -> bool {
        matches!(self, PartitionScheme::UniformRange { .. } | PartitionScheme::LogNormal { .. })
    }
}

/// Client sizes for `m` clients. `total` is required by schemes that split a given
/// total and ignored by schemes that sample sizes.
pub fn plan_sizes(scheme: &PartitionScheme, m: usize, total: Option<usize>, seed_value: u64) -> Result<Vec<usize>> {
    scheme.validate()?;
    if m == 0 {
        return Err(FedError::InfeasiblePartition("m must be at least 1".into()));
    }
    let mut rng = seed::rng_from(seed::derive(seed_value, &[seed::tag::PARTITION]));
    let need_total = || total.ok_or_else(|| FedError::InfeasiblePartition(format!("{scheme:?} needs a total sample size")));
    let sizes = match scheme {
        PartitionScheme::Equal => {
            let n = need_total()?;
            if m > n {
                return Err(FedError::InfeasiblePartition(format!("m = {m} exceeds N = {n}")));
            }
            (0..m).map(|i| n / m + usize::from(i < n % m)).collect()
        }
        PartitionScheme::UniformRange { lo, hi } => (0..m).map(|_| rng.random_range(*lo..=*hi)).collect(),
        PartitionScheme::LogNormal { meanlog, sdlog } => {
            let dist = LogNormal::new(*meanlog, *sdlog).map_err(|e| FedError::invalid("partition", e.to_string()))?;
            (0..m).map(|_| (dist.sample(&mut rng).round() as usize).max(2)).collect()
        }
        PartitionScheme::Proportions { shares } => {
            if shares.len() != m {
                return Err(FedError::InfeasiblePartition(format!("{} proportions for {m} clients", shares.len())));
            }
            largest_remainder(shares, need_total()?)
        }
        PartitionScheme::MinSizePlusRandom { min } => {
            let n = need_total()?;
            if m * min > n {
                return Err(FedError::InfeasiblePartition(format!("{m} clients of at least {min} exceed N = {n}")));
            }
            let mut sizes = vec![*min; m];
            for _ in 0..(n - m * min) {
                sizes[rng.random_range(0..m)] += 1;
            }
            sizes
        }
    };
    if sizes.contains(&0) {
        return Err(FedError::InfeasiblePartition(format!("scheme {scheme:?} leaves an empty client")));
    }
    Ok(sizes)
}

/// Rounds `shares * total` to integers summing exactly to `total`.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    // Ties broken by index for determinism.
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Splits `dataset` into shards of the given sizes after a seeded shuffle.
pub fn partition_with_sizes(dataset: &[Sample], sizes: &[usize], seed_value: u64) -> Result<Vec<ClientShard>> {
    let needed: usize = sizes.iter().sum();
    if needed > dataset.len() {
        return Err(FedError::InfeasiblePartition(format!(
            "sizes need {needed} samples but the dataset has {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seed::rng_from(seed::derive(seed_value, &[seed::tag::PARTITION, 1])));
    let mut cursor = 0;
    Ok(sizes
        .iter()
        .enumerate()
        .map(|(id, &n)| {
            let samples = order[cursor..cursor + n].iter().map(|&j| dataset[j].clone()).collect();
            cursor += n;
            ClientShard::new(id, samples, seed::derive(seed_value, &[seed::tag::SHARD, id as u64]))
        })
        .collect())
}

/// Partitions a pooled dataset across `m` clients.
pub fn partition(dataset: &[Sample], m: usize, scheme: &PartitionScheme, seed_value: u64) -> Result<Vec<ClientShard>> {
    if dataset.is_empty() {
        return Err(FedError::Empty("dataset"));
    }
    if m > dataset.len() {
        return Err(FedError::InfeasiblePartition(format!("m = {m} exceeds N = {}", dataset.len())));
    }
    let sizes = plan_sizes(scheme, m, Some(dataset.len()), seed_value)?;
    partition_with_sizes(dataset, &sizes, seed_value)
}

/// `w_i = n_i / N`.
pub fn default_weights(shards: &[ClientShard]) -> Result<WeightVector> {
    WeightVector::from_scores(shards.iter().map(|s| s.n() as f64).collect())
}

/// Inverse-variance weights `w_i ∝ (T / n_i + B^2 d K / (mu^2 n_i^2))^{-1}`.
pub fn optimal_weights(sizes: &[usize], trace_sigma_proxy: f64, b: f64, d: usize, k: usize, mu: f64) -> Result<WeightVector> {
    if sizes.is_empty() {
        return Err(FedError::Empty("sizes"));
    }
    if sizes.contains(&0) || !(trace_sigma_proxy > 0.0) || !(b > 0.0) || d == 0 || k == 0 || !(mu > 0.0) {
        return Err(FedError::invalid("optimal_weights", "all inputs must be positive"));
    }
    let privacy = b * b * d as f64 * k as f64 / (mu * mu);
    let scores = sizes
        .iter()
        .map(|&n| {
            let n = n as f64;
            let var = trace_sigma_proxy / n + if privacy.is_finite() { privacy / (n * n) } else { f64::INFINITY };
            1.0 / var
        })
        .collect();
    WeightVector::from_scores(scores)
}

/// `sum_i w_i v_i`, accumulated in client order.
pub fn aggregate_weighted(vectors: &[DVector<f64>], w: &WeightVector) -> Result<DVector<f64>> {
    if vectors.is_empty() {
        return Err(FedError::Empty("vectors"));
    }
    if vectors.len() != w.len() {
        return Err(FedError::DimensionMismatch {
            expected: w.len(),
            got: vectors.len(),
        });
    }
    let d = vectors[0].len();
    let mut out = DVector::zeros(d);
    for (v, wi) in vectors.iter().zip(w.as_slice()) {
        if v.len() != d {
            return Err(FedError::DimensionMismatch { expected: d, got: v.len() });
        }
        out.axpy(*wi, v, 1.0);
    }
    Ok(out)
}

/// Scalars moved between server and clients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub uplink_scalars: u64,
    pub downlink_scalars: u64,
    pub rounds: u64,
}

impl CommLedger {
    /// Every client uploads `d` scalars.
    pub fn record_upload(&mut self, m: usize, d: usize) {
        self.uplink_scalars += (m * d) as u64;
    }

    /// The server sends `d` scalars to each of `m` clients.
    pub fn record_broadcast(&mut self, m: usize, d: usize) {
        self.downlink_scalars += (m * d) as u64;
    }

    pub fn record_round(&mut self) {
        self.rounds += 1;
    }

    pub fn total_scalars(&self) -> u64 {
        self.uplink_scalars + self.downlink_scalars
    }
}

impl std::ops::Add for CommLedger {
    type Output = CommLedger;

    fn add(self, o: CommLedger) -> CommLedger {
        CommLedger {
            uplink_scalars: self.uplink_scalars + o.uplink_scalars,
            downlink_scalars: self.downlink_scalars + o.downlink_scalars,
            rounds: self.rounds + o.rounds,
        }
    }
}

/// Iteration counts relevant to communication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Iterations {
    pub k: usize,
    pub k2: usize,
    pub r: usize,
}

/// Round traffic of a run: `m d` up and `m d` down per round, with
/// `K | K2 | R | 2 | R + 1` rounds for FedSGD | FedHybrid | FedAvg | FedNewton |
/// approximate Newton. The FedHybrid warm-start exchange is billed separately
/// by [`warm_start_cost`].
pub fn comm_cost(algorithm: Algorithm, m: usize, d: usize, iters: Iterations) -> CommLedger {
    let rounds = match algorithm {
        Algorithm::FedSgd => iters.k,
        Algorithm::FedHybrid => iters.k2,
        Algorithm::FedAvg => iters.r,
        Algorithm::FedNewton => 2,
        Algorithm::ApproxNewton => iters.r + 1,
    } as u64;
    let per_round = (m * d) as u64;
    CommLedger {
        uplink_scalars: per_round * rounds,
        downlink_scalars: per_round * rounds,
        rounds,
    }
}

/// One-shot traffic outside the round structure: FedHybrid's upload of the local
/// warm-start estimates and the broadcast of their average.
pub fn warm_start_cost(algorithm: Algorithm, m: usize, d: usize) -> Option<CommLedger> {
    match algorithm {
        Algorithm::FedHybrid => Some(CommLedger {
            uplink_scalars: (m * d) as u64,
            downlink_scalars: (m * d) as u64,
            rounds: 1,
        }),
        _ => None,
    }
}

//! The private federated estimators.
//!
//! All estimators start from `theta = 0`, clip every per-sample gradient to the
//! configured bound before averaging, and draw client noise from a per-client
//! stream keyed by the shard seed and the run seed, so results do not depend on
//! the order in which clients are processed. The server always aggregates client
//! contributions in client-id order.

mod fedavg;
mod fedsgd;
mod newton;

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::federation::{self, ClientShard, CommLedger, Iterations, WeightVector};
use crate::model::{self, ModelSpec, Sample};
use crate::privacy::{ClipBound, NewtonConstants, NoisePlan, PrivacyBudget};
use crate::seed;

pub use fedavg::{fed_avg, fed_hybrid};
pub use fedsgd::fed_sgd;
pub use newton::{approx_newton_refine, fed_approx_newton, fed_newton, local_newton_step, split_shard, SplitShard};

/// Server iterates whose norm exceeds this abort the run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "FedSGD", alias = "fedsgd")]
    FedSgd,
    #[serde(rename = "FedHybrid", alias = "fedhybrid")]
    FedHybrid,
    #[serde(rename = "FedAvg", alias = "fedavg")]
    FedAvg,
    #[serde(rename = "FedNewton", alias = "fednewton")]
    FedNewton,
    /// FedAvg followed by a damped, ridge-regularised Newton step that uses the
    /// outer-product (Fisher) approximation of the Hessian.
    #[serde(rename = "ApproxNewton", alias = "approxnewton")]
    ApproxNewton,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::FedSgd,
        Algorithm::FedHybrid,
        Algorithm::FedAvg,
        Algorithm::FedNewton,
        Algorithm::ApproxNewton,
    ];

    /// The four estimators compared in the simulation studies.
    pub const CORE: [Algorithm; 4] = [Algorithm::FedSgd, Algorithm::FedHybrid, Algorithm::FedAvg, Algorithm::FedNewton];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedSgd => "FedSGD",
            Algorithm::FedHybrid => "FedHybrid",
            Algorithm::FedAvg => "FedAvg",
            Algorithm::FedNewton => "FedNewton",
            Algorithm::ApproxNewton => "ApproxNewton",
        }
    }

    /// Stable small integer used in seed derivation.
    pub fn id(self) -> u64 {
        match self {
            Algorithm::FedSgd => 1,
            Algorithm::FedHybrid => 2,
            Algorithm::FedAvg => 3,
            Algorithm::FedNewton => 4,
            Algorithm::ApproxNewton => 5,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| FedError::Config(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    /// `w_i = n_i / N`.
    #[default]
    SizeProportional,
    /// Inverse-variance weights accounting for privacy noise.
    Optimal,
}

/// Hyper-parameters of one estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Step size of FedSGD, FedAvg and the FedAvg stages of the Newton variants.
    pub eta: f64,
    /// FedHybrid local (stage I) step size.
    pub eta1: f64,
    /// FedHybrid server (stage II) step size.
    pub eta2: f64,
    /// FedSGD server iterations, or local iterations per FedAvg round.
    pub k: usize,
    /// FedHybrid local iterations.
    pub k1: usize,
    /// FedHybrid server iterations.
    pub k2: usize,
    /// FedAvg communication rounds.
    pub r: usize,
    pub mu: PrivacyBudget,
    pub clip: ClipBound,
    pub weights_mode: WeightsMode,
    /// Stand-in for `trace(Sigma)` in optimal weights; `None` means `d`.
    pub trace_sigma_proxy: Option<f64>,
    /// Approximate-Newton ridge `lambda`.
    pub ridge_lambda: f64,
    /// Approximate-Newton damping `alpha`.
    pub damping_alpha: f64,
    /// Ridge added to the local Hessian in FedNewton (0 = exact Newton).
    pub newton_ridge: f64,
    pub newton_constants: NewtonConstants,
    pub seed: u64,
    /// Run without privacy noise (`mu = infinity`).
    pub noiseless: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::defaults(Algorithm::FedSgd)
    }
}

impl RunConfig {
    /// Simulation-study defaults: FedSGD `eta = 0.5, K = 50`; FedHybrid
    /// `K1 = 30, K2 = 20, eta1 = eta2 = 0.5`; FedAvg `K = 50, R = 2`; FedNewton
    /// `K = 50` with one FedAvg round.
    pub fn defaults(algorithm: Algorithm) -> Self {
        let r = match algorithm {
            Algorithm::FedNewton => 1,
            _ => 2,
        };
        RunConfig {
            algorithm,
            eta: 0.5,
            eta1: 0.5,
            eta2: 0.5,
            k: 50,
            k1: 30,
            k2: 20,
            r,
            mu: PrivacyBudget { mu: 1.0 },
            clip: ClipBound::unbounded(),
            weights_mode: WeightsMode::SizeProportional,
            trace_sigma_proxy: None,
            ridge_lambda: 1e-3,
            damping_alpha: 1.0,
            newton_ridge: 0.0,
            newton_constants: NewtonConstants::Halves,
            seed: 0,
            noiseless: false,
        }
    }

    pub fn noiseless(algorithm: Algorithm) -> Self {
        RunConfig {
            noiseless: true,
            mu: PrivacyBudget { mu: f64::INFINITY },
            ..RunConfig::defaults(algorithm)
        }
    }

    pub fn iterations(&self) -> Iterations {
        Iterations {
            k: self.k,
            k2: self.k2,
            r: self.r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(FedError::invalid(name, format!("must be positive and finite, got {v}")))
            }
        };
        let at_least_one = |name: &'static str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(FedError::invalid(name, "must be at least 1"))
            }
        };
        match self.algorithm {
            Algorithm::FedSgd => {
                positive("eta", self.eta)?;
                at_least_one("K", self.k)?;
            }
            Algorithm::FedHybrid => {
                positive("eta1", self.eta1)?;
                positive("eta2", self.eta2)?;
                at_least_one("K1", self.k1)?;
            }
            Algorithm::FedAvg | Algorithm::ApproxNewton => {
                positive("eta", self.eta)?;
                at_least_one("K", self.k)?;
                at_least_one("R", self.r)?;
            }
            Algorithm::FedNewton => {
                positive("eta", self.eta)?;
                at_least_one("K", self.k)?;
            }
        }
        if self.algorithm == Algorithm::ApproxNewton {
            positive("ridge_lambda", self.ridge_lambda)?;
            if !(self.damping_alpha >= 0.0 && self.damping_alpha <= 1.0) {
                return Err(FedError::invalid("damping_alpha", "must lie in [0, 1]"));
            }
        }
        if !(self.newton_ridge >= 0.0) {
            return Err(FedError::invalid("newton_ridge", "must be nonnegative"));
        }
        if let Some(t) = self.trace_sigma_proxy {
            positive("trace_sigma_proxy", t)?;
        }
        if !self.noiseless {
            positive("mu", self.mu.mu)?;
            positive("B", self.clip.b)?;
        } else if !(self.clip.b > 0.0) {
            return Err(FedError::invalid("B", "must be positive"));
        }
        Ok(())
    }

    /// Step-size checks against the window `[1/(2 tau2), 9/(10 tau2)]` used by the
    /// FedSGD error bound. Advisory only.
    pub fn step_size_warnings(&self, spec: &ModelSpec) -> Vec<String> {
        let (lo, hi) = (1.0 / (2.0 * spec.tau2), 9.0 / (10.0 * spec.tau2));
        [("eta", self.eta), ("eta2", self.eta2)]
            .into_iter()
            .filter(|(_, v)| *v < lo || *v > hi)
            .map(|(n, v)| format!("{n} = {v} lies outside [{lo:.4}, {hi:.4}]"))
            .collect()
    }

    pub(crate) fn trace_proxy(&self, spec: &ModelSpec) -> f64 {
        self.trace_sigma_proxy.unwrap_or(spec.d as f64)
    }
}

/// The server-visible history of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Server iterates, starting with the initial point of the round structure.
    pub iterates: Vec<DVector<f64>>,
    pub final_theta: DVector<f64>,
    /// Round traffic.
    pub ledger: CommLedger,
    /// One-shot traffic outside the rounds (FedHybrid warm start).
    pub warm_start: Option<CommLedger>,
    /// Per-sample gradients that were scaled down by clipping.
    pub clip_events: u64,
    /// Each client's first privatized message, in client-id order.
    pub first_release: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn total_ledger(&self) -> CommLedger {
        self.ledger + self.warm_start.unwrap_or_default()
    }

    pub fn report(&self, cfg: &RunConfig) -> TrajectoryReport {
        TrajectoryReport {
            config: cfg.clone(),
            iterate_norms: self.iterates.iter().map(|t| t.norm()).collect(),
            final_theta: self.final_theta.as_slice().to_vec(),
            ledger: self.ledger,
            warm_start: self.warm_start,
            clip_events: self.clip_events,
        }
    }
}

/// JSON form of a [`Trajectory`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub config: RunConfig,
    pub iterate_norms: Vec<f64>,
    pub final_theta: Vec<f64>,
    pub ledger: CommLedger,
    pub warm_start: Option<CommLedger>,
    pub clip_events: u64,
}

/// Runs the estimator selected by `cfg.algorithm`.
pub fn run(shards: &[ClientShard], spec: &ModelSpec, cfg: &RunConfig) -> Result<Trajectory> {
    match cfg.algorithm {
        Algorithm::FedSgd => fed_sgd(shards, spec, cfg),
        Algorithm::FedHybrid => fed_hybrid(shards, spec, cfg),
        Algorithm::FedAvg => fed_avg(shards, spec, cfg),
        Algorithm::FedNewton => fed_newton(shards, spec, cfg),
        Algorithm::ApproxNewton => fed_approx_newton(shards, spec, cfg),
    }
}

/// Expected round traffic for `cfg` on `m` clients.
pub fn expected_ledger(cfg: &RunConfig, m: usize, d: usize) -> CommLedger {
    federation::comm_cost(cfg.algorithm, m, d, cfg.iterations())
}

pub(crate) fn check_shards(shards: &[ClientShard], spec: &ModelSpec) -> Result<()> {
    if shards.is_empty() {
        return Err(FedError::Empty("shards"));
    }
    for s in shards {
        if s.samples.is_empty() {
            return Err(FedError::Empty("shard"));
        }
        for x in &s.samples {
            if x.x.len() != spec.d {
                return Err(FedError::DimensionMismatch {
                    expected: spec.d,
                    got: x.x.len(),
                });
            }
        }
    }
    Ok(())
}

pub(crate) fn noise_plan(shards: &[ClientShard], spec: &ModelSpec, cfg: &RunConfig) -> Result<Option<NoisePlan>> {
    if cfg.noiseless {
        return Ok(None);
    }
    let sizes: Vec<usize> = shards.iter().map(ClientShard::n).collect();
    NoisePlan::build(cfg, spec, &sizes).map(Some)
}

/// Private noise stream of one client in one run.
pub(crate) fn client_rng(shard: &ClientShard, cfg: &RunConfig, tag: u64) -> ChaCha8Rng {
    seed::rng_from(seed::derive(shard.stream_seed, &[tag, cfg.seed]))
}

/// Mean of per-sample gradients each clipped to norm `b`. Returns the mean and
/// the number of gradients that were scaled down.
pub(crate) fn clipped_mean_gradient(spec: &ModelSpec, theta: &DVector<f64>, samples: &[Sample], b: f64) -> (DVector<f64>, u64) {
    let mut g = DVector::zeros(spec.d);
    let mut clipped = 0;
    for s in samples {
        let r = model::residual(spec.family, theta, s);
        let norm = r.abs() * s.x_norm();
        let mut scale = r;
        if norm > b {
            scale *= b / norm;
            clipped += 1;
        }
        for (gj, xj) in g.iter_mut().zip(&s.x) {
            *gj += scale * xj;
        }
    }
    (g / samples.len() as f64, clipped)
}

pub(crate) fn guard(theta: &DVector<f64>, iteration: usize) -> Result<()> {
    let norm = theta.norm();
    if norm.is_finite() && norm <= DIVERGENCE_THRESHOLD {
        Ok(())
    } else {
        Err(FedError::Diverged { iteration, norm })
    }
}

pub(crate) fn add_noise(v: &mut DVector<f64>, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        v.axpy(sigma, &model::standard_normal_vector(rng, v.len()), 1.0);
    }
}

pub(crate) fn size_weights(shards: &[ClientShard]) -> Result<WeightVector> {
    federation::default_weights(shards)
}

/// Aggregation weights for FedSGD-style gradient rounds and the FedNewton output.
pub(crate) fn round_weights(shards: &[ClientShard], spec: &ModelSpec, cfg: &RunConfig, k: usize) -> Result<WeightVector> {
    match cfg.weights_mode {
        WeightsMode::SizeProportional => size_weights(shards),
        WeightsMode::Optimal if cfg.noiseless || !cfg.clip.is_finite() => size_weights(shards),
        WeightsMode::Optimal => {
            let sizes: Vec<usize> = shards.iter().map(ClientShard::n).collect();
            federation::optimal_weights(&sizes, cfg.trace_proxy(spec), cfg.clip.b, spec.d, k.max(1), cfg.mu.mu)
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::federation::{partition, PartitionScheme};
    use crate::model::{generate_dataset, Family, TrueParameter};

    pub fn dataset(family: Family, d: usize, n: usize, seed: u64) -> (ModelSpec, Vec<Sample>) {
        let spec = ModelSpec::with_defaults(family, d, 1.0).unwrap();
        let data = generate_dataset(&spec, &TrueParameter::cyclic_default(d), n, 1.0, seed).unwrap();
        (spec, data)
    }

    pub fn shards(data: &[Sample], m: usize, seed: u64) -> Vec<ClientShard> {
        partition(data, m, &PartitionScheme::Equal, seed).unwrap()
    }

    /// Reference full-batch gradient descent on pooled data, written independently
    /// of the federated code paths.
    pub fn centralized_gd(spec: &ModelSpec, data: &[Sample], start: &DVector<f64>, eta: f64, steps: usize, b: f64) -> Vec<DVector<f64>> {
        let mut theta = start.clone();
        let mut out = vec![theta.clone()];
        for _ in 0..steps {
            let mut g = DVector::zeros(spec.d);
            for s in data {
                let gi = model::gradient(spec, &theta, s).unwrap();
                g += crate::privacy::clip(&gi, b);
            }
            theta -= g * (eta / data.len() as f64);
            out.push(theta.clone());
        }
        out
    }

    pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).amax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(a.name().to_lowercase().parse::<Algorithm>().unwrap(), a);
        }
        assert!("fedprox".parse::<Algorithm>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::defaults(Algorithm::FedSgd);
        c.clip = ClipBound::user_fixed(1.0).unwrap();
        assert!(c.validate().is_ok());
        c.k = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::defaults(Algorithm::FedSgd);
        assert!(c.validate().is_err(), "private run with unbounded clip");
        c.noiseless = true;
        assert!(c.validate().is_ok());
        let mut c = RunConfig::noiseless(Algorithm::ApproxNewton);
        c.damping_alpha = 1.5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::noiseless(Algorithm::FedHybrid);
        c.k2 = 0;
        assert!(c.validate().is_ok());
        c.eta1 = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_size_window() {
        let spec = ModelSpec::new(crate::model::Family::Linear, 2, 1.0, 1.0).unwrap();
        let mut c = RunConfig::defaults(Algorithm::FedSgd);
        c.eta = 0.6;
        c.eta2 = 0.6;
        assert!(c.step_size_warnings(&spec).is_empty());
        c.eta = 0.1;
        assert_eq!(c.step_size_warnings(&spec).len(), 1);
    }

    #[test]
    fn config_toml_round_trip() {
        let mut c = RunConfig::defaults(Algorithm::FedNewton);
        c.clip = ClipBound::user_fixed(2.0).unwrap();
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = toml::from_str("algorithm = \"FedAvg\"\nk = 7\n").unwrap();
        assert_eq!(partial.k, 7);
        assert_eq!(partial.eta, 0.5);
    }
    fn small_private(algorithm: Algorithm) -> RunConfig {
        let mut c = RunConfig::defaults(algorithm);
        c.k = 3;
        c.k1 = 3;
        c.k2 = 2;
        c.r = 2;
        c.clip = ClipBound::user_fixed(1.0).unwrap();
        c.mu = PrivacyBudget::new(1.0).unwrap();
        c
    }

    #[test]
    fn first_release_variance_matches_plan_for_every_algorithm() {
        // Oracle: the first privatized message minus the same message from a
        // noiseless run with identical clipping and split is pure N(0, sigma^2 I).
        use crate::model::Family;
        let (spec, data) = testutil::dataset(Family::Linear, 2, 40, 41);
        let sh = testutil::shards(&data, 2, 6);
        let seeds = 10_000u64;
        for alg in Algorithm::ALL {
            let cfg = small_private(alg);
            let stage = if alg == Algorithm::FedSgd {
                crate::privacy::NoiseStage::GradRound
            } else {
                crate::privacy::NoiseStage::LocalIterate
            };
            let sizes: Vec<usize> = sh.iter().map(ClientShard::n).collect();
            let sigma = NoisePlan::build(&cfg, &spec, &sizes).unwrap().sigma(0, stage).unwrap();
            let mut sq = [0.0; 2];
            for s in 0..seeds {
                let mut c = cfg.clone();
                c.seed = s;
                let noisy = run(&sh, &spec, &c).unwrap();
                c.noiseless = true;
                let clean = run(&sh, &spec, &c).unwrap();
                let diff = &noisy.first_release[0] - &clean.first_release[0];
                for j in 0..2 {
                    sq[j] += diff[j] * diff[j];
                }
            }
            for v in sq {
                let ratio = v / seeds as f64 / (sigma * sigma);
                assert!((ratio - 1.0).abs() < 0.03, "{alg}: variance ratio {ratio}");
            }
        }
    }

    #[test]
    fn single_client_noiseless_runs_match_centralized_reference() {
        use crate::model::Family;
        let (spec, data) = testutil::dataset(Family::Logistic, 3, 60, 42);
        let sh = testutil::shards(&data, 1, 1);
        let zero = DVector::zeros(3);
        for alg in [Algorithm::FedSgd, Algorithm::FedAvg, Algorithm::FedHybrid] {
            let mut c = RunConfig::noiseless(alg);
            c.k = 6;
            c.r = 2;
            c.k1 = 4;
            c.k2 = 5;
            let steps = match alg {
                Algorithm::FedSgd => 6,
                Algorithm::FedAvg => 12,
                _ => 9,
            };
            let tr = run(&sh, &spec, &c).unwrap();
            let reference = testutil::centralized_gd(&spec, &data, &zero, 0.5, steps, f64::INFINITY);
            assert!(testutil::max_abs_diff(&tr.final_theta, &reference[steps]) < 1e-10, "{alg}");
        }
    }

    #[test]
    fn trajectories_are_bit_identical_across_repeats() {
        use crate::model::Family;
        let (spec, data) = testutil::dataset(Family::Poisson, 3, 90, 43);
        let sh = testutil::shards(&data, 3, 2);
        for alg in Algorithm::ALL {
            let mut c = small_private(alg);
            c.seed = 77;
            assert_eq!(run(&sh, &spec, &c).unwrap(), run(&sh, &spec, &c).unwrap(), "{alg}");
        }
    }

    #[test]
    fn ledger_grid_for_every_algorithm() {
        use crate::model::Family;
        let (spec, data) = testutil::dataset(Family::Linear, 2, 60, 44);
        for m in [1, 2, 5] {
            let sh = testutil::shards(&data, m, 3);
            for alg in Algorithm::ALL {
                for (k, r) in [(1, 1), (4, 3)] {
                    let mut c = RunConfig::noiseless(alg);
                    c.k = k;
                    c.k2 = k;
                    c.r = r;
                    let tr = run(&sh, &spec, &c).unwrap();
                    assert_eq!(tr.ledger, expected_ledger(&c, m, 2), "{alg} m={m}");
                    assert_eq!(tr.warm_start.is_some(), alg == Algorithm::FedHybrid);
                }
            }
        }
    }

    #[test]
    fn report_serializes() {
        use crate::model::Family;
        let (spec, data) = testutil::dataset(Family::Linear, 2, 20, 45);
        let c = RunConfig::noiseless(Algorithm::FedAvg);
        let tr = run(&testutil::shards(&data, 2, 1), &spec, &c).unwrap();
        let json = serde_json::to_value(tr.report(&c)).unwrap();
        assert_eq!(json["ledger"]["rounds"], 2);
        assert_eq!(json["final_theta"].as_array().unwrap().len(), 2);
    }
}

//! Gaussian differential privacy accounting.
//!
//! Every privatized release in the estimators is a Gaussian mechanism: a statistic
//! with L2 sensitivity `s` plus `N(0, sigma^2 I)` noise is `s / sigma`-GDP, and a
//! sequence of such releases composes to `sqrt(sum mu_k^2)`-GDP. The per-client
//! noise scales below are chosen so that each client's full sequence of uploads
//! composes to the configured budget `mu`.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, RunConfig};
use crate::error::{FedError, Result};
use crate::federation::ClientShard;
use crate::model::{self, ModelSpec};

/// Per-client federated GDP target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrivacyBudget {
    pub mu: f64,
}

impl PrivacyBudget {
    pub fn new(mu: f64) -> Result<Self> {
        if mu > 0.0 && !mu.is_nan() {
            Ok(PrivacyBudget { mu })
        } else {
            Err(FedError::invalid("mu", format!("must be positive, got {mu}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClipProvenance {
    UserFixed,
    Percentile90AtZero,
}

/// Per-sample gradient norm cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBound {
    #[serde(rename = "B")]
    pub b: f64,
    pub provenance: ClipProvenance,
}

impl ClipBound {
    /// A user-supplied bound. `f64::INFINITY` disables clipping and is only accepted
    /// by noiseless runs.
    pub fn user_fixed(b: f64) -> Result<Self> {
        if b > 0.0 && !b.is_nan() {
            Ok(ClipBound {
                b,
                provenance: ClipProvenance::UserFixed,
            })
        } else {
            Err(FedError::invalid("B", format!("must be positive, got {b}")))
        }
    }

    pub fn unbounded() -> Self {
        ClipBound {
            b: f64::INFINITY,
            provenance: ClipProvenance::UserFixed,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite()
    }
}

/// `sqrt(sum mu_k^2)`: the GDP parameter of a composition of GDP mechanisms.
pub fn gdp_compose(mus: &[f64]) -> Result<f64> {
    if mus.is_empty() {
        return Err(FedError::Empty("mus"));
    }
    if let Some(bad) = mus.iter().find(|m| !(**m > 0.0)) {
        return Err(FedError::invalid("mus", format!("entries must be positive, got {bad}")));
    }
    Ok(mus.iter().map(|m| m * m).sum::<f64>().sqrt())
}

/// Releases `v + (sensitivity / mu) Z` with `Z ~ N(0, I)`.
pub fn gaussian_mechanism<R: Rng + ?Sized>(
    v: &DVector<f64>,
    sensitivity: f64,
    mu: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if !(sensitivity > 0.0) || !sensitivity.is_finite() {
        return Err(FedError::invalid("sensitivity", format!("must be positive, got {sensitivity}")));
    }
    if !(mu > 0.0) {
        return Err(FedError::invalid("mu", format!("must be positive, got {mu}")));
    }
    let scale = sensitivity / mu;
    Ok(v + model::standard_normal_vector(rng, v.len()) * scale)
}

/// Scales `g` onto the ball of radius `b` when it lies outside it.
pub fn clip(g: &DVector<f64>, b: f64) -> DVector<f64> {
    g * clip_factor(g.norm(), b)
}

/// `min(1, b / norm)`, with the convention that a zero vector is never scaled.
#[inline]
pub fn clip_factor(norm: f64, b: f64) -> f64 {
    if norm > b {
        b / norm
    } else {
        1.0
    }
}

/// Nearest-rank percentile: the `ceil(q n)`-th order statistic (1-based).
pub fn percentile_nearest_rank(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(FedError::Empty("values"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(FedError::invalid("q", format!("must lie in (0, 1], got {q}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// Data-driven clip bound: the largest per-client 90th percentile of per-sample
/// gradient norms at `theta = 0`.
pub fn calibrate_clip_bound(shards: &[ClientShard], spec: &ModelSpec) -> Result<ClipBound> {
    if shards.is_empty() {
        return Err(FedError::Empty("shards"));
    }
    let zero = DVector::zeros(spec.d);
    let mut b = 0.0f64;
    for shard in shards {
        if shard.samples.is_empty() {
            return Err(FedError::Empty("shard"));
        }
        let norms = shard
            .samples
            .iter()
            .map(|s| model::gradient(spec, &zero, s).map(|g| g.norm()))
            .collect::<Result<Vec<f64>>>()?;
        b = b.max(percentile_nearest_rank(&norms, 0.9)?);
    }
    if b > 0.0 {
        Ok(ClipBound {
            b,
            provenance: ClipProvenance::Percentile90AtZero,
        })
    } else {
        Err(FedError::DegenerateClipBound)
    }
}

/// `mu / sqrt(m)`: the guarantee of the released server trajectory towards a third
/// party who does not see client uploads.
pub fn third_party_mu(mu: f64, m: usize) -> f64 {
    mu / (m as f64).sqrt()
}

/// Gradient-round noise: `2 B sqrt(K) / (mu n_i)`.
pub fn noise_scale_fedsgd(b: f64, k: usize, mu: f64, n_i: usize) -> f64 {
    2.0 * b * (k as f64).sqrt() / (mu * n_i as f64)
}

/// Two-stage noise `(a_i, b_i)`: iterate noise for the local warm start and
/// gradient noise for the server stage, each stage spending `mu / sqrt(2)`.
pub fn noise_scale_fedhybrid(b: f64, eta1: f64, k1_i: usize, k2: usize, mu: f64, n_i: usize) -> (f64, f64) {
    let n = n_i as f64;
    let a = 2.0 * b * eta1 * (2.0 * k1_i as f64).sqrt() / (mu * n);
    let bb = 2.0 * b * (2.0 * k2 as f64).sqrt() / (mu * n);
    (a, bb)
}

/// Local-iterate noise `2 B eta sqrt(R K) / (mu n_i)`.
pub fn noise_scale_fedavg(b: f64, eta: f64, r: usize, k: usize, mu: f64, n_i: usize) -> f64 {
    2.0 * b * eta * ((r * k) as f64).sqrt() / (mu * n_i as f64)
}

/// Which constants the one-step Newton estimator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewtonConstants {
    /// Halves split, `B_new = 4 sqrt(2) B / tau1`.
    #[default]
    Halves,
    /// Thirds split, `B_new = 6 sqrt(2) B / tau1`.
    Thirds,
}

impl NewtonConstants {
    fn parts(self) -> f64 {
        match self {
            NewtonConstants::Halves => 2.0,
            NewtonConstants::Thirds => 3.0,
        }
    }

    /// Bound on the norm of the local Newton update used to scale its noise.
    pub fn newton_bound(self, b: f64, tau1: f64) -> f64 {
        2.0 * self.parts() * std::f64::consts::SQRT_2 * b / tau1
    }
}

/// `(sigma_avg, sigma_newton)` for the FedAvg warm start (one round) and the
/// Newton output.
pub fn noise_scale_fednewton(b: f64, eta: f64, k: usize, mu: f64, n_i: usize, tau1: f64) -> (f64, f64) {
    noise_scale_fednewton_with(NewtonConstants::Halves, b, eta, k, mu, n_i, tau1)
}

pub fn noise_scale_fednewton_with(
    constants: NewtonConstants,
    b: f64,
    eta: f64,
    k: usize,
    mu: f64,
    n_i: usize,
    tau1: f64,
) -> (f64, f64) {
    let n = n_i as f64;
    let p = constants.parts();
    let sigma_avg = 2.0 * p * b * eta * (2.0 * k as f64).sqrt() / (mu * n);
    let sigma_newton = 2.0 * constants.newton_bound(b, tau1) / (mu * n);
    (sigma_avg, sigma_newton)
}

/// Noise for the approximate-Newton variant: FedAvg stage
/// `2 B eta sqrt(2 R K) / (mu n_i)` and refinement output `2 B_new / (mu n_i)` with
/// `B_new = 2 sqrt(2) B / tau1`.
pub fn noise_scale_approx_newton(b: f64, eta: f64, r: usize, k: usize, mu: f64, n_i: usize, tau1: f64) -> (f64, f64) {
    let n = n_i as f64;
    let sigma_avg = 2.0 * b * eta * (2.0 * (r * k) as f64).sqrt() / (mu * n);
    let b_new = 2.0 * std::f64::consts::SQRT_2 * b / tau1;
    (sigma_avg, 2.0 * b_new / (mu * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoiseStage {
    /// Noise on an uploaded mean gradient.
    GradRound,
    /// Noise on every local gradient-descent iterate.
    LocalIterate,
    /// Noise on the uploaded local Newton estimate.
    NewtonOutput,
}

/// One (client, stage) row of a [`NoisePlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageNoise {
    pub client_id: usize,
    pub stage: NoiseStage,
    pub sigma: f64,
    /// Number of Gaussian releases the stage makes.
    pub releases: usize,
    /// GDP parameter of each release: sensitivity divided by `sigma`.
    pub mu_per_release: f64,
}

/// The complete noise schedule of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub algorithm: Algorithm,
    pub per_client: Vec<StageNoise>,
}

impl NoisePlan {
    /// Builds the schedule for `cfg` on clients of the given sizes.
    pub fn build(cfg: &RunConfig, spec: &ModelSpec, sizes: &[usize]) -> Result<NoisePlan> {
        if sizes.is_empty() {
            return Err(FedError::Empty("sizes"));
        }
        let b = cfg.clip.b;
        let mu = cfg.mu.mu;
        let mut per_client = Vec::new();
        for (id, &n) in sizes.iter().enumerate() {
            if n == 0 {
                return Err(FedError::Empty("shard"));
            }
            let nf = n as f64;
            let mut push = |stage, sigma: f64, releases: usize, sensitivity: f64| {
                if releases == 0 {
                    return;
                }
                per_client.push(StageNoise {
                    client_id: id,
                    stage,
                    sigma,
                    releases,
                    mu_per_release: sensitivity / sigma,
                });
            };
            match cfg.algorithm {
                Algorithm::FedSgd => {
                    let sigma = noise_scale_fedsgd(b, cfg.k, mu, n);
                    push(NoiseStage::GradRound, sigma, cfg.k, 2.0 * b / nf);
                }
                Algorithm::FedHybrid => {
                    let (a, bb) = noise_scale_fedhybrid(b, cfg.eta1, cfg.k1, cfg.k2, mu, n);
                    push(NoiseStage::LocalIterate, a, cfg.k1, 2.0 * b * cfg.eta1 / nf);
                    push(NoiseStage::GradRound, bb, cfg.k2, 2.0 * b / nf);
                }
                Algorithm::FedAvg => {
                    let sigma = noise_scale_fedavg(b, cfg.eta, cfg.r, cfg.k, mu, n);
                    push(NoiseStage::LocalIterate, sigma, cfg.r * cfg.k, 2.0 * b * cfg.eta / nf);
                }
                Algorithm::FedNewton => {
                    let c = cfg.newton_constants;
                    let (avg, newton) = noise_scale_fednewton_with(c, b, cfg.eta, cfg.k, mu, n, spec.tau1);
                    // Each stage touches a 1/p fraction of the shard.
                    let part = nf / c.parts();
                    push(NoiseStage::LocalIterate, avg, cfg.k, 2.0 * b * cfg.eta / part);
                    let newton_sensitivity = match c {
                        NewtonConstants::Halves => 8.0 * b / (spec.tau1 * nf),
                        NewtonConstants::Thirds => 12.0 * b / (spec.tau1 * nf),
                    };
                    push(NoiseStage::NewtonOutput, newton, 1, newton_sensitivity);
                }
                Algorithm::ApproxNewton => {
                    let (avg, newton) = noise_scale_approx_newton(b, cfg.eta, cfg.r, cfg.k, mu, n, spec.tau1);
                    push(NoiseStage::LocalIterate, avg, cfg.r * cfg.k, 2.0 * b * cfg.eta / nf);
                    push(NoiseStage::NewtonOutput, newton, 1, 4.0 * b / (spec.tau1 * nf));
                }
            }
        }
        Ok(NoisePlan {
            algorithm: cfg.algorithm,
            per_client,
        })
    }

    pub fn sigma(&self, client_id: usize, stage: NoiseStage) -> Option<f64> {
        self.per_client
            .iter()
            .find(|e| e.client_id == client_id && e.stage == stage)
            .map(|e| e.sigma)
    }

    /// Per-release GDP parameters of one client, in release order.
    pub fn release_budgets(&self, client_id: usize) -> Vec<f64> {
        self.per_client
            .iter()
            .filter(|e| e.client_id == client_id)
            .flat_map(|e| std::iter::repeat_n(e.mu_per_release, e.releases))
            .collect()
    }

    /// Composed guarantee of one client's uploads.
    pub fn composed_mu(&self, client_id: usize) -> Result<f64> {
        gdp_compose(&self.release_budgets(client_id))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("noise plan serializes")
    }
}

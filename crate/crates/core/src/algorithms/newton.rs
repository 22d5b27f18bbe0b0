use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::fedavg::{empty_trajectory, fedavg_rounds};
use super::{add_noise, check_shards, client_rng, clipped_mean_gradient, guard, noise_plan, round_weights, size_weights, RunConfig, Trajectory};
use crate::error::{FedError, Result};
use crate::federation::{aggregate_weighted, ClientShard};
use crate::model::{self, ModelSpec, Sample};
use crate::privacy::{clip, NewtonConstants, NoisePlan, NoiseStage};
use crate::seed::{self, tag};

/// Pivots of the Cholesky factor below this fraction of the largest pivot mark
/// the matrix as numerically singular.
const PIVOT_TOLERANCE: f64 = 1e-7;

/// A shard divided into the disjoint parts used by the one-step Newton estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitShard {
    pub id: usize,
    /// Size of the whole shard.
    pub n: usize,
    /// Samples for the FedAvg warm start.
    pub avg_part: Vec<Sample>,
    /// Samples for the local Hessian.
    pub hessian_part: Vec<Sample>,
    /// Samples for the local gradient.
    pub gradient_part: Vec<Sample>,
}

/// Shuffles the shard with a stream keyed by `run_seed` and splits it.
///
/// With [`NewtonConstants::Halves`] the first `ceil(n/2)` samples serve both the
/// warm start and the Hessian and the rest the gradient. With
/// [`NewtonConstants::Thirds`] the three roles use disjoint thirds.
pub fn split_shard(shard: &ClientShard, constants: NewtonConstants, run_seed: u64) -> Result<SplitShard> {
    let n = shard.n();
    let min = match constants {
        NewtonConstants::Halves => 2,
        NewtonConstants::Thirds => 3,
    };
    if n < min {
        return Err(FedError::InfeasiblePartition(format!(
            "client {} holds {n} samples but the Newton split needs at least {min}",
            shard.id
        )));
    }
    let mut samples = shard.samples.clone();
    let mut rng = seed::rng_from(seed::derive(shard.stream_seed, &[tag::SPLIT, run_seed]));
    samples.shuffle(&mut rng);
    Ok(match constants {
        NewtonConstants::Halves => {
            let gradient_part = samples.split_off(n.div_ceil(2));
            SplitShard {
                id: shard.id,
                n,
                avg_part: samples.clone(),
                hessian_part: samples,
                gradient_part,
            }
        }
        NewtonConstants::Thirds => {
            let a = n.div_ceil(3);
            let h = (n - a).div_ceil(2);
            let gradient_part = samples.split_off(a + h);
            let hessian_part = samples.split_off(a);
            SplitShard {
                id: shard.id,
                n,
                avg_part: samples,
                hessian_part,
                gradient_part,
            }
        }
    })
}

fn solve_spd(mut m: DMatrix<f64>, rhs: &DVector<f64>, client_id: usize) -> Result<DVector<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(FedError::HessianSingular { client_id });
    }
    m = (&m + m.transpose()) * 0.5;
    let chol: Cholesky<f64, Dyn> = Cholesky::new(m).ok_or(FedError::HessianSingular { client_id })?;
    let pivots = chol.l_dirty().diagonal();
    let max = pivots.amax();
    if pivots.iter().any(|p| *p <= PIVOT_TOLERANCE * max) {
        return Err(FedError::HessianSingular { client_id });
    }
    Ok(chol.solve(rhs))
}

/// Raises every eigenvalue of a symmetric matrix to at least `floor`.
fn floor_spectrum(h: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = ((&h + h.transpose()) * 0.5).symmetric_eigen();
    if eig.eigenvalues.min() >= floor {
        return h;
    }
    let lambda = eig.eigenvalues.map(|v| v.max(floor));
    &eig.eigenvectors * DMatrix::from_diagonal(&lambda) * eig.eigenvectors.transpose()
}

/// One private local Newton step from `theta_bar`: Hessian on the Hessian part,
/// clipped-gradient mean on the gradient part, Gaussian noise on the output.
/// A positive `hessian_floor` lifts small Hessian eigenvalues to that level,
/// which keeps `||H^-1|| <= 1 / hessian_floor` as the noise calibration assumes.
/// Returns the update and the number of clipped gradients.
#[allow(clippy::too_many_arguments)]
pub fn local_newton_step(
    split: &SplitShard,
    theta_bar: &DVector<f64>,
    spec: &ModelSpec,
    b: f64,
    ridge: f64,
    hessian_floor: f64,
    sigma_newton: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(DVector<f64>, u64)> {
    let mut h = model::hessian_avg(spec, theta_bar, &split.hessian_part)?;
    for j in 0..spec.d {
        h[(j, j)] += ridge;
    }
    if hessian_floor > 0.0 && h.iter().all(|v| v.is_finite()) {
        h = floor_spectrum(h, hessian_floor);
    }
    let (g, clipped) = clipped_mean_gradient(spec, theta_bar, &split.gradient_part, b);
    let step = solve_spd(h, &g, split.id)?;
    let mut out = theta_bar - step;
    add_noise(&mut out, sigma_newton, rng);
    Ok((out, clipped))
}

fn stage_sigma(plan: &Option<NoisePlan>, id: usize, stage: NoiseStage) -> f64 {
    plan.as_ref().and_then(|p| p.sigma(id, stage)).unwrap_or(0.0)
}

/// FedAvg with one round on the warm-start parts, then one private local
/// Newton step per client and a weighted average of the results.
pub fn fed_newton(shards: &[ClientShard], spec: &ModelSpec, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_shards(shards, spec)?;
    let m = shards.len();
    let splits = shards
        .iter()
        .map(|s| split_shard(s, cfg.newton_constants, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let plan = noise_plan(shards, spec, cfg)?;
    let sigma_avg: Vec<f64> = shards.iter().map(|s| stage_sigma(&plan, s.id, NoiseStage::LocalIterate)).collect();
    let mut rngs: Vec<ChaCha8Rng> = shards.iter().map(|s| client_rng(s, cfg, tag::NOISE)).collect();
    let mut out = empty_trajectory(spec.d);

    let parts: Vec<&[Sample]> = splits.iter().map(|s| s.avg_part.as_slice()).collect();
    // One warm-start round regardless of `cfg.r`.
    let theta1 = fedavg_rounds(&parts, spec, cfg, DVector::zeros(spec.d), 1, &sigma_avg, &mut rngs, &mut out)?;

    out.ledger.record_broadcast(m, spec.d);
    // Private runs enforce the curvature bound behind the Newton noise scale.
    let floor = if plan.is_some() { spec.tau1 } else { 0.0 };
    let mut locals = Vec::with_capacity(m);
    for (split, rng) in splits.iter().zip(rngs.iter_mut()) {
        let sigma = stage_sigma(&plan, split.id, NoiseStage::NewtonOutput);
        let (local, clipped) = local_newton_step(split, &theta1, spec, cfg.clip.b, cfg.newton_ridge, floor, sigma, rng)?;
        out.clip_events += clipped;
        locals.push(local);
    }
    out.ledger.record_upload(m, spec.d);
    out.ledger.record_round();
    let theta2 = aggregate_weighted(&locals, &round_weights(shards, spec, cfg, cfg.k)?)?;
    guard(&theta2, cfg.k + 1)?;
    out.iterates.push(theta2.clone());
    out.final_theta = theta2;
    Ok(out)
}

/// Mean gradient and mean outer product of per-sample gradients at `theta`.
fn gradient_and_fisher(spec: &ModelSpec, theta: &DVector<f64>, samples: &[Sample]) -> (DVector<f64>, DMatrix<f64>) {
    let d = spec.d;
    let mut g = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    for s in samples {
        let r = model::residual(spec.family, theta, s);
        let gi = DVector::from_iterator(d, s.x.iter().map(|x| r * x));
        h.ger(1.0, &gi, &gi, 1.0);
        g += gi;
    }
    let n = samples.len() as f64;
    (g / n, h / n)
}

#[allow(clippy::too_many_arguments)]
fn refine_with(
    shards: &[ClientShard],
    spec: &ModelSpec,
    theta_r: &DVector<f64>,
    cfg: &RunConfig,
    plan: &Option<NoisePlan>,
    rngs: &mut [ChaCha8Rng],
) -> Result<DVector<f64>> {
    let mut locals = Vec::with_capacity(shards.len());
    for (shard, rng) in shards.iter().zip(rngs.iter_mut()) {
        let (g, mut h) = gradient_and_fisher(spec, theta_r, &shard.samples);
        let g = clip(&g, cfg.clip.b);
        for j in 0..spec.d {
            h[(j, j)] += cfg.ridge_lambda;
        }
        let step = solve_spd(h, &g, shard.id).map_err(|_| FedError::SolveFailed(format!("ridge system of client {} is not positive definite", shard.id)))?;
        let mut local = theta_r - step * cfg.damping_alpha;
        add_noise(&mut local, stage_sigma(plan, shard.id, NoiseStage::NewtonOutput), rng);
        locals.push(local);
    }
    aggregate_weighted(&locals, &size_weights(shards)?)
}

/// Approximate-Newton refinement of `theta_r` using the outer-product Hessian
/// surrogate, a ridge `lambda`, damping `alpha` and the clipped mean gradient.
pub fn approx_newton_refine(shards: &[ClientShard], spec: &ModelSpec, theta_r: &DVector<f64>, cfg: &RunConfig) -> Result<DVector<f64>> {
    check_shards(shards, spec)?;
    if theta_r.len() != spec.d {
        return Err(FedError::DimensionMismatch {
            expected: spec.d,
            got: theta_r.len(),
        });
    }
    if !(cfg.ridge_lambda > 0.0) {
        return Err(FedError::invalid("ridge_lambda", "must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.damping_alpha) {
        return Err(FedError::invalid("damping_alpha", "must lie in [0, 1]"));
    }
    let plan = noise_plan(shards, spec, cfg)?;
    let mut rngs: Vec<ChaCha8Rng> = shards.iter().map(|s| client_rng(s, cfg, tag::NOISE)).collect();
    refine_with(shards, spec, theta_r, cfg, &plan, &mut rngs)
}

/// `R` rounds of FedAvg followed by one approximate-Newton refinement round.
pub fn fed_approx_newton(shards: &[ClientShard], spec: &ModelSpec, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_shards(shards, spec)?;
    let m = shards.len();
    let plan = noise_plan(shards, spec, cfg)?;
    let sigma_avg: Vec<f64> = shards.iter().map(|s| stage_sigma(&plan, s.id, NoiseStage::LocalIterate)).collect();
    let mut rngs: Vec<ChaCha8Rng> = shards.iter().map(|s| client_rng(s, cfg, tag::NOISE)).collect();
    let parts: Vec<&[Sample]> = shards.iter().map(|s| s.samples.as_slice()).collect();
    let mut out = empty_trajectory(spec.d);
    let theta_r = fedavg_rounds(&parts, spec, cfg, DVector::zeros(spec.d), cfg.r, &sigma_avg, &mut rngs, &mut out)?;
    out.ledger.record_broadcast(m, spec.d);
    let theta = refine_with(shards, spec, &theta_r, cfg, &plan, &mut rngs)?;
    out.ledger.record_upload(m, spec.d);
    out.ledger.record_round();
    guard(&theta, cfg.r * cfg.k + 1)?;
    out.iterates.push(theta.clone());
    out.final_theta = theta;
    Ok(out)
}

use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;

use super::fedsgd::server_gradient_descent;
use super::{add_noise, check_shards, client_rng, clipped_mean_gradient, guard, noise_plan, round_weights, size_weights, RunConfig, Trajectory};
use crate::error::Result;
use crate::federation::{aggregate_weighted, warm_start_cost, ClientShard, CommLedger};
use crate::model::{ModelSpec, Sample};
use crate::privacy::NoiseStage;
use crate::seed::tag;

/// Noisy local gradient descent on one client. `first` receives the first
/// privatized iterate if it is still empty.
#[allow(clippy::too_many_arguments)]
pub(crate) fn local_noisy_gd(
    spec: &ModelSpec,
    samples: &[Sample],
    start: &DVector<f64>,
    eta: f64,
    steps: usize,
    sigma: f64,
    b: f64,
    rng: &mut ChaCha8Rng,
    clip_events: &mut u64,
    first: &mut Option<DVector<f64>>,
) -> Result<DVector<f64>> {
    let mut theta = start.clone();
    for k in 0..steps {
        let (g, clipped) = clipped_mean_gradient(spec, &theta, samples, b);
        *clip_events += clipped;
        theta.axpy(-eta, &g, 1.0);
        add_noise(&mut theta, sigma, rng);
        guard(&theta, k + 1)?;
        if first.is_none() {
            *first = Some(theta.clone());
        }
    }
    Ok(theta)
}

/// Runs `rounds` FedAvg rounds from `theta` on the given per-client samples.
/// Aggregation weights are proportional to the sample counts used.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fedavg_rounds(
    parts: &[&[Sample]],
    spec: &ModelSpec,
    cfg: &RunConfig,
    mut theta: DVector<f64>,
    rounds: usize,
    sigmas: &[f64],
    rngs: &mut [ChaCha8Rng],
    out: &mut Trajectory,
) -> Result<DVector<f64>> {
    let m = parts.len();
    let sizes: Vec<f64> = parts.iter().map(|p| p.len() as f64).collect();
    let weights = crate::federation::WeightVector::from_scores(sizes)?;
    let mut firsts: Vec<Option<DVector<f64>>> = vec![None; m];
    out.iterates.push(theta.clone());
    for round in 0..rounds {
        out.ledger.record_broadcast(m, spec.d);
        let mut locals = Vec::with_capacity(m);
        for (i, samples) in parts.iter().enumerate() {
            let local = local_noisy_gd(spec, samples, &theta, cfg.eta, cfg.k, sigmas[i], cfg.clip.b, &mut rngs[i], &mut out.clip_events, &mut firsts[i])
                .map_err(|e| with_round(e, round, cfg.k))?;
            locals.push(local);
        }
        out.ledger.record_upload(m, spec.d);
        out.ledger.record_round();
        theta = aggregate_weighted(&locals, &weights)?;
        guard(&theta, (round + 1) * cfg.k)?;
        out.iterates.push(theta.clone());
    }
    if out.first_release.is_empty() {
        out.first_release = firsts.into_iter().flatten().collect();
    }
    Ok(theta)
}

fn with_round(e: crate::error::FedError, round: usize, k: usize) -> crate::error::FedError {
    match e {
        crate::error::FedError::Diverged { iteration, norm } => crate::error::FedError::Diverged {
            iteration: round * k + iteration,
            norm,
        },
        other => other,
    }
}

pub(crate) fn empty_trajectory(d: usize) -> Trajectory {
    Trajectory {
        iterates: Vec::new(),
        final_theta: DVector::zeros(d),
        ledger: CommLedger::default(),
        warm_start: None,
        clip_events: 0,
        first_release: Vec::new(),
    }
}

fn stage_sigmas(shards: &[ClientShard], plan: &Option<crate::privacy::NoisePlan>, stage: NoiseStage) -> Vec<f64> {
    shards
        .iter()
        .map(|s| plan.as_ref().and_then(|p| p.sigma(s.id, stage)).unwrap_or(0.0))
        .collect()
}

/// Private federated averaging: `R` rounds of `K` noisy local steps each.
pub fn fed_avg(shards: &[ClientShard], spec: &ModelSpec, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_shards(shards, spec)?;
    let plan = noise_plan(shards, spec, cfg)?;
    let sigmas = stage_sigmas(shards, &plan, NoiseStage::LocalIterate);
    let mut rngs: Vec<ChaCha8Rng> = shards.iter().map(|s| client_rng(s, cfg, tag::NOISE)).collect();
    let parts: Vec<&[Sample]> = shards.iter().map(|s| s.samples.as_slice()).collect();
    let mut out = empty_trajectory(spec.d);
    out.final_theta = fedavg_rounds(&parts, spec, cfg, DVector::zeros(spec.d), cfg.r, &sigmas, &mut rngs, &mut out)?;
    Ok(out)
}

/// Two-stage estimator: one FedAvg round of `K1` noisy local steps gives a warm
/// start, followed by `K2` rounds of private federated gradient descent.
pub fn fed_hybrid(shards: &[ClientShard], spec: &ModelSpec, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_shards(shards, spec)?;
    let m = shards.len();
    let plan = noise_plan(shards, spec, cfg)?;
    let a = stage_sigmas(shards, &plan, NoiseStage::LocalIterate);
    let b = stage_sigmas(shards, &plan, NoiseStage::GradRound);
    let mut rngs: Vec<ChaCha8Rng> = shards.iter().map(|s| client_rng(s, cfg, tag::NOISE)).collect();
    let mut out = empty_trajectory(spec.d);

    let zero = DVector::zeros(spec.d);
    let mut locals = Vec::with_capacity(m);
    let mut firsts = Vec::with_capacity(m);
    for (i, shard) in shards.iter().enumerate() {
        let mut first = None;
        let local = local_noisy_gd(spec, &shard.samples, &zero, cfg.eta1, cfg.k1, a[i], cfg.clip.b, &mut rngs[i], &mut out.clip_events, &mut first)?;
        locals.push(local);
        firsts.extend(first);
    }
    out.first_release = firsts;
    let warm = aggregate_weighted(&locals, &size_weights(shards)?)?;
    guard(&warm, cfg.k1)?;
    out.warm_start = warm_start_cost(cfg.algorithm, m, spec.d);

    let weights = round_weights(shards, spec, cfg, cfg.k2)?;
    let theta = server_gradient_descent(shards, spec, cfg, warm, cfg.eta2, cfg.k2, &b, &weights, &mut rngs, &mut out)?;
    out.final_theta = theta;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::super::{fed_sgd, run, Algorithm};
    use super::*;
    use crate::federation::{comm_cost, partition_with_sizes, Iterations};
    use crate::model::Family;

    #[test]
    fn single_client_fedavg_is_centralized_gd() {
        let (spec, data) = dataset(Family::Logistic, 3, 90, 21);
        let mut cfg = RunConfig::noiseless(Algorithm::FedAvg);
        cfg.k = 7;
        cfg.r = 3;
        let tr = fed_avg(&shards(&data, 1, 1), &spec, &cfg).unwrap();
        let reference = centralized_gd(&spec, &data, &DVector::zeros(3), cfg.eta, 21, f64::INFINITY);
        assert!(max_abs_diff(&tr.final_theta, &reference[21]) < 1e-10);
    }

    #[test]
    fn one_round_is_weighted_average_of_local_fits() {
        let (spec, data) = dataset(Family::Poisson, 2, 100, 22);
        let mut cfg = RunConfig::noiseless(Algorithm::FedAvg);
        cfg.eta = 0.2;
        cfg.k = 10;
        cfg.r = 1;
        let sizes = [20, 30, 50];
        let sh = partition_with_sizes(&data, &sizes, 3).unwrap();
        let tr = fed_avg(&sh, &spec, &cfg).unwrap();
        let mut expect = DVector::zeros(2);
        for s in &sh {
            let local = centralized_gd(&spec, &s.samples, &DVector::zeros(2), cfg.eta, cfg.k, f64::INFINITY);
            expect += local.last().unwrap() * (s.n() as f64 / 100.0);
        }
        assert!(max_abs_diff(&tr.final_theta, &expect) < 1e-10);
    }

    #[test]
    fn hybrid_without_stage_two_is_one_fedavg_round() {
        let (spec, data) = dataset(Family::Logistic, 2, 150, 23);
        let sh = shards(&data, 5, 2);
        let mut h = RunConfig::noiseless(Algorithm::FedHybrid);
        h.k1 = 12;
        h.k2 = 0;
        let mut a = RunConfig::noiseless(Algorithm::FedAvg);
        a.k = 12;
        a.r = 1;
        let th = fed_hybrid(&sh, &spec, &h).unwrap();
        let ta = fed_avg(&sh, &spec, &a).unwrap();
        assert!(max_abs_diff(&th.final_theta, &ta.final_theta) < 1e-12);
        assert_eq!(th.ledger.total_scalars(), 0);
        assert_eq!(th.warm_start.unwrap().uplink_scalars, 10);
    }

    #[test]
    fn hybrid_stage_two_continues_gradient_descent() {
        let (spec, data) = dataset(Family::Linear, 2, 80, 24);
        let sh = shards(&data, 4, 2);
        let mut h = RunConfig::noiseless(Algorithm::FedHybrid);
        h.k1 = 5;
        h.k2 = 8;
        let tr = fed_hybrid(&sh, &spec, &h).unwrap();
        let warm = &tr.iterates[0];
        let reference = centralized_gd(&spec, &data, warm, h.eta2, h.k2, f64::INFINITY);
        assert!(max_abs_diff(&tr.final_theta, reference.last().unwrap()) < 1e-10);
        assert_eq!(tr.ledger, comm_cost(Algorithm::FedHybrid, 4, 2, Iterations { k: 0, k2: 8, r: 0 }));
        assert_eq!(tr.total_ledger().uplink_scalars, 4 * 2 * 9);
    }

    #[test]
    fn fedavg_ledger_grid() {
        let (spec, data) = dataset(Family::Linear, 3, 60, 25);
        for m in [1, 3, 6] {
            let sh = shards(&data, m, 1);
            for r in [1, 2, 4] {
                let mut cfg = RunConfig::noiseless(Algorithm::FedAvg);
                cfg.k = 3;
                cfg.r = r;
                let tr = run(&sh, &spec, &cfg).unwrap();
                assert_eq!(tr.ledger, comm_cost(Algorithm::FedAvg, m, 3, cfg.iterations()));
                assert_eq!(tr.iterates.len(), r + 1);
            }
        }
    }

    #[test]
    fn hybrid_matches_fedsgd_when_warm_start_is_trivial() {
        // With eta1 tiny the warm start is essentially zero; stage II then tracks FedSGD.
        let (spec, data) = dataset(Family::Logistic, 2, 100, 27);
        let sh = shards(&data, 2, 1);
        let mut h = RunConfig::noiseless(Algorithm::FedHybrid);
        h.eta1 = 1e-12;
        h.k1 = 1;
        h.k2 = 10;
        let mut s = RunConfig::noiseless(Algorithm::FedSgd);
        s.k = 10;
        let a = fed_hybrid(&sh, &spec, &h).unwrap();
        let b = fed_sgd(&sh, &spec, &s).unwrap();
        assert!(max_abs_diff(&a.final_theta, &b.final_theta) < 1e-9);
    }
}

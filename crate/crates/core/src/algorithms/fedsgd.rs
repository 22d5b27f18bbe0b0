use nalgebra::DVector;
use rand_chacha::ChaCha8Rng;

use super::{add_noise, check_shards, client_rng, clipped_mean_gradient, guard, noise_plan, round_weights, RunConfig, Trajectory};
use crate::error::Result;
use crate::federation::{aggregate_weighted, ClientShard, CommLedger, WeightVector};
use crate::model::ModelSpec;
use crate::privacy::NoiseStage;
use crate::seed::tag;

/// Private federated gradient descent: each round every client uploads a noisy
/// clipped mean gradient and the server takes one weighted step.
pub fn fed_sgd(shards: &[ClientShard], spec: &ModelSpec, cfg: &RunConfig) -> Result<Trajectory> {
    cfg.validate()?;
    check_shards(shards, spec)?;
    let plan = noise_plan(shards, spec, cfg)?;
    let sigmas: Vec<f64> = shards
        .iter()
        .map(|s| plan.as_ref().and_then(|p| p.sigma(s.id, NoiseStage::GradRound)).unwrap_or(0.0))
        .collect();
    let weights = round_weights(shards, spec, cfg, cfg.k)?;
    let mut rngs: Vec<ChaCha8Rng> = shards.iter().map(|s| client_rng(s, cfg, tag::NOISE)).collect();
    let mut out = Trajectory {
        iterates: Vec::new(),
        final_theta: DVector::zeros(spec.d),
        ledger: CommLedger::default(),
        warm_start: None,
        clip_events: 0,
        first_release: Vec::new(),
    };
    let theta = DVector::zeros(spec.d);
    let theta = server_gradient_descent(shards, spec, cfg, theta, cfg.eta, cfg.k, &sigmas, &weights, &mut rngs, &mut out)?;
    out.final_theta = theta;
    Ok(out)
}

/// Runs `steps` noisy gradient rounds from `theta`, appending the iterates and
/// the traffic to `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn server_gradient_descent(
    shards: &[ClientShard],
    spec: &ModelSpec,
    cfg: &RunConfig,
    mut theta: DVector<f64>,
    eta: f64,
    steps: usize,
    sigmas: &[f64],
    weights: &WeightVector,
    rngs: &mut [ChaCha8Rng],
    out: &mut Trajectory,
) -> Result<DVector<f64>> {
    let m = shards.len();
    out.iterates.push(theta.clone());
    let record_first = out.first_release.is_empty();
    for k in 0..steps {
        let mut grads = Vec::with_capacity(m);
        for ((shard, rng), &sigma) in shards.iter().zip(rngs.iter_mut()).zip(sigmas) {
            let (mut g, clipped) = clipped_mean_gradient(spec, &theta, &shard.samples, cfg.clip.b);
            out.clip_events += clipped;
            add_noise(&mut g, sigma, rng);
            grads.push(g);
        }
        if record_first && k == 0 {
            out.first_release = grads.clone();
        }
        out.ledger.record_upload(m, spec.d);
        let g = aggregate_weighted(&grads, weights)?;
        theta.axpy(-eta, &g, 1.0);
        guard(&theta, k + 1)?;
        out.ledger.record_broadcast(m, spec.d);
        out.ledger.record_round();
        out.iterates.push(theta.clone());
    }
    Ok(theta)
}

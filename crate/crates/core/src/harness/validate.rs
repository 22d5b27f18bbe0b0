//! Fast invariant suite behind `fedm validate`.

use nalgebra::DVector;
use serde::Serialize;

use super::{run_experiment, ExperimentSpec, SweepAxis};
use crate::algorithms::{self, local_newton_step, split_shard, Algorithm, RunConfig};
use crate::federation::{comm_cost, partition, ClientShard, PartitionScheme};
use crate::model::{generate_dataset, mean_gradient, Family, ModelSpec, TrueParameter};
use crate::privacy::{calibrate_clip_bound, NewtonConstants, NoisePlan, PrivacyBudget};
use crate::seed;
use crate::theory::{minimax_lower_bound, upper_bound, RateInputs, TheoryConstants};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: std::result::Result<String, String>) -> CheckResult {
    match outcome {
        Ok(detail) => CheckResult { name, passed: true, detail },
        Err(detail) => CheckResult { name, passed: false, detail },
    }
}

fn fixture(family: Family, d: usize, n: usize, m: usize, seed_value: u64) -> (ModelSpec, Vec<ClientShard>) {
    let spec = ModelSpec::with_defaults(family, d, 1.0).expect("valid model");
    let data = generate_dataset(&spec, &TrueParameter::cyclic_default(d), n, 1.0, seed_value).expect("data");
    let shards = partition(&data, m, &PartitionScheme::Equal, seed_value).expect("partition");
    (spec, shards)
}

fn composition() -> std::result::Result<String, String> {
    let (spec, shards) = fixture(Family::Logistic, 3, 300, 4, 1);
    let sizes: Vec<usize> = shards.iter().map(ClientShard::n).collect();
    let mut worst: f64 = 0.0;
    for alg in Algorithm::ALL {
        let mut cfg = RunConfig::defaults(alg);
        cfg.mu = PrivacyBudget { mu: 1.7 };
        cfg.clip = calibrate_clip_bound(&shards, &spec).map_err(|e| e.to_string())?;
        let plan = NoisePlan::build(&cfg, &spec, &sizes).map_err(|e| e.to_string())?;
        for s in &shards {
            let mu = plan.composed_mu(s.id).map_err(|e| e.to_string())?;
            worst = worst.max((mu - 1.7).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!("max |composed - mu| = {worst:.1e}"))
    } else {
        Err(format!("composition off by {worst:.3e}"))
    }
}

fn ledgers() -> std::result::Result<String, String> {
    let (spec, shards) = fixture(Family::Linear, 3, 120, 4, 2);
    for alg in Algorithm::ALL {
        let cfg = RunConfig {
            k: 4,
            k1: 3,
            k2: 5,
            ..RunConfig::noiseless(alg)
        };
        let tr = algorithms::run(&shards, &spec, &cfg).map_err(|e| e.to_string())?;
        let expect = comm_cost(alg, shards.len(), spec.d, cfg.iterations());
        if tr.ledger != expect {
            return Err(format!("{alg}: ledger {:?} differs from {:?}", tr.ledger, expect));
        }
    }
    Ok("all algorithms match the cost table".into())
}

fn single_client_gd() -> std::result::Result<String, String> {
    let (spec, shards) = fixture(Family::Logistic, 3, 150, 1, 3);
    let cfg = RunConfig {
        k: 25,
        ..RunConfig::noiseless(Algorithm::FedSgd)
    };
    let tr = algorithms::run(&shards, &spec, &cfg).map_err(|e| e.to_string())?;
    let mut theta = DVector::zeros(spec.d);
    for _ in 0..cfg.k {
        let g = mean_gradient(&spec, &theta, &shards[0].samples).map_err(|e| e.to_string())?;
        theta.axpy(-cfg.eta, &g, 1.0);
    }
    let gap = (&tr.final_theta - &theta).amax();
    if gap <= 1e-10 {
        Ok(format!("max gap {gap:.1e}"))
    } else {
        Err(format!("FedSGD differs from gradient descent by {gap:.3e}"))
    }
}

fn newton_exactness() -> std::result::Result<String, String> {
    let (spec, shards) = fixture(Family::Linear, 3, 60, 1, 4);
    let mut split = split_shard(&shards[0], NewtonConstants::Halves, 0).map_err(|e| e.to_string())?;
    split.hessian_part = shards[0].samples.clone();
    split.gradient_part = shards[0].samples.clone();
    let mut rng = seed::rng_from(0);
    let a = local_newton_step(&split, &DVector::from_element(3, 10.0), &spec, f64::INFINITY, 0.0, 0.0, 0.0, &mut rng).map_err(|e| e.to_string())?;
    let b = local_newton_step(&split, &DVector::from_element(3, -4.0), &spec, f64::INFINITY, 0.0, 0.0, 0.0, &mut rng).map_err(|e| e.to_string())?;
    let residual = mean_gradient(&spec, &a.0, &shards[0].samples).map_err(|e| e.to_string())?.amax();
    let gap = (&a.0 - &b.0).amax();
    if residual <= 1e-8 && gap <= 1e-8 {
        Ok(format!("gradient at step {residual:.1e}"))
    } else {
        Err(format!("Newton step misses the minimizer: gradient {residual:.3e}, start dependence {gap:.3e}"))
    }
}

fn theory_invariants() -> std::result::Result<String, String> {
    let tc = TheoryConstants::default();
    let lb = minimax_lower_bound(&[10, 10], 2, 0.5, &tc).map_err(|e| e.to_string())?;
    if (lb.value - 0.11542).abs() > 1e-4 {
        return Err(format!("lower bound {} differs from 0.11542", lb.value));
    }
    let at = |alg, mu: f64, n: usize, k: usize| {
        let inputs = RateInputs {
            sizes: vec![n; 10],
            d: 5,
            mu,
            k,
            r: 2,
            tau1: 0.5,
            tau2: 1.0,
        };
        upper_bound(alg, &inputs, &tc).map_err(|e| e.to_string())
    };
    for alg in Algorithm::CORE {
        if at(alg, 2.0, 100, 50)? > at(alg, 1.0, 100, 50)? || at(alg, 1.0, 200, 50)? > at(alg, 1.0, 100, 50)? {
            return Err(format!("{alg} bound increases in mu or n"));
        }
    }
    if at(Algorithm::FedNewton, 1.0, 100, 10)? != at(Algorithm::FedNewton, 1.0, 100, 500)? {
        return Err("FedNewton bound depends on K".into());
    }
    Ok("bounds monotone, lower bound 0.11542".into())
}

fn determinism() -> std::result::Result<String, String> {
    let spec = ExperimentSpec {
        name: "validate".into(),
        model: ModelSpec::with_defaults(Family::Logistic, 3, 1.0).map_err(|e| e.to_string())?,
        theta0: TrueParameter::cyclic_default(3),
        sigma_c: 1.0,
        sweep_axis: SweepAxis::ClientsFixedLocalN,
        axis_values: vec![3.0, 6.0],
        fixed: RunConfig {
            k: 10,
            ..RunConfig::default()
        },
        algorithms: Algorithm::CORE.to_vec(),
        partition: PartitionScheme::Equal,
        m: None,
        local_n: Some(40),
        total_n: None,
        reps: 2,
        mu_values: vec![3.0],
        clip: super::ClipMode::Calibrate,
        seed: 9,
    };
    let a = run_experiment(&spec).map_err(|e| e.to_string())?;
    let b = run_experiment(&spec).map_err(|e| e.to_string())?;
    if a != b {
        return Err("repeated sweep differs".into());
    }
    if let Some(bad) = a.iter().find(|r| !r.is_ok()) {
        return Err(format!("{} failed with {}", bad.algorithm, bad.status));
    }
    Ok(format!("{} rows reproduced", a.len()))
}

/// Runs every check; each takes well under a second.
pub fn run_validation() -> Vec<CheckResult> {
    vec![
        check("privacy_composition", composition()),
        check("communication_ledger", ledgers()),
        check("single_client_gradient_descent", single_client_gd()),
        check("newton_exact_on_quadratics", newton_exactness()),
        check("theory_invariants", theory_invariants()),
        check("sweep_determinism", determinism()),
    ]
}

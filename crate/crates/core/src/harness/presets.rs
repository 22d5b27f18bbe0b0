//! Built-in simulation studies.
//!
//! | preset | design |
//! |--------|--------|
//! | `fig1` | FedSGD, FedHybrid; logistic; `m` in 20..60, one experiment per equal local size `n` in {30, 50, 70, 90, 110} |
//! | `fig2` | FedAvg, FedNewton; same grid as `fig1` |
//! | `fig3` | all four; logistic; `m` in 60..140 with equal (400), uniform [100, 700] and log-normal (5.5, 1) local sizes |
//! | `fig4` | all four; logistic; `K` in {10, 25, 50, 100, 200} at `mu` in {2, 6, inf}, `m = 20`, `n = 30`, step size 0.1 |
//! | `fig5` | all four; logistic; `m` in 60..140 sharing `N = 20000`, three size schemes |
//! | `fig6` | all four; Poisson; same design as `fig3` |

use super::{ClipMode, ExperimentSpec, SweepAxis};
use crate::algorithms::{Algorithm, RunConfig};
use crate::error::{FedError, Result};
use crate::federation::PartitionScheme;
use crate::model::{Family, ModelSpec, TrueParameter};

pub const PRESET_NAMES: [&str; 6] = ["fig1", "fig2", "fig3", "fig4", "fig5", "fig6"];

/// Dimension including the intercept.
pub const PRESET_D: usize = 5;
/// Default privacy budget of the client-count sweeps.
pub const PRESET_MU: f64 = 6.0;
/// Logistic `tau1`: smallest eigenvalue of the population Hessian at the
/// default `theta0` (about 0.166), rounded down.
pub const PRESET_LOGISTIC_TAU1: f64 = 0.16;

const CLIENTS_SMALL: [f64; 5] = [20.0, 30.0, 40.0, 50.0, 60.0];
const CLIENTS_LARGE: [f64; 5] = [60.0, 80.0, 100.0, 120.0, 140.0];
const LOCAL_SIZES: [usize; 5] = [30, 50, 70, 90, 110];

fn preset_model(family: Family) -> ModelSpec {
    let mut model = ModelSpec::with_defaults(family, PRESET_D, 1.0).expect("preset model is valid");
    if family == Family::Logistic {
        model.tau1 = PRESET_LOGISTIC_TAU1;
    }
    model
}

fn base(name: String, family: Family, seed: u64, reps: usize) -> ExperimentSpec {
    ExperimentSpec {
        name,
        model: preset_model(family),
        theta0: TrueParameter::cyclic_default(PRESET_D),
        sigma_c: 1.0,
        sweep_axis: SweepAxis::ClientsFixedLocalN,
        axis_values: CLIENTS_SMALL.to_vec(),
        fixed: RunConfig::default(),
        algorithms: Algorithm::CORE.to_vec(),
        partition: PartitionScheme::Equal,
        m: None,
        local_n: None,
        total_n: None,
        reps,
        mu_values: vec![PRESET_MU],
        clip: ClipMode::Calibrate,
        seed,
    }
}

fn size_schemes() -> [(&'static str, PartitionScheme); 3] {
    [
        ("equal", PartitionScheme::Equal),
        ("uniform", PartitionScheme::UniformRange { lo: 100, hi: 700 }),
        ("lognormal", PartitionScheme::LogNormal { meanlog: 5.5, sdlog: 1.0 }),
    ]
}

fn equal_local_grid(preset: &str, algorithms: &[Algorithm], seed: u64, reps: usize) -> Vec<ExperimentSpec> {
    LOCAL_SIZES
        .iter()
        .enumerate()
        .map(|(i, &n)| ExperimentSpec {
            algorithms: algorithms.to_vec(),
            local_n: Some(n),
            ..base(format!("{preset}_n{n}"), Family::Logistic, seed + i as u64, reps)
        })
        .collect()
}

fn around_400(preset: &str, family: Family, seed: u64, reps: usize) -> Vec<ExperimentSpec> {
    size_schemes()
        .into_iter()
        .enumerate()
        .map(|(i, (label, partition))| ExperimentSpec {
            axis_values: CLIENTS_LARGE.to_vec(),
            local_n: Some(400),
            partition,
            ..base(format!("{preset}_{label}"), family, seed + i as u64, reps)
        })
        .collect()
}

/// Experiments of a named preset. `reps` overrides the default of 100.
pub fn preset(name: &str, reps: Option<usize>) -> Result<Vec<ExperimentSpec>> {
    let reps = reps.unwrap_or(100);
    let specs = match name {
        "fig1" => equal_local_grid(name, &[Algorithm::FedSgd, Algorithm::FedHybrid], 1100, reps),
        "fig2" => equal_local_grid(name, &[Algorithm::FedAvg, Algorithm::FedNewton], 1200, reps),
        "fig3" => around_400(name, Family::Logistic, 1300, reps),
        "fig4" => vec![ExperimentSpec {
            sweep_axis: SweepAxis::Iterations,
            axis_values: vec![10.0, 25.0, 50.0, 100.0, 200.0],
            m: Some(20),
            local_n: Some(30),
            fixed: RunConfig {
                eta: 0.1,
                eta1: 0.1,
                eta2: 0.1,
                ..RunConfig::default()
            },
            mu_values: vec![2.0, 6.0, f64::INFINITY],
            ..base("fig4".into(), Family::Logistic, 1400, reps)
        }],
        "fig5" => size_schemes()
            .into_iter()
            .enumerate()
            .map(|(i, (label, partition))| ExperimentSpec {
                sweep_axis: SweepAxis::ClientsFixedTotalN,
                axis_values: CLIENTS_LARGE.to_vec(),
                total_n: Some(20_000),
                partition,
                ..base(format!("fig5_{label}"), Family::Logistic, 1500 + i as u64, reps)
            })
            .collect(),
        "fig6" => around_400(name, Family::Poisson, 1600, reps),
        other => {
            return Err(FedError::Config(format!(
                "unknown preset `{other}`; expected one of {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid() {
        for name in PRESET_NAMES {
            let specs = preset(name, Some(2)).unwrap();
            assert!(!specs.is_empty());
            assert!(specs.iter().all(|s| s.reps == 2));
            let names: std::collections::HashSet<_> = specs.iter().map(|s| s.name.clone()).collect();
            assert_eq!(names.len(), specs.len());
        }
        assert!(preset("fig7", None).is_err());
        assert_eq!(preset("fig1", None).unwrap()[0].reps, 100);
    }

    #[test]
    fn presets_cover_the_plotted_axes() {
        let fig1 = preset("fig1", None).unwrap();
        let ns: Vec<usize> = fig1.iter().map(|s| s.local_n.unwrap()).collect();
        assert_eq!(ns, LOCAL_SIZES);
        assert!(fig1.iter().all(|s| s.axis_values == CLIENTS_SMALL));
        let fig4 = &preset("fig4", None).unwrap()[0];
        assert_eq!(fig4.sweep_axis, SweepAxis::Iterations);
        assert!(fig4.mu_values.contains(&f64::INFINITY));
        let fig5 = preset("fig5", None).unwrap();
        for s in &fig5 {
            for &m in &s.axis_values {
                assert_eq!(s.client_sizes(m, 1).unwrap().iter().sum::<usize>(), 20_000);
            }
        }
        assert!(preset("fig6", None).unwrap().iter().all(|s| s.model.family == Family::Poisson));
    }

    #[test]
    fn logistic_tau1_bounds_the_population_curvature() {
        let model = preset_model(Family::Logistic);
        let data = crate::model::generate_dataset(&model, &TrueParameter::cyclic_default(PRESET_D), 400_000, 1.0, 77).unwrap();
        let h = crate::model::hessian_avg(&model, &TrueParameter::cyclic_default(PRESET_D).as_vector(), &data).unwrap();
        let lambda_min = h.symmetric_eigen().eigenvalues.min();
        assert!(lambda_min > PRESET_LOGISTIC_TAU1 && lambda_min < PRESET_LOGISTIC_TAU1 + 0.015, "{lambda_min}");
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESET_NAMES {
            for s in preset(name, None).unwrap() {
                assert_eq!(ExperimentSpec::from_toml(&s.to_toml()).unwrap(), s);
            }
        }
    }
}

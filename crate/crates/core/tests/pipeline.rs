use fedm_core::algorithms::{self, Algorithm, RunConfig};
use fedm_core::federation::{comm_cost, partition, plan_sizes, PartitionScheme};
use fedm_core::harness::overlay::{overlay, OverlayOptions};
use fedm_core::harness::{read_csv, run_experiment, summarize, write_csv, ClipMode, ExperimentSpec, RowSource, SweepAxis};
use fedm_core::model::{generate_dataset, Family, ModelSpec, TrueParameter};
use fedm_core::privacy::{ClipBound, NoisePlan, PrivacyBudget};
use proptest::prelude::*;

fn spec(family: Family, axis: SweepAxis, values: Vec<f64>) -> ExperimentSpec {
    ExperimentSpec {
        name: "pipeline".into(),
        model: ModelSpec::with_defaults(family, 3, 1.0).unwrap(),
        theta0: TrueParameter::cyclic_default(3),
        sigma_c: 1.0,
        sweep_axis: axis,
        axis_values: values,
        fixed: RunConfig {
            k: 15,
            ..RunConfig::default()
        },
        algorithms: Algorithm::CORE.to_vec(),
        partition: PartitionScheme::Equal,
        m: Some(5),
        local_n: Some(30),
        total_n: Some(600),
        reps: 3,
        mu_values: vec![4.0, f64::INFINITY],
        clip: ClipMode::Calibrate,
        seed: 17,
    }
}

#[test]
fn rows_survive_a_csv_round_trip() {
    let rows = run_experiment(&spec(Family::Logistic, SweepAxis::ClientsFixedLocalN, vec![4.0, 8.0])).unwrap();
    assert_eq!(rows.len(), 4 * 2 * 2 * 3);
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
}

#[test]
fn every_axis_produces_consistent_design_points() {
    for (axis, values) in [
        (SweepAxis::ClientsFixedLocalN, vec![4.0, 8.0]),
        (SweepAxis::ClientsFixedTotalN, vec![4.0, 12.0]),
        (SweepAxis::Iterations, vec![5.0, 20.0]),
        (SweepAxis::LocalSizeDistribution, vec![20.0, 40.0]),
    ] {
        let s = spec(Family::Poisson, axis, values.clone());
        let rows = run_experiment(&s).unwrap();
        for r in &rows {
            match axis {
                SweepAxis::ClientsFixedLocalN => assert_eq!(r.n_total, r.m * 30),
                SweepAxis::ClientsFixedTotalN => assert_eq!(r.n_total, 600),
                SweepAxis::Iterations => assert_eq!((r.m, r.n_total), (5, 150)),
                SweepAxis::LocalSizeDistribution => assert_eq!(r.n_total as f64, 5.0 * r.axis_value),
            }
        }
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 4 * 2 * values.len());
        assert!(summary.iter().all(|s| s.count + s.failures == 3));
    }
}

#[test]
fn overlay_adds_one_theory_row_per_design_point() {
    let rows = run_experiment(&spec(Family::Logistic, SweepAxis::ClientsFixedLocalN, vec![4.0, 8.0])).unwrap();
    let private: Vec<_> = rows.into_iter().filter(|r| r.mu.is_finite()).collect();
    let merged = overlay(&private, &OverlayOptions { d: 3, ..OverlayOptions::default() }).unwrap();
    let theory = merged.iter().filter(|r| r.source == RowSource::Theory).count();
    assert_eq!(theory, 4 * 2);
    assert_eq!(merged.len(), private.len() + theory);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noise_plans_compose_to_the_budget(mu in 0.05f64..20.0, m in 1usize..6, k in 1usize..40, seed in 0u64..500, alg_idx in 0usize..5) {
        let alg = Algorithm::ALL[alg_idx];
        let model = ModelSpec::with_defaults(Family::Logistic, 3, 1.0).unwrap();
        let sizes = plan_sizes(&PartitionScheme::UniformRange { lo: 10, hi: 80 }, m, None, seed).unwrap();
        let cfg = RunConfig {
            k,
            k1: k,
            k2: k,
            mu: PrivacyBudget::new(mu).unwrap(),
            clip: ClipBound::user_fixed(1.5).unwrap(),
            ..RunConfig::defaults(alg)
        };
        let plan = NoisePlan::build(&cfg, &model, &sizes).unwrap();
        for id in 0..m {
            prop_assert!((plan.composed_mu(id).unwrap() - mu).abs() <= 1e-12 * mu.max(1.0));
        }
    }

    #[test]
    fn round_traffic_matches_the_cost_table(m in 1usize..6, d in 1usize..5, k in 1usize..6, r in 1usize..4, alg_idx in 0usize..5) {
        let alg = Algorithm::ALL[alg_idx];
        let model = ModelSpec::with_defaults(Family::Linear, d, 1.0).unwrap();
        let data = generate_dataset(&model, &TrueParameter::cyclic_default(d), 10 * m, 1.0, 3).unwrap();
        let shards = partition(&data, m, &PartitionScheme::Equal, 3).unwrap();
        let cfg = RunConfig { k, k1: 2, k2: k, r, ..RunConfig::noiseless(alg) };
        let tr = algorithms::run(&shards, &model, &cfg).unwrap();
        prop_assert_eq!(tr.ledger, comm_cost(alg, m, d, cfg.iterations()));
    }
}

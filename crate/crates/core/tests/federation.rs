mod common;

use std::sync::Arc;

use common::depot_rows;
use evfl::artifacts::{load_run, read_metrics, write_run};
use evfl::config::RunConfig;
use evfl::error::Result;
use evfl::evaluation::{run_seed, ExperimentConfig, SplitLabel, TrainMode};
use evfl::federation::{
    aggregate, run_federated, sample_clients, ClientData, ClientUpdate, EvalSets, FedConfig,
};
use evfl::features::Preprocessor;
use evfl::ingest::SyntheticDepotSpec;
use evfl::models::params::{Layout, ModelParameters};
use evfl::models::{Architecture, LinearRegression, ModelKind};
use evfl::partition::ClientPartition;
use proptest::prelude::*;

#[test]
fn server_side_sees_only_parameters_and_counts() {
    // The aggregation entry point accepts nothing but client updates, and an
    // update carries exactly a parameter vector and a sample count.
    let server: fn(&[ClientUpdate]) -> Result<ModelParameters> = aggregate;
    let layout = Arc::new(Layout::new("probe", &[("w", vec![2])]));
    let u = ClientUpdate {
        params: ModelParameters::new(layout, vec![1.0, 2.0]).unwrap(),
        n_samples: 3,
    };
    let ClientUpdate { params, n_samples } = u.clone();
    assert_eq!((params.values.len(), n_samples), (2, 3));
    assert_eq!(server(&[u]).unwrap().values, vec![1.0, 2.0]);
}

proptest! {
    #[test]
    fn aggregate_equals_sample_weighted_mean(
        vals in prop::collection::vec((prop::collection::vec(-50.0f64..50.0, 4), 1usize..500), 1..8)
    ) {
        let layout = Arc::new(Layout::new("probe", &[("w", vec![4])]));
        let updates: Vec<ClientUpdate> = vals
            .iter()
            .map(|(v, n)| ClientUpdate {
                params: ModelParameters::new(layout.clone(), v.clone()).unwrap(),
                n_samples: *n,
            })
            .collect();
        let got = aggregate(&updates).unwrap();
        let total: usize = vals.iter().map(|(_, n)| n).sum();
        for j in 0..4 {
            let want: f64 = vals.iter().map(|(v, n)| v[j] * *n as f64).sum::<f64>() / total as f64;
            prop_assert!((got.values[j] - want).abs() <= 1e-9 * want.abs().max(1.0));
        }
    }

    #[test]
    fn sampled_clients_are_distinct_sorted_and_sized(k in 1usize..80, f in 0.001f64..=1.0, round in 1usize..500, seed: u64) {
        let s = sample_clients(k, f, round, seed);
        let m = ((f * k as f64).round() as usize).max(1).min(k);
        prop_assert_eq!(s.len(), m);
        prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.iter().all(|&c| c < k));
        prop_assert_eq!(s, sample_clients(k, f, round, seed));
    }
}

#[test]
fn one_client_per_station() {
    let rows = depot_rows(&SyntheticDepotSpec {
        n_stations: 54,
        sessions_per_station: (3, 6),
        seed: 54,
        ..Default::default()
    });
    let ids: Vec<&str> = rows.iter().map(|r| r.station_id.as_str()).collect();
    let p = ClientPartition::by_station(&ids).unwrap();
    assert_eq!(p.len(), 54);
    assert_eq!(p.total(), rows.len());
    let w: f64 = p.weights().iter().sum();
    assert!((w - 1.0).abs() < 1e-12);
    for c in &p.clients {
        assert!(c.indices.iter().all(|&i| rows[i].station_id == c.id));
    }
}

#[test]
fn federated_runs_are_reproducible_and_seed_sensitive() {
    let rows = depot_rows(&SyntheticDepotSpec {
        n_stations: 6,
        seed: 3,
        ..Default::default()
    });
    let all: Vec<&_> = rows.iter().collect();
    let pre = Preprocessor::fit(&all).unwrap();
    let d = pre.design(all.iter().copied());
    let ids: Vec<&str> = rows.iter().map(|r| r.station_id.as_str()).collect();
    let clients = ClientData::from_partition(&d, &ClientPartition::by_station(&ids).unwrap()).unwrap();
    let arch = Architecture::Linear(LinearRegression { dim: d.dim });
    let init = arch.init_params(0, 9.0);
    let eval = EvalSets { val: &d, test: &d };
    let cfg = |seed| FedConfig {
        rounds: 5,
        client_fraction: 0.5,
        seed,
        ..FedConfig::default()
    };
    let a = run_federated(&arch, &init, &clients, eval, &cfg(1)).unwrap();
    let b = run_federated(&arch, &init, &clients, eval, &cfg(1)).unwrap();
    let c = run_federated(&arch, &init, &clients, eval, &cfg(2)).unwrap();
    assert_eq!(a.final_params, b.final_params);
    let timeless = |log: &[evfl::federation::RoundLog]| {
        log.iter()
            .map(|l| evfl::federation::RoundLog { wall_time_s: 0.0, ..l.clone() })
            .collect::<Vec<_>>()
    };
    assert_eq!(timeless(&a.log), timeless(&b.log));
    assert_ne!(a.final_params, c.final_params);
    assert_eq!(a.log.len(), 5);
    assert!(a.log.iter().all(|l| l.clients.len() == 3));
}

#[test]
fn saved_run_reloads_to_identical_predictions() {
    let rows = depot_rows(&SyntheticDepotSpec {
        n_stations: 5,
        seed: 9,
        ..Default::default()
    });
    for model in [ModelKind::DummyMean, ModelKind::DummyGauss, ModelKind::Lr, ModelKind::Mlp] {
        let mut cfg = RunConfig {
            experiment: ExperimentConfig {
                model,
                mode: TrainMode::Federated,
                ..ExperimentConfig::default()
            },
            seeds: vec![4],
            ..RunConfig::default()
        };
        cfg.experiment.fed.rounds = 6;
        let run = run_seed(&rows, &cfg.experiment, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let metrics = write_run(dir.path(), &cfg, &run).unwrap();
        assert_eq!(read_metrics(dir.path()).unwrap(), metrics);
        assert_eq!(metrics.n_train + metrics.n_val + metrics.n_test, rows.len());

        let loaded = load_run(dir.path()).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.preprocessor, run.preprocessor);
        let test: Vec<&_> = run.split.indices(SplitLabel::Test).into_iter().map(|i| &rows[i]).collect();
        let d = loaded.preprocessor.design(test.iter().copied());
        let again = loaded.predictor.predict(&d).unwrap();
        let before: Vec<f64> = run.predictions.iter().map(|p| p.y_pred).collect();
        assert_eq!(again, before, "{model:?}");
    }
}

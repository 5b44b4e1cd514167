use std::ffi::{CStr, CString};
use std::ptr;

use evfl::artifacts::write_run;
use evfl::config::RunConfig;
use evfl::data::{retain_sessions, DatasetConfig};
use evfl::evaluation::{run_seed, ExperimentConfig, SplitLabel, TrainMode};
use evfl::features::{featurize, RawFeatures};
use evfl::heterogeneity::{analyze, HeterogeneityConfig};
use evfl::ingest::{generate_synthetic, SyntheticDepotSpec};
use evfl::models::ModelKind;
use evfl::partition::ClientPartition;
use evfl_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(evfl_last_error()) }.to_string_lossy().into_owned()
}

fn rows(n_stations: usize, seed: u64) -> Vec<RawFeatures> {
    let depot = generate_synthetic(&SyntheticDepotSpec {
        n_stations,
        seed,
        ..Default::default()
    })
    .unwrap();
    let cfg = DatasetConfig::default();
    let (kept, _) = retain_sessions(&depot.sessions, &depot.series, &cfg);
    featurize(&kept, &depot.series, &cfg).0
}

#[test]
fn energy_and_slope() {
    let t: Vec<f64> = (0..=10).map(|k| 60.0 * k as f64).collect();
    let i = vec![32.0; t.len()];
    let mut e = 0.0;
    assert_eq!(unsafe { evfl_early_energy(t.as_ptr(), i.as_ptr(), t.len(), 208.0, &mut e) }, EvflStatus::Ok);
    assert!((e - 208.0 * 32.0 * 600.0 / 3.6e6).abs() < 1e-12);

    let v: Vec<f64> = t.iter().map(|x| 0.25 * x - 3.0).collect();
    let mut s = 0.0;
    assert_eq!(unsafe { evfl_slope(t.as_ptr(), v.as_ptr(), t.len(), &mut s) }, EvflStatus::Ok);
    assert!((s - 0.25).abs() < 1e-12);

    let one = [5.0];
    assert_eq!(unsafe { evfl_slope(one.as_ptr(), one.as_ptr(), 1, &mut s) }, EvflStatus::Numeric);
    assert!(last_error().contains("slope"));
    assert_eq!(
        unsafe { evfl_early_energy(ptr::null(), i.as_ptr(), 3, 208.0, &mut e) },
        EvflStatus::NullPointer
    );
    assert_eq!(last_error(), "times is null");
    assert_eq!(
        unsafe { evfl_early_energy(t.as_ptr(), i.as_ptr(), t.len(), 208.0, ptr::null_mut()) },
        EvflStatus::NullPointer
    );
}

#[test]
fn js_bounds_and_validation() {
    let p = [0.5, 0.5, 0.0, 0.0];
    let q = [0.0, 0.0, 0.25, 0.75];
    let mut js = -1.0;
    assert_eq!(unsafe { evfl_js_divergence(p.as_ptr(), p.as_ptr(), 4, &mut js) }, EvflStatus::Ok);
    assert_eq!(js, 0.0);
    assert_eq!(unsafe { evfl_js_divergence(p.as_ptr(), q.as_ptr(), 4, &mut js) }, EvflStatus::Ok);
    assert!((js - std::f64::consts::LN_2).abs() < 1e-12);
    let bad = [0.5, 0.6, 0.0, 0.0];
    assert_eq!(
        unsafe { evfl_js_divergence(bad.as_ptr(), q.as_ptr(), 4, &mut js) },
        EvflStatus::InvalidArgument
    );
}

#[test]
fn aggregate_weights_by_samples() {
    let params = [1.0, 10.0, 3.0, 30.0, 5.0, 50.0];
    let n = [1usize, 1, 2];
    let mut out = [0.0; 2];
    assert_eq!(unsafe { evfl_aggregate(params.as_ptr(), n.as_ptr(), 3, 2, out.as_mut_ptr()) }, EvflStatus::Ok);
    assert!((out[0] - 3.5).abs() < 1e-12 && (out[1] - 35.0).abs() < 1e-12);
    let zero = [0usize; 3];
    assert_eq!(
        unsafe { evfl_aggregate(params.as_ptr(), zero.as_ptr(), 3, 2, out.as_mut_ptr()) },
        EvflStatus::Empty
    );
    assert_eq!(
        unsafe { evfl_aggregate(params.as_ptr(), n.as_ptr(), 0, 2, out.as_mut_ptr()) },
        EvflStatus::Empty
    );
}

#[test]
fn heterogeneity_report_matches_library() {
    let r = rows(6, 2);
    let targets: Vec<f64> = r.iter().map(|x| x.target_kwh).collect();
    let ids: Vec<CString> = r.iter().map(|x| CString::new(x.station_id.clone()).unwrap()).collect();
    let id_ptrs: Vec<*const std::ffi::c_char> = ids.iter().map(|c| c.as_ptr()).collect();

    let mut report = ptr::null_mut();
    let status = unsafe {
        evfl_heterogeneity_analyze(targets.as_ptr(), id_ptrs.as_ptr(), targets.len(), 0, 0, 7, &mut report)
    };
    assert_eq!(status, EvflStatus::Ok, "{}", last_error());
    let mut summary = EvflHeterogeneitySummary::default();
    assert_eq!(unsafe { evfl_report_summary(report, &mut summary) }, EvflStatus::Ok);

    let stations: Vec<&str> = r.iter().map(|x| x.station_id.as_str()).collect();
    let want = analyze(
        &targets,
        &ClientPartition::by_station(&stations).unwrap(),
        &HeterogeneityConfig {
            seed: 7,
            ..HeterogeneityConfig::default()
        },
    )
    .unwrap();
    assert_eq!(summary.js_weighted, want.js_weighted);
    assert_eq!(summary.tau_iid, want.tau_iid);
    assert_eq!(summary.n_clients, 6);

    let (mut id, mut js, mut n) = (ptr::null(), 0.0, 0usize);
    assert_eq!(unsafe { evfl_report_client(report, 0, &mut id, &mut js, &mut n) }, EvflStatus::Ok);
    let top = &want.ranked[0];
    assert_eq!(unsafe { CStr::from_ptr(id) }.to_str().unwrap(), top.client_id);
    assert_eq!((js, n), (top.js, top.n_samples));
    assert_eq!(
        unsafe { evfl_report_client(report, 6, &mut id, &mut js, &mut n) },
        EvflStatus::InvalidArgument
    );
    unsafe { evfl_report_free(report) };
    unsafe { evfl_report_free(ptr::null_mut()) };
}

#[test]
fn predictor_round_trip_through_run_directory() {
    let r = rows(4, 3);
    let mut cfg = RunConfig {
        experiment: ExperimentConfig {
            model: ModelKind::Mlp,
            mode: TrainMode::Centralized,
            ..ExperimentConfig::default()
        },
        seeds: vec![1],
        ..RunConfig::default()
    };
    cfg.experiment.central.epochs = 3;
    let run = run_seed(&r, &cfg.experiment, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &cfg, &run).unwrap();

    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut pred = ptr::null_mut();
    assert_eq!(unsafe { evfl_predictor_load(path.as_ptr(), &mut pred) }, EvflStatus::Ok, "{}", last_error());

    let mut count = 0usize;
    assert_eq!(unsafe { evfl_predictor_param_count(pred, &mut count) }, EvflStatus::Ok);
    let mut params = vec![0.0; count];
    assert_eq!(unsafe { evfl_predictor_params(pred, params.as_mut_ptr(), count) }, EvflStatus::Ok);
    assert_eq!(params, run.predictor.params().values);
    assert_eq!(
        unsafe { evfl_predictor_params(pred, params.as_mut_ptr(), count - 1) },
        EvflStatus::DimensionMismatch
    );

    let test = run.split.indices(SplitLabel::Test);
    assert_eq!(evfl_base_feature_count(), r[0].base.len());
    for (slot, &i) in test.iter().enumerate().take(10) {
        let base: Vec<f64> = r[i].base.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        let station = CString::new(r[i].station_id.clone()).unwrap();
        let mut y = -1.0;
        let status = unsafe { evfl_predictor_predict(pred, base.as_ptr(), base.len(), station.as_ptr(), &mut y) };
        assert_eq!(status, EvflStatus::Ok, "{}", last_error());
        assert_eq!(y, run.predictions[slot].y_pred);
    }

    let base = vec![f64::NAN; evfl_base_feature_count()];
    let unseen = CString::new("NOT-A-STATION").unwrap();
    let mut y = -1.0;
    assert_eq!(
        unsafe { evfl_predictor_predict(pred, base.as_ptr(), base.len(), unseen.as_ptr(), &mut y) },
        EvflStatus::Ok
    );
    assert!(y >= 0.0 && y.is_finite());
    assert_eq!(
        unsafe { evfl_predictor_predict(pred, base.as_ptr(), 3, unseen.as_ptr(), &mut y) },
        EvflStatus::DimensionMismatch
    );
    unsafe { evfl_predictor_free(pred) };

    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut pred = ptr::null_mut();
    assert_eq!(unsafe { evfl_predictor_load(missing.as_ptr(), &mut pred) }, EvflStatus::Io);
    assert!(pred.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn header_declares_the_exports_and_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/evfl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "evfl_abi_version",
        "evfl_last_error",
        "evfl_early_energy",
        "evfl_slope",
        "evfl_js_divergence",
        "evfl_aggregate",
        "evfl_heterogeneity_analyze",
        "evfl_report_summary",
        "evfl_report_client",
        "evfl_report_free",
        "evfl_predictor_load",
        "evfl_predictor_predict",
        "evfl_predictor_free",
    ] {
        assert!(text.contains(&format!("{sym}(")), "{sym} missing from header");
    }
    assert_eq!(evfl_abi_version(), EVFL_ABI_VERSION);
    // Syntax-check the header with the system C compiler when one exists.
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

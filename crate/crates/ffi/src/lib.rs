//! C ABI over `evfl`.
//!
//! Every fallible call returns an [`EvflStatus`]; on failure the message is
//! kept per thread and read with [`evfl_last_error`]. Handles are opaque and
//! released with their matching `_free` function. Panics never cross the
//! boundary; they surface as `EVFL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use evfl::artifacts::{load_run, LoadedRun};
use evfl::features::{RawFeatures, BASE_COLUMNS};
use evfl::federation::{aggregate, ClientUpdate};
use evfl::heterogeneity::{
    analyze, js_divergence, BinEdges, Classification, HeterogeneityConfig, HeterogeneityReport,
    HistogramDensity,
};
use evfl::models::params::{Layout, ModelParameters};
use evfl::partition::ClientPartition;
use evfl::Error;

pub const EVFL_ABI_VERSION: u32 = 1;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvflStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    InvalidConfig = 5,
    DimensionMismatch = 6,
    LayoutMismatch = 7,
    Checkpoint = 8,
    Empty = 9,
    Numeric = 10,
    Panic = 99,
}

/// A trained predictor and its preprocessing, restored from a run directory.
pub struct EvflPredictor {
    run: LoadedRun,
}

/// Result of a station-level heterogeneity analysis.
pub struct EvflReport {
    report: HeterogeneityReport,
    /// Station ids in ranked order.
    ids: Vec<CString>,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvflHeterogeneitySummary {
    pub js_weighted: f64,
    pub js_max: f64,
    pub mu_iid: f64,
    pub sigma_iid: f64,
    pub tau_iid: f64,
    pub non_iid: bool,
    pub n_clients: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).unwrap_or_default());
}

struct Fail(EvflStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Fail {
        let code = match &e {
            Error::Io { .. } => EvflStatus::Io,
            Error::Parse { .. } | Error::Json(_) => EvflStatus::Parse,
            Error::InvalidConfig { .. } => EvflStatus::InvalidConfig,
            Error::Empty(_) => EvflStatus::Empty,
            Error::DimensionMismatch { .. } => EvflStatus::DimensionMismatch,
            Error::LayoutMismatch(_) | Error::EdgeMismatch => EvflStatus::LayoutMismatch,
            Error::Checkpoint(_) => EvflStatus::Checkpoint,
            Error::UnboundedKl { .. } => EvflStatus::Numeric,
            _ => EvflStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(EvflStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Fail {
    Fail(EvflStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EvflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EvflStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            EvflStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn string<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null, caller guarantees it points to writable storage.
    unsafe { out.write(v) };
    Ok(())
}

#[no_mangle]
pub extern "C" fn evfl_abi_version() -> u32 {
    EVFL_ABI_VERSION
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn evfl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Number of base (pre-imputation) feature columns a predictor takes.
#[no_mangle]
pub extern "C" fn evfl_base_feature_count() -> usize {
    BASE_COLUMNS.len()
}

/// Trapezoidal energy in kWh of current samples (A) at times (s).
///
/// # Safety
/// `times` and `currents` must be valid for `n` reads; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn evfl_early_energy(
    times: *const f64,
    currents: *const f64,
    n: usize,
    voltage_v: f64,
    out: *mut f64,
) -> EvflStatus {
    guard(|| {
        let t = slice(times, n, "times")?;
        let i = slice(currents, n, "currents")?;
        if !(voltage_v.is_finite() && voltage_v > 0.0) {
            return Err(invalid("voltage must be positive"));
        }
        write_out(out, evfl::features::early_energy(t, i, voltage_v), "out")
    })
}

/// Least-squares slope of `values` over `times`. Fails with
/// `EVFL_STATUS_NUMERIC` when fewer than two distinct times are given.
///
/// # Safety
/// `times` and `values` must be valid for `n` reads; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn evfl_slope(times: *const f64, values: *const f64, n: usize, out: *mut f64) -> EvflStatus {
    guard(|| {
        let t = slice(times, n, "times")?;
        let v = slice(values, n, "values")?;
        let s = evfl::features::least_squares_slope(t, v)
            .ok_or_else(|| Fail(EvflStatus::Numeric, "slope undefined: fewer than two distinct times".into()))?;
        write_out(out, s, "out")
    })
}

/// Jensen–Shannon divergence (natural log) between two probability vectors
/// over the same `bins` bins.
///
/// # Safety
/// `p` and `q` must be valid for `bins` reads; `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn evfl_js_divergence(p: *const f64, q: *const f64, bins: usize, out: *mut f64) -> EvflStatus {
    guard(|| {
        if bins == 0 {
            return Err(invalid("bins must be > 0"));
        }
        let edges = BinEdges {
            edges: (0..=bins).map(|b| b as f64).collect(),
        };
        let density = |v: &[f64], what: &str| -> Result<HistogramDensity, Fail> {
            let sum: f64 = v.iter().sum();
            if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("{what} is not a probability vector")));
            }
            Ok(HistogramDensity {
                edges: edges.clone(),
                probabilities: v.to_vec(),
            })
        };
        let a = density(slice(p, bins, "p")?, "p")?;
        let b = density(slice(q, bins, "q")?, "q")?;
        write_out(out, js_divergence(&a, &b)?, "out")
    })
}

/// Sample-weighted average of `n_clients` parameter vectors stored row-major
/// in `params` (`n_clients × n_params`).
///
/// # Safety
/// `params` must be valid for `n_clients·n_params` reads, `n_samples` for
/// `n_clients` reads and `out` for `n_params` writes.
#[no_mangle]
pub unsafe extern "C" fn evfl_aggregate(
    params: *const f64,
    n_samples: *const usize,
    n_clients: usize,
    n_params: usize,
    out: *mut f64,
) -> EvflStatus {
    guard(|| {
        let total = n_clients
            .checked_mul(n_params)
            .ok_or_else(|| invalid("n_clients × n_params overflows"))?;
        let p = slice(params, total, "params")?;
        let n = slice(n_samples, n_clients, "n_samples")?;
        if n_params == 0 {
            return Err(invalid("n_params must be > 0"));
        }
        let layout = Arc::new(Layout::new("ffi", &[("params", vec![n_params])]));
        let updates = p
            .chunks(n_params)
            .zip(n)
            .map(|(v, &k)| {
                Ok(ClientUpdate {
                    params: ModelParameters::new(layout.clone(), v.to_vec())?,
                    n_samples: k,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let merged = aggregate(&updates)?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, n_params).copy_from_slice(&merged.values);
        Ok(())
    })
}

/// Station-level heterogeneity analysis of `targets`, where `station_ids[i]`
/// names the station of `targets[i]`. `bins`/`n_permutations` of 0 select the
/// defaults.
///
/// # Safety
/// `targets` and `station_ids` must be valid for `n` reads, each id a
/// NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn evfl_heterogeneity_analyze(
    targets: *const f64,
    station_ids: *const *const c_char,
    n: usize,
    bins: usize,
    n_permutations: usize,
    seed: u64,
    out: *mut *mut EvflReport,
) -> EvflStatus {
    guard(|| {
        let t = slice(targets, n, "targets")?;
        let ids = slice(station_ids, n, "station_ids")?
            .iter()
            .map(|&p| string(p, "station id"))
            .collect::<Result<Vec<_>, _>>()?;
        let defaults = HeterogeneityConfig::default();
        let cfg = HeterogeneityConfig {
            bins: if bins == 0 { defaults.bins } else { bins },
            n_permutations: if n_permutations == 0 { defaults.n_permutations } else { n_permutations },
            seed,
        };
        let partition = ClientPartition::by_station(&ids)?;
        let report = analyze(t, &partition, &cfg)?;
        let ids = report
            .ranked
            .iter()
            .map(|c| CString::new(c.client_id.as_str()).map_err(|_| invalid("station id contains NUL")))
            .collect::<Result<Vec<_>, _>>()?;
        write_out(out, Box::into_raw(Box::new(EvflReport { report, ids })), "out")
    })
}

/// # Safety
/// `report` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn evfl_report_summary(report: *const EvflReport, out: *mut EvflHeterogeneitySummary) -> EvflStatus {
    guard(|| {
        let r = &report.as_ref().ok_or_else(|| null("report"))?.report;
        let s = EvflHeterogeneitySummary {
            js_weighted: r.js_weighted,
            js_max: r.js_max,
            mu_iid: r.mu_iid,
            sigma_iid: r.sigma_iid,
            tau_iid: r.tau_iid,
            non_iid: r.classification == Classification::NonIid,
            n_clients: r.per_client_js.len(),
        };
        write_out(out, s, "out")
    })
}

/// Station id, divergence and sample count of the client at `rank`
/// (0 = most divergent). The id pointer stays valid until the report is
/// freed.
///
/// # Safety
/// `report` must be valid; each output valid for one write.
#[no_mangle]
pub unsafe extern "C" fn evfl_report_client(
    report: *const EvflReport,
    rank: usize,
    station_id: *mut *const c_char,
    js: *mut f64,
    n_samples: *mut usize,
) -> EvflStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let c = r
            .report
            .ranked
            .get(rank)
            .ok_or_else(|| invalid(format!("client rank {rank} out of range")))?;
        write_out(station_id, r.ids[rank].as_ptr(), "station_id")?;
        write_out(js, c.js, "js")?;
        write_out(n_samples, c.n_samples, "n_samples")
    })
}

/// # Safety
/// `report` must be null or a pointer from `evfl_heterogeneity_analyze`
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn evfl_report_free(report: *mut EvflReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Loads the predictor saved in run directory `run_dir`.
///
/// # Safety
/// `run_dir` must be a NUL-terminated path; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn evfl_predictor_load(run_dir: *const c_char, out: *mut *mut EvflPredictor) -> EvflStatus {
    guard(|| {
        let dir = string(run_dir, "run_dir")?;
        let run = load_run(Path::new(dir))?;
        write_out(out, Box::into_raw(Box::new(EvflPredictor { run })), "out")
    })
}

/// # Safety
/// `predictor` must be null or a live handle from `evfl_predictor_load`.
#[no_mangle]
pub unsafe extern "C" fn evfl_predictor_free(predictor: *mut EvflPredictor) {
    if !predictor.is_null() {
        drop(Box::from_raw(predictor));
    }
}

/// Number of parameters held by the predictor.
///
/// # Safety
/// `predictor` must be valid; `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn evfl_predictor_param_count(predictor: *const EvflPredictor, out: *mut usize) -> EvflStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        write_out(out, p.run.predictor.params().len(), "out")
    })
}

/// Copies the predictor's parameters into `out` (capacity `cap`).
///
/// # Safety
/// `predictor` must be valid and `out` valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn evfl_predictor_params(predictor: *const EvflPredictor, out: *mut f64, cap: usize) -> EvflStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        let values = p.run.predictor.params().values;
        if cap < values.len() {
            return Err(Fail(
                EvflStatus::DimensionMismatch,
                format!("buffer holds {cap}, need {}", values.len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, values.len()).copy_from_slice(&values);
        Ok(())
    })
}

/// Predicts delivered energy (kWh) for one session from its base feature
/// columns (`evfl_base_feature_count()` values, NaN where missing) and its
/// station id. Unseen stations map to the unknown-station embedding.
///
/// # Safety
/// `base` must be valid for `n_base` reads, `station_id` NUL-terminated and
/// `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn evfl_predictor_predict(
    predictor: *const EvflPredictor,
    base: *const f64,
    n_base: usize,
    station_id: *const c_char,
    out: *mut f64,
) -> EvflStatus {
    guard(|| {
        let p = predictor.as_ref().ok_or_else(|| null("predictor"))?;
        if n_base != BASE_COLUMNS.len() {
            return Err(Fail(
                EvflStatus::DimensionMismatch,
                format!("expected {} base columns, got {n_base}", BASE_COLUMNS.len()),
            ));
        }
        let values = slice(base, n_base, "base")?;
        if values.iter().any(|v| v.is_infinite()) {
            return Err(invalid("base features must be finite or NaN"));
        }
        let raw = RawFeatures {
            session_id: String::new(),
            station_id: string(station_id, "station_id")?.to_string(),
            target_kwh: 0.0,
            base: values.iter().map(|&v| (!v.is_nan()).then_some(v)).collect(),
        };
        let design = p.run.preprocessor.design([&raw]);
        let y = p.run.predictor.predict(&design)?;
        write_out(out, y[0], "out")
    })
}

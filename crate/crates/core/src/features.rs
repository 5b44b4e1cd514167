//! Per-session tabular features built from plug-in context and the early
//! observation window, plus train-split imputation and standardization.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, Timelike};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, SeriesIndex, SessionRecord, TimeSeriesSample, Timestamp};
use crate::error::{Error, Result};

/// Floor applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// How a numeric column is treated by the scaler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    /// Standardized with train-split statistics.
    Scaled,
    /// Sine/cosine encodings, passed through.
    Cyclic,
    /// 0/1 indicators, passed through.
    Binary,
}

#[derive(Debug, Clone, Copy)]
pub struct Column {
    pub name: &'static str,
    pub kind: ColumnKind,
    /// Nullable columns are median-imputed and carry a `<name>_missing` flag.
    pub nullable: bool,
}

const fn col(name: &'static str, kind: ColumnKind, nullable: bool) -> Column {
    Column {
        name,
        kind,
        nullable,
    }
}

use ColumnKind::{Binary, Cyclic, Scaled};

/// Base columns in their fixed order. Missingness flags for the nullable
/// ones follow, in the same relative order.
pub const BASE_COLUMNS: [Column; 33] = [
    col("hour_sin", Cyclic, false),
    col("hour_cos", Cyclic, false),
    col("weekday_sin", Cyclic, false),
    col("weekday_cos", Cyclic, false),
    col("month_sin", Cyclic, false),
    col("month_cos", Cyclic, false),
    col("doy_sin", Cyclic, false),
    col("doy_cos", Cyclic, false),
    col("is_weekend", Binary, false),
    col("requested_energy_kwh", Scaled, true),
    col("available_minutes", Scaled, true),
    col("departure_offset_minutes", Scaled, true),
    col("current_mean", Scaled, true),
    col("current_max", Scaled, true),
    col("current_min", Scaled, true),
    col("current_std", Scaled, true),
    col("current_first", Scaled, true),
    col("current_last", Scaled, true),
    col("current_slope", Scaled, true),
    col("pilot_mean", Scaled, true),
    col("pilot_max", Scaled, true),
    col("pilot_min", Scaled, true),
    col("pilot_std", Scaled, true),
    col("pilot_first", Scaled, true),
    col("pilot_last", Scaled, true),
    col("pilot_slope", Scaled, true),
    col("util_mean", Scaled, true),
    col("util_max", Scaled, true),
    col("early_energy_kwh", Scaled, false),
    col("n_current", Scaled, false),
    col("n_pilot", Scaled, false),
    col("n_merged", Scaled, false),
    col("observed_window_minutes", Scaled, false),
];

/// Full numeric layout: base columns then one flag per nullable column.
pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = BASE_COLUMNS.iter().map(|c| c.name.to_string()).collect();
    names.extend(
        BASE_COLUMNS
            .iter()
            .filter(|c| c.nullable)
            .map(|c| format!("{}_missing", c.name)),
    );
    names
}

pub fn feature_kinds() -> Vec<ColumnKind> {
    let mut kinds: Vec<ColumnKind> = BASE_COLUMNS.iter().map(|c| c.kind).collect();
    kinds.extend(BASE_COLUMNS.iter().filter(|c| c.nullable).map(|_| Binary));
    kinds
}

pub fn feature_dim() -> usize {
    BASE_COLUMNS.len() + BASE_COLUMNS.iter().filter(|c| c.nullable).count()
}

/// Samples in the closed interval `[t_conn, t_conn + W]`. `samples` must be
/// sorted ascending.
pub fn extract_early_window<'a>(
    session: &SessionRecord,
    samples: &'a [TimeSeriesSample],
    cfg: &DatasetConfig,
) -> &'a [TimeSeriesSample] {
    let start = session.connection_time;
    let end = start + cfg.window();
    let lo = samples.partition_point(|s| s.timestamp < start);
    let hi = samples.partition_point(|s| s.timestamp <= end);
    &samples[lo..hi.max(lo)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    /// Population standard deviation.
    pub std: f64,
    pub first: f64,
    pub last: f64,
}

pub fn summary_stats(values: &[f64]) -> Option<SummaryStats> {
    let (&first, &last) = (values.first()?, values.last()?);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Some(SummaryStats {
        mean: mean.clamp(min, max),
        max,
        min,
        std: var.sqrt(),
        first,
        last,
    })
}

/// Ordinary least-squares slope of `values` against `times`.
pub fn least_squares_slope(times: &[f64], values: &[f64]) -> Option<f64> {
    if times.len() != values.len() || times.len() < 2 {
        return None;
    }
    let n = times.len() as f64;
    let tm = times.iter().sum::<f64>() / n;
    let vm = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, v) in times.iter().zip(values) {
        let dt = t - tm;
        sxy += dt * (v - vm);
        sxx += dt * dt;
    }
    if sxx == 0.0 {
        return None;
    }
    Some(sxy / sxx)
}

/// Mean and max of current/pilot over timestamps where both are present and
/// the pilot is strictly positive.
pub fn utilization_stats(window: &[TimeSeriesSample]) -> Option<(f64, f64)> {
    let ratios: Vec<f64> = window
        .iter()
        .filter_map(|s| match (s.current_a, s.pilot_a) {
            (Some(c), Some(p)) if p > 0.0 => Some(c / p),
            _ => None,
        })
        .collect();
    if ratios.is_empty() {
        return None;
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let max = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((mean, max))
}

/// Trapezoidal energy in kWh of `voltage · I(t) / 1000` kW over `times` in
/// seconds. Fewer than two samples integrate to zero.
pub fn early_energy(times: &[f64], currents: &[f64], voltage_v: f64) -> f64 {
    let n = times.len().min(currents.len());
    if n < 2 {
        return 0.0;
    }
    let kw = voltage_v / 1000.0;
    (1..n)
        .map(|i| 0.5 * kw * (currents[i - 1] + currents[i]) * (times[i] - times[i - 1]) / 3600.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalendarFeatures {
    pub hour: u32,
    /// Monday = 0.
    pub weekday: u32,
    /// 1-based.
    pub month: u32,
    /// 0-based.
    pub day_of_year: u32,
    pub is_weekend: bool,
    pub hour_sc: (f64, f64),
    pub weekday_sc: (f64, f64),
    pub month_sc: (f64, f64),
    pub doy_sc: (f64, f64),
}

fn cyc(v: f64, period: f64) -> (f64, f64) {
    let a = 2.0 * PI * v / period;
    (a.sin(), a.cos())
}

pub fn calendar_features(t: Timestamp) -> CalendarFeatures {
    let hour = t.hour();
    let weekday = t.weekday().num_days_from_monday();
    let month = t.month();
    let day_of_year = t.ordinal0();
    CalendarFeatures {
        hour,
        weekday,
        month,
        day_of_year,
        is_weekend: weekday >= 5,
        hour_sc: cyc(hour as f64, 24.0),
        weekday_sc: cyc(weekday as f64, 7.0),
        month_sc: cyc((month - 1) as f64, 12.0),
        doy_sc: cyc(day_of_year as f64, 366.0),
    }
}

/// Minutes from connection to the requested departure. Negative offsets are
/// reported missing; the flag marks that case.
pub fn departure_offset(session: &SessionRecord) -> (Option<f64>, bool) {
    match session.requested_departure {
        None => (None, false),
        Some(dep) => {
            let minutes = (dep - session.connection_time).num_seconds() as f64 / 60.0;
            if minutes < 0.0 {
                (None, true)
            } else {
                (Some(minutes), false)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyWindowFeatures {
    pub current: Option<SummaryStats>,
    pub current_slope: Option<f64>,
    pub pilot: Option<SummaryStats>,
    pub pilot_slope: Option<f64>,
    pub util: Option<(f64, f64)>,
    pub early_energy_kwh: f64,
    pub n_current: usize,
    pub n_pilot: usize,
    pub n_merged: usize,
    pub observed_window_minutes: f64,
}

pub fn early_window_features(
    session: &SessionRecord,
    window: &[TimeSeriesSample],
    cfg: &DatasetConfig,
) -> EarlyWindowFeatures {
    let secs = |s: &TimeSeriesSample| (s.timestamp - session.connection_time).num_seconds() as f64;
    let (ct, cv): (Vec<f64>, Vec<f64>) = window
        .iter()
        .filter_map(|s| s.current_a.map(|c| (secs(s), c)))
        .unzip();
    let (pt, pv): (Vec<f64>, Vec<f64>) = window
        .iter()
        .filter_map(|s| s.pilot_a.map(|p| (secs(s), p)))
        .unzip();
    let observed = match (window.first(), window.last()) {
        (Some(a), Some(b)) => (b.timestamp - a.timestamp).num_seconds() as f64 / 60.0,
        _ => 0.0,
    };
    EarlyWindowFeatures {
        current: summary_stats(&cv),
        current_slope: least_squares_slope(&ct, &cv),
        pilot: summary_stats(&pv),
        pilot_slope: least_squares_slope(&pt, &pv),
        util: utilization_stats(window),
        early_energy_kwh: early_energy(&ct, &cv, cfg.nominal_voltage_v),
        n_current: cv.len(),
        n_pilot: pv.len(),
        n_merged: window.len(),
        observed_window_minutes: observed.clamp(0.0, cfg.early_window_minutes),
    }
}

/// Feature row before imputation: base columns, `None` where missing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub session_id: String,
    pub station_id: String,
    pub target_kwh: f64,
    pub base: Vec<Option<f64>>,
}

impl RawFeatures {
    /// Base values followed by missingness flags, missing entries left `None`.
    pub fn with_flags(&self) -> Vec<Option<f64>> {
        let mut v = self.base.clone();
        v.extend(
            BASE_COLUMNS
                .iter()
                .zip(&self.base)
                .filter(|(c, _)| c.nullable)
                .map(|(_, x)| Some(if x.is_none() { 1.0 } else { 0.0 })),
        );
        v
    }
}

fn stats_cols(s: Option<SummaryStats>, slope: Option<f64>) -> [Option<f64>; 7] {
    match s {
        Some(s) => [
            Some(s.mean),
            Some(s.max),
            Some(s.min),
            Some(s.std),
            Some(s.first),
            Some(s.last),
            slope,
        ],
        None => [None; 7],
    }
}

/// Assembles the base columns for one retained session. The second value is
/// true when a negative departure offset was discarded.
pub fn build_feature_vector(
    session: &SessionRecord,
    window: &[TimeSeriesSample],
    cfg: &DatasetConfig,
) -> (RawFeatures, bool) {
    let cal = calendar_features(session.connection_time);
    let early = early_window_features(session, window, cfg);
    let (dep, negative) = departure_offset(session);
    let mut base: Vec<Option<f64>> = Vec::with_capacity(BASE_COLUMNS.len());
    for (s, c) in [cal.hour_sc, cal.weekday_sc, cal.month_sc, cal.doy_sc] {
        base.push(Some(s));
        base.push(Some(c));
    }
    base.push(Some(if cal.is_weekend { 1.0 } else { 0.0 }));
    base.push(session.requested_energy_kwh);
    base.push(session.available_minutes);
    base.push(dep);
    base.extend(stats_cols(early.current, early.current_slope));
    base.extend(stats_cols(early.pilot, early.pilot_slope));
    base.push(early.util.map(|u| u.0));
    base.push(early.util.map(|u| u.1));
    base.push(Some(early.early_energy_kwh));
    base.push(Some(early.n_current as f64));
    base.push(Some(early.n_pilot as f64));
    base.push(Some(early.n_merged as f64));
    base.push(Some(early.observed_window_minutes));
    debug_assert_eq!(base.len(), BASE_COLUMNS.len());
    (
        RawFeatures {
            session_id: session.session_id.clone(),
            station_id: session.station_id.clone(),
            target_kwh: session.delivered_energy_kwh.unwrap_or(f64::NAN),
            base,
        },
        negative,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizeReport {
    pub sessions: usize,
    pub negative_departure_offsets: usize,
}

/// Featurizes retained sessions in input order.
pub fn featurize(
    sessions: &[SessionRecord],
    series: &SeriesIndex,
    cfg: &DatasetConfig,
) -> (Vec<RawFeatures>, FeaturizeReport) {
    let empty: Vec<TimeSeriesSample> = Vec::new();
    let rows: Vec<(RawFeatures, bool)> = sessions
        .par_iter()
        .map(|s| {
            let samples = series.get(&s.session_id).unwrap_or(&empty);
            let window = extract_early_window(s, samples, cfg);
            build_feature_vector(s, window, cfg)
        })
        .collect();
    let negative = rows.iter().filter(|r| r.1).count();
    if negative > 0 {
        log::warn!("{negative} requested departures precede connection; treated as missing");
    }
    (
        rows.into_iter().map(|r| r.0).collect(),
        FeaturizeReport {
            sessions: sessions.len(),
            negative_departure_offsets: negative,
        },
    )
}

/// Imputed numeric feature vector with its categorical and target fields.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub numeric: Vec<f64>,
    pub station: usize,
    pub target_kwh: f64,
}

/// Train-split medians for nullable columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Imputer {
    pub medians: Vec<f64>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

impl Imputer {
    /// Medians over the rows given (the training split). Columns never
    /// observed impute to 0.
    pub fn fit(train: &[&RawFeatures]) -> Imputer {
        let medians = (0..BASE_COLUMNS.len())
            .map(|j| median(train.iter().filter_map(|r| r.base[j]).collect()).unwrap_or(0.0))
            .collect();
        Imputer { medians }
    }

    pub fn apply(&self, raw: &RawFeatures) -> Vec<f64> {
        raw.with_flags()
            .into_iter()
            .enumerate()
            .map(|(j, v)| v.unwrap_or_else(|| self.medians[j]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub exempt: Vec<usize>,
}

impl Scaler {
    pub fn fit(train: &[Vec<f64>], kinds: &[ColumnKind]) -> Result<Scaler> {
        let first = train.first().ok_or(Error::Empty("scaler training set"))?;
        let d = first.len();
        if kinds.len() != d {
            return Err(Error::DimensionMismatch {
                expected: kinds.len(),
                actual: d,
            });
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; d];
        for row in train {
            if row.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: row.len(),
                });
            }
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in train {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        let exempt = kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k != ColumnKind::Scaled)
            .map(|(j, _)| j)
            .collect();
        Ok(Scaler { mean, std, exempt })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| if *s > STD_FLOOR { (v - m) / s } else { 0.0 })
            .collect();
        for &j in &self.exempt {
            out[j] = x[j];
        }
        out
    }
}

/// Station-id vocabulary; ids not seen in training map to the reserved
/// final "unknown" index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationVocab {
    pub stations: Vec<String>,
}

impl StationVocab {
    pub fn fit<'a>(ids: impl IntoIterator<Item = &'a str>) -> StationVocab {
        let mut stations: Vec<String> = ids.into_iter().map(str::to_string).collect();
        stations.sort();
        stations.dedup();
        StationVocab { stations }
    }

    pub fn index(&self, id: &str) -> usize {
        self.stations
            .binary_search_by(|s| s.as_str().cmp(id))
            .unwrap_or(self.stations.len())
    }

    pub fn unknown(&self) -> usize {
        self.stations.len()
    }

    /// Embedding rows needed, including the unknown row.
    pub fn cardinality(&self) -> usize {
        self.stations.len() + 1
    }
}

/// Everything fitted on the training split that turns a raw row into a model
/// input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub feature_names: Vec<String>,
    pub imputer: Imputer,
    pub scaler: Scaler,
    pub vocab: StationVocab,
}

impl Preprocessor {
    pub fn fit(train: &[&RawFeatures]) -> Result<Preprocessor> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let imputer = Imputer::fit(train);
        let imputed: Vec<Vec<f64>> = train.iter().map(|r| imputer.apply(r)).collect();
        let scaler = Scaler::fit(&imputed, &feature_kinds())?;
        let vocab = StationVocab::fit(train.iter().map(|r| r.station_id.as_str()));
        Ok(Preprocessor {
            feature_names: feature_names(),
            imputer,
            scaler,
            vocab,
        })
    }

    pub fn transform(&self, raw: &RawFeatures) -> FeatureVector {
        FeatureVector {
            numeric: self.scaler.apply(&self.imputer.apply(raw)),
            station: self.vocab.index(&raw.station_id),
            target_kwh: raw.target_kwh,
        }
    }

    pub fn design<'a>(&self, rows: impl IntoIterator<Item = &'a RawFeatures>) -> Design {
        let mut d = Design::new(feature_dim());
        for r in rows {
            d.push(&self.transform(r));
        }
        d
    }
}

/// Row-major model inputs: standardized numeric features, station index and
/// target per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Design {
    pub dim: usize,
    pub x: Vec<f64>,
    pub station: Vec<usize>,
    pub y: Vec<f64>,
}

impl Design {
    pub fn new(dim: usize) -> Design {
        Design {
            dim,
            ..Default::default()
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], station: Vec<usize>, y: Vec<f64>) -> Design {
        let dim = rows.first().map_or(0, Vec::len);
        Design {
            dim,
            x: rows.iter().flatten().copied().collect(),
            station,
            y,
        }
    }

    pub fn push(&mut self, v: &FeatureVector) {
        debug_assert_eq!(v.numeric.len(), self.dim);
        self.x.extend_from_slice(&v.numeric);
        self.station.push(v.station);
        self.y.push(v.target_kwh);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Design {
        let mut d = Design::new(self.dim);
        for &i in idx {
            d.x.extend_from_slice(self.row(i));
            d.station.push(self.station[i]);
            d.y.push(self.y[i]);
        }
        d
    }
}

const ID_COLUMNS: [&str; 3] = ["session_id", "station_id", "target_kwh"];

/// Writes `features.csv`: id columns, then every numeric column in layout
/// order. Missing base values are empty cells.
pub fn write_features(path: &Path, rows: &[RawFeatures]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(feature_names());
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in rows {
        let mut cells = vec![
            r.session_id.clone(),
            r.station_id.clone(),
            r.target_kwh.to_string(),
        ];
        cells.extend(
            r.with_flags()
                .into_iter()
                .map(|v| v.map(|x| x.to_string()).unwrap_or_default()),
        );
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_features(path: &Path) -> Result<Vec<RawFeatures>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let perr = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = rdr
        .headers()
        .map_err(|e| perr(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect::<Vec<_>>();
    let mut expected: Vec<String> = ID_COLUMNS.iter().map(|s| s.to_string()).collect();
    expected.extend(feature_names());
    if header != expected {
        return Err(perr(1, "features header does not match the feature layout".into()));
    }
    let nb = BASE_COLUMNS.len();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| perr(line, format!("not a number: {s:?}")))
            }
        };
        let target = num(&rec[2])?.ok_or_else(|| perr(line, "missing target".into()))?;
        let base = (0..nb).map(|j| num(&rec[3 + j])).collect::<Result<Vec<_>>>()?;
        for (j, c) in BASE_COLUMNS.iter().enumerate() {
            if base[j].is_none() && !c.nullable {
                return Err(perr(line, format!("{} may not be empty", c.name)));
            }
        }
        out.push(RawFeatures {
            session_id: rec[0].to_string(),
            station_id: rec[1].to_string(),
            target_kwh: target,
            base,
        });
    }
    Ok(out)
}

/// Groups targets by station id, stations in lexicographic order.
pub fn targets_by_station(rows: &[RawFeatures]) -> BTreeMap<String, Vec<f64>> {
    let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        m.entry(r.station_id.clone()).or_default().push(r.target_kwh);
    }
    m
}

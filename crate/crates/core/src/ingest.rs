//! Readers and writers for session metadata and telemetry files (CSV or
//! JSON lines), and the deterministic synthetic depot generator.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, SubsecRound, TimeZone, Utc};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{SeriesIndex, SessionRecord, TimeSeriesSample, Timestamp};
use crate::error::{Error, Result};
use crate::rng;

pub const SESSION_COLUMNS: [&str; 9] = [
    "session_id",
    "site_id",
    "station_id",
    "connection_time",
    "disconnect_time",
    "delivered_energy_kwh",
    "requested_energy_kwh",
    "available_minutes",
    "requested_departure",
];

pub const TIMESERIES_COLUMNS: [&str; 4] = ["session_id", "timestamp", "current_a", "pilot_a"];

const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    /// Skip malformed rows and count them.
    #[default]
    Lenient,
    /// Abort on the first malformed row.
    Strict,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub rows: usize,
    pub skipped: usize,
    pub duplicates: usize,
    pub clamped_negative: usize,
    /// First few diagnostics, `line: message`.
    pub diagnostics: Vec<String>,
}

impl ParseReport {
    fn skip(&mut self, path: &Path, line: u64, msg: String, mode: ParseMode) -> Result<()> {
        if mode == ParseMode::Strict {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: msg,
            });
        }
        self.skipped += 1;
        if self.diagnostics.len() < 20 {
            self.diagnostics.push(format!("{line}: {msg}"));
        }
        Ok(())
    }
}

pub fn format_time(t: &Timestamp) -> String {
    t.format(TIME_FORMAT).to_string()
}

/// Parses an ISO-8601 instant, normalizing to UTC at second precision.
pub fn parse_time(s: &str) -> std::result::Result<Timestamp, String> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc).trunc_subsecs(0))
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

fn is_jsonl(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("jsonl") | Some("ndjson")
    )
}

fn opt_f64(cell: &str, name: &str) -> std::result::Result<Option<f64>, String> {
    let c = cell.trim();
    if c.is_empty() {
        return Ok(None);
    }
    c.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("{name}: not a number: {c:?}"))
}

fn opt_time(cell: &str) -> std::result::Result<Option<Timestamp>, String> {
    let c = cell.trim();
    if c.is_empty() {
        Ok(None)
    } else {
        parse_time(c).map(Some)
    }
}

/// Row shape shared by the JSON-lines format.
#[derive(Debug, Default, Serialize, Deserialize)]
struct SessionRow {
    session_id: String,
    #[serde(default)]
    site_id: String,
    station_id: String,
    connection_time: String,
    #[serde(default)]
    disconnect_time: Option<String>,
    #[serde(default)]
    delivered_energy_kwh: Option<f64>,
    #[serde(default)]
    requested_energy_kwh: Option<f64>,
    #[serde(default)]
    available_minutes: Option<f64>,
    #[serde(default)]
    requested_departure: Option<String>,
}

impl SessionRow {
    fn into_record(self) -> std::result::Result<SessionRecord, String> {
        let ot = |s: Option<String>| opt_time(s.as_deref().unwrap_or(""));
        let rec = SessionRecord {
            connection_time: parse_time(&self.connection_time)?,
            disconnect_time: ot(self.disconnect_time)?,
            requested_departure: ot(self.requested_departure)?,
            session_id: self.session_id,
            site_id: self.site_id,
            station_id: self.station_id,
            delivered_energy_kwh: self.delivered_energy_kwh,
            requested_energy_kwh: self.requested_energy_kwh,
            available_minutes: self.available_minutes,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn from_record(s: &SessionRecord) -> Self {
        SessionRow {
            session_id: s.session_id.clone(),
            site_id: s.site_id.clone(),
            station_id: s.station_id.clone(),
            connection_time: format_time(&s.connection_time),
            disconnect_time: s.disconnect_time.as_ref().map(format_time),
            delivered_energy_kwh: s.delivered_energy_kwh,
            requested_energy_kwh: s.requested_energy_kwh,
            available_minutes: s.available_minutes,
            requested_departure: s.requested_departure.as_ref().map(format_time),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    session_id: String,
    timestamp: String,
    #[serde(default)]
    current_a: Option<f64>,
    #[serde(default)]
    pilot_a: Option<f64>,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(open(path)?))
}

fn column_map(
    path: &Path,
    rdr: &mut csv::Reader<File>,
    wanted: &[&str],
) -> Result<Vec<usize>> {
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h.trim() == *w)
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("missing column {w:?}"),
                })
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

/// Reads session metadata. Rows keep file order; duplicate ids are malformed.
pub fn parse_sessions(path: &Path, mode: ParseMode) -> Result<(Vec<SessionRecord>, ParseReport)> {
    let mut report = ParseReport::default();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut accept = |rec: std::result::Result<SessionRecord, String>,
                      line: u64,
                      report: &mut ParseReport|
     -> Result<()> {
        match rec {
            Ok(r) if !seen.insert(r.session_id.clone()) => {
                report.skip(path, line, format!("duplicate session_id {:?}", r.session_id), mode)
            }
            Ok(r) => {
                out.push(r);
                Ok(())
            }
            Err(msg) => report.skip(path, line, msg, mode),
        }
    };

    if is_jsonl(path) {
        let reader = BufReader::new(open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            report.rows += 1;
            let rec = serde_json::from_str::<SessionRow>(&line)
                .map_err(|e| e.to_string())
                .and_then(SessionRow::into_record);
            accept(rec, i as u64 + 1, &mut report)?;
        }
    } else {
        let mut rdr = csv_reader(path)?;
        let cols = column_map(path, &mut rdr, &SESSION_COLUMNS)?;
        for row in rdr.records() {
            let row = row.map_err(|e| csv_error(path, e))?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            report.rows += 1;
            let cell = |k: usize| row.get(cols[k]).unwrap_or("");
            let rec = (|| -> std::result::Result<SessionRecord, String> {
                let rec = SessionRecord {
                    session_id: cell(0).trim().to_string(),
                    site_id: cell(1).trim().to_string(),
                    station_id: cell(2).trim().to_string(),
                    connection_time: parse_time(cell(3))?,
                    disconnect_time: opt_time(cell(4))?,
                    delivered_energy_kwh: opt_f64(cell(5), SESSION_COLUMNS[5])?,
                    requested_energy_kwh: opt_f64(cell(6), SESSION_COLUMNS[6])?,
                    available_minutes: opt_f64(cell(7), SESSION_COLUMNS[7])?,
                    requested_departure: opt_time(cell(8))?,
                };
                rec.validate()?;
                Ok(rec)
            })();
            accept(rec, line, &mut report)?;
        }
    }
    Ok((out, report))
}

/// Reads telemetry into a per-session index sorted by timestamp. Repeated
/// `(session, timestamp)` pairs keep the row that appears last in the file.
pub fn parse_timeseries(path: &Path, mode: ParseMode) -> Result<(SeriesIndex, ParseReport)> {
    let mut report = ParseReport::default();
    let mut grouped: BTreeMap<String, BTreeMap<Timestamp, TimeSeriesSample>> = BTreeMap::new();
    let mut accept = |row: std::result::Result<SampleRow, String>,
                      line: u64,
                      report: &mut ParseReport|
     -> Result<()> {
        let built = row.and_then(|r| {
            let ts = parse_time(&r.timestamp)?;
            if r.session_id.trim().is_empty() {
                return Err("session_id is empty".into());
            }
            TimeSeriesSample::new(r.session_id.trim(), ts, r.current_a, r.pilot_a)
        });
        match built {
            Ok((sample, clamped)) => {
                if clamped {
                    report.clamped_negative += 1;
                }
                let per = grouped.entry(sample.session_id.clone()).or_default();
                if per.insert(sample.timestamp, sample).is_some() {
                    report.duplicates += 1;
                }
                Ok(())
            }
            Err(msg) => report.skip(path, line, msg, mode),
        }
    };

    if is_jsonl(path) {
        let reader = BufReader::new(open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            report.rows += 1;
            let row = serde_json::from_str::<SampleRow>(&line).map_err(|e| e.to_string());
            accept(row, i as u64 + 1, &mut report)?;
        }
    } else {
        let mut rdr = csv_reader(path)?;
        let cols = column_map(path, &mut rdr, &TIMESERIES_COLUMNS)?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            report.rows += 1;
            let cell = |k: usize| rec.get(cols[k]).unwrap_or("");
            let row = (|| {
                Ok(SampleRow {
                    session_id: cell(0).to_string(),
                    timestamp: cell(1).to_string(),
                    current_a: opt_f64(cell(2), "current_a")?,
                    pilot_a: opt_f64(cell(3), "pilot_a")?,
                })
            })();
            accept(row, line, &mut report)?;
        }
    }
    if report.duplicates > 0 {
        log::warn!(
            "{}: {} duplicate (session, timestamp) rows merged, last value kept",
            path.display(),
            report.duplicates
        );
    }
    if report.clamped_negative > 0 {
        log::warn!(
            "{}: {} negative readings clamped to 0",
            path.display(),
            report.clamped_negative
        );
    }
    let index = grouped
        .into_iter()
        .map(|(k, v)| (k, v.into_values().collect()))
        .collect();
    Ok((index, report))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_sessions(path: &Path, sessions: &[SessionRecord]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    if is_jsonl(path) {
        for s in sessions {
            serde_json::to_writer(&mut w, &SessionRow::from_record(s))?;
            w.write_all(b"\n").map_err(io)?;
        }
    } else {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(SESSION_COLUMNS).map_err(|e| csv_error(path, e))?;
        for s in sessions {
            let ot = |t: &Option<Timestamp>| t.as_ref().map(format_time).unwrap_or_default();
            c.write_record([
                s.session_id.clone(),
                s.site_id.clone(),
                s.station_id.clone(),
                format_time(&s.connection_time),
                ot(&s.disconnect_time),
                fmt_opt(s.delivered_energy_kwh),
                fmt_opt(s.requested_energy_kwh),
                fmt_opt(s.available_minutes),
                ot(&s.requested_departure),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w = c.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    }
    w.flush().map_err(io)
}

pub fn write_timeseries(path: &Path, index: &SeriesIndex) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    if is_jsonl(path) {
        for s in index.values().flatten() {
            let row = SampleRow {
                session_id: s.session_id.clone(),
                timestamp: format_time(&s.timestamp),
                current_a: s.current_a,
                pilot_a: s.pilot_a,
            };
            serde_json::to_writer(&mut w, &row)?;
            w.write_all(b"\n").map_err(io)?;
        }
    } else {
        writeln!(w, "{}", TIMESERIES_COLUMNS.join(",")).map_err(io)?;
        for s in index.values().flatten() {
            writeln!(
                w,
                "{},{},{},{}",
                s.session_id,
                format_time(&s.timestamp),
                fmt_opt(s.current_a),
                fmt_opt(s.pilot_a)
            )
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Conventional file names inside a data directory.
pub fn session_file(dir: &Path) -> PathBuf {
    let jsonl = dir.join("sessions.jsonl");
    if !dir.join("sessions.csv").exists() && jsonl.exists() {
        jsonl
    } else {
        dir.join("sessions.csv")
    }
}

pub fn timeseries_file(dir: &Path) -> PathBuf {
    let jsonl = dir.join("timeseries.jsonl");
    if !dir.join("timeseries.csv").exists() && jsonl.exists() {
        jsonl
    } else {
        dir.join("timeseries.csv")
    }
}

/// Parameters of a generated depot. Each session's current profile is a
/// half-power first step followed by a constant plateau, so the trapezoidal
/// integral of the sampled profile is known in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDepotSpec {
    pub n_stations: usize,
    /// Inclusive range of sessions generated per station.
    pub sessions_per_station: (usize, usize),
    /// One entry per station, or a single entry broadcast to all.
    pub station_energy_mean_kwh: Vec<f64>,
    pub station_energy_std_kwh: f64,
    pub heterogeneity_shift_kwh: f64,
    /// Leading fraction of stations (by index) that receive the shift.
    pub shifted_fraction: f64,
    pub noise_std_kwh: f64,
    /// Range of full-power charging durations in hours.
    pub charge_hours: (f64, f64),
    pub sample_interval_s: i64,
    pub ramp_s: i64,
    /// Probability that a user-input field is reported.
    pub user_input_rate: f64,
    /// Probability that a telemetry row carries only the pilot signal.
    pub pilot_only_rate: f64,
    pub voltage_v: f64,
    pub seed: u64,
}

impl Default for SyntheticDepotSpec {
    fn default() -> Self {
        SyntheticDepotSpec {
            n_stations: 20,
            sessions_per_station: (30, 60),
            station_energy_mean_kwh: vec![9.0],
            station_energy_std_kwh: 5.0,
            heterogeneity_shift_kwh: 0.0,
            shifted_fraction: 0.5,
            noise_std_kwh: 1.0,
            charge_hours: (2.0, 6.0),
            sample_interval_s: 60,
            ramp_s: 120,
            user_input_rate: 0.7,
            pilot_only_rate: 0.03,
            voltage_v: 208.0,
            seed: 0,
        }
    }
}

/// What the generator knows about each session beyond the files it writes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub session_id: String,
    pub station_index: usize,
    pub shifted: bool,
    /// Profile energy before observation noise.
    pub profile_energy_kwh: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticDepot {
    pub sessions: Vec<SessionRecord>,
    pub series: SeriesIndex,
    pub truth: Vec<SyntheticTruth>,
}

impl SyntheticDepotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_stations == 0 {
            return Err(Error::config("n_stations", "must be > 0"));
        }
        let (lo, hi) = self.sessions_per_station;
        if lo == 0 || hi < lo {
            return Err(Error::config("sessions_per_station", "need 0 < min <= max"));
        }
        let m = &self.station_energy_mean_kwh;
        if m.len() != 1 && m.len() != self.n_stations {
            return Err(Error::config(
                "station_energy_mean_kwh",
                "need one entry or one per station",
            ));
        }
        if m.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("station_energy_mean_kwh", "means must be > 0"));
        }
        for (name, v) in [
            ("station_energy_std_kwh", self.station_energy_std_kwh),
            ("heterogeneity_shift_kwh", self.heterogeneity_shift_kwh),
            ("noise_std_kwh", self.noise_std_kwh),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(name, "must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.shifted_fraction) {
            return Err(Error::config("shifted_fraction", "must be in [0, 1]"));
        }
        let (h0, h1) = self.charge_hours;
        if !(h0 > 0.0) || h1 < h0 {
            return Err(Error::config("charge_hours", "need 0 < min <= max"));
        }
        if self.sample_interval_s <= 0 || self.ramp_s < 0 {
            return Err(Error::config("sample_interval_s", "must be > 0"));
        }
        for (name, p) in [
            ("user_input_rate", self.user_input_rate),
            ("pilot_only_rate", self.pilot_only_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, "must be a probability"));
            }
        }
        if !(self.voltage_v > 0.0) {
            return Err(Error::config("voltage_v", "must be > 0"));
        }
        Ok(())
    }

    pub fn station_mean(&self, k: usize) -> f64 {
        let base = if self.station_energy_mean_kwh.len() == 1 {
            self.station_energy_mean_kwh[0]
        } else {
            self.station_energy_mean_kwh[k]
        };
        if self.is_shifted(k) {
            base + self.heterogeneity_shift_kwh
        } else {
            base
        }
    }

    pub fn is_shifted(&self, k: usize) -> bool {
        (k as f64) < (self.shifted_fraction * self.n_stations as f64).round()
    }

    pub fn station_id(k: usize) -> String {
        format!("ST-{k:03}")
    }
}

/// Sampling grid and unit current profile (half level on the ramp, then full)
/// covering `duration_s`. The last grid point is `duration_s` itself.
fn unit_profile(duration_s: i64, interval_s: i64, ramp_s: i64) -> Vec<(i64, f64)> {
    let mut pts = Vec::new();
    let mut t = 0;
    while t < duration_s {
        pts.push((t, if t < ramp_s { 0.5 } else { 1.0 }));
        t += interval_s;
    }
    pts.push((duration_s, 1.0));
    pts
}

fn unit_integral_s(profile: &[(i64, f64)]) -> f64 {
    profile
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0) as f64)
        .sum()
}

pub fn generate_synthetic(spec: &SyntheticDepotSpec) -> Result<SyntheticDepot> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[rng::tag::SYNTH]);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let epoch = Utc.from_utc_datetime(
        &NaiveDate::from_ymd_opt(2019, 1, 1)
            .expect("valid date")
            .and_hms_opt(0, 0, 0)
            .expect("valid time"),
    );

    let mut sessions = Vec::new();
    let mut series = SeriesIndex::new();
    let mut truth = Vec::new();
    for k in 0..spec.n_stations {
        let station = SyntheticDepotSpec::station_id(k);
        let mean = spec.station_mean(k);
        let n = rng.random_range(spec.sessions_per_station.0..=spec.sessions_per_station.1);
        for j in 0..n {
            let session_id = format!("{station}-{j:04}");
            // Truncated normal energy draw: resample nonpositive values.
            let mut energy = mean + spec.station_energy_std_kwh * std_normal.sample(&mut rng);
            let mut tries = 0;
            while energy < 0.5 && tries < 64 {
                energy = mean + spec.station_energy_std_kwh * std_normal.sample(&mut rng);
                tries += 1;
            }
            let energy = energy.max(0.5);

            let hours = if spec.charge_hours.1 > spec.charge_hours.0 {
                rng.random_range(spec.charge_hours.0..spec.charge_hours.1)
            } else {
                spec.charge_hours.0
            };
            let duration_s = (hours * 3600.0).round() as i64;
            let profile = unit_profile(duration_s, spec.sample_interval_s, spec.ramp_s);
            let level = energy * 1000.0 * 3600.0 / (spec.voltage_v * unit_integral_s(&profile));
            let pilot = level.ceil().max(32.0);

            let day = rng.random_range(0..365i64);
            let hour = (9.0 + 2.5 * std_normal.sample(&mut rng)).clamp(0.0, 23.0).floor() as i64;
            let minute = rng.random_range(0..60i64);
            let second = rng.random_range(0..60i64);
            let conn = epoch
                + Duration::days(day)
                + Duration::hours(hour)
                + Duration::minutes(minute)
                + Duration::seconds(second);
            let idle_s = rng.random_range(0..7200i64);
            let stay_s = duration_s + idle_s;

            let delivered =
                (energy + spec.noise_std_kwh * std_normal.sample(&mut rng)).max(0.0);
            let requested = (rng.random::<f64>() < spec.user_input_rate)
                .then(|| (energy * (1.0 + 0.2 * std_normal.sample(&mut rng))).max(0.0));
            let available = (rng.random::<f64>() < spec.user_input_rate)
                .then(|| (stay_s as f64 / 60.0).round());
            let departure = (rng.random::<f64>() < spec.user_input_rate)
                .then(|| conn + Duration::seconds(stay_s));

            let samples: Vec<TimeSeriesSample> = profile
                .iter()
                .map(|&(t, u)| {
                    let pilot_only = t > 0 && rng.random::<f64>() < spec.pilot_only_rate;
                    TimeSeriesSample {
                        session_id: session_id.clone(),
                        timestamp: conn + Duration::seconds(t),
                        current_a: (!pilot_only).then_some(u * level),
                        pilot_a: Some(pilot),
                    }
                })
                .collect();
            // The stored energy matches the profile actually written: pilot-only
            // rows drop current readings, so integrate what remains.
            let times: Vec<f64> = samples
                .iter()
                .filter(|s| s.current_a.is_some())
                .map(|s| (s.timestamp - conn).num_seconds() as f64)
                .collect();
            let currents: Vec<f64> = samples.iter().filter_map(|s| s.current_a).collect();
            let profile_energy = crate::features::early_energy(&times, &currents, spec.voltage_v);
            let delivered = (delivered - energy + profile_energy).max(0.0);

            series.insert(session_id.clone(), samples);
            sessions.push(SessionRecord {
                session_id: session_id.clone(),
                site_id: "synthetic".into(),
                station_id: station.clone(),
                connection_time: conn,
                disconnect_time: Some(conn + Duration::seconds(stay_s)),
                delivered_energy_kwh: Some(delivered),
                requested_energy_kwh: requested,
                available_minutes: available,
                requested_departure: departure,
            });
            truth.push(SyntheticTruth {
                session_id,
                station_index: k,
                shifted: spec.is_shifted(k),
                profile_energy_kwh: profile_energy,
            });
        }
    }
    Ok(SyntheticDepot {
        sessions,
        series,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn session_row_maps_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            dir.path(),
            "sessions.csv",
            "session_id,site_id,station_id,connection_time,disconnect_time,delivered_energy_kwh,requested_energy_kwh,available_minutes,requested_departure\n\
             a,caltech,CA-1,2019-01-07T08:30:00Z,,9.25,,,\n\
             b,caltech,CA-2,2019-01-07T09:00:00Z,2019-01-07T12:00:00Z,4,5.5,180,2019-01-07T12:00:00Z\n",
        );
        let (rows, rep) = parse_sessions(&p, ParseMode::Strict).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rep.rows, 2);
        assert_eq!(rows[0].delivered_energy_kwh, Some(9.25));
        assert_eq!(rows[0].requested_energy_kwh, None);
        assert_eq!(
            rows[0].connection_time,
            Utc.with_ymd_and_hms(2019, 1, 7, 8, 30, 0).unwrap()
        );
        assert_eq!(rows[1].available_minutes, Some(180.0));
    }

    #[test]
    fn lenient_skips_strict_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let body = "session_id,site_id,station_id,connection_time,disconnect_time,delivered_energy_kwh,requested_energy_kwh,available_minutes,requested_departure\n\
                    a,x,CA-1,2019-01-07T08:30:00Z,,9,,,\n\
                    b,x,CA-1,not-a-time,,9,,,\n\
                    c,x,CA-1,2019-01-07T08:30:00Z,,-3,,,\n";
        let p = write_tmp(dir.path(), "s.csv", body);
        let (rows, rep) = parse_sessions(&p, ParseMode::Lenient).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rep.skipped, 2);
        match parse_sessions(&p, ParseMode::Strict) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn timeseries_sorts_and_merges_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(
            dir.path(),
            "ts.csv",
            "session_id,timestamp,current_a,pilot_a\n\
             s1,2019-01-07T08:31:00Z,31.0,32.0\n\
             s1,2019-01-07T08:30:00Z,32.0,32.0\n\
             s2,2019-01-07T08:30:00Z,10,\n\
             s2,2019-01-07T08:30:00Z,12,\n",
        );
        let (idx, rep) = parse_timeseries(&p, ParseMode::Strict).unwrap();
        assert_eq!(idx["s1"].len(), 2);
        assert!(idx["s1"][0].timestamp < idx["s1"][1].timestamp);
        assert_eq!(idx["s1"][0].current_a, Some(32.0));
        assert_eq!(idx["s2"].len(), 1);
        assert_eq!(idx["s2"][0].current_a, Some(12.0));
        assert_eq!(rep.duplicates, 1);
    }

    #[test]
    fn jsonl_matches_csv() {
        let depot = generate_synthetic(&SyntheticDepotSpec {
            n_stations: 2,
            sessions_per_station: (3, 4),
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for ext in ["csv", "jsonl"] {
            let sp = dir.path().join(format!("sessions.{ext}"));
            let tp = dir.path().join(format!("timeseries.{ext}"));
            write_sessions(&sp, &depot.sessions).unwrap();
            write_timeseries(&tp, &depot.series).unwrap();
            let (s, _) = parse_sessions(&sp, ParseMode::Strict).unwrap();
            let (t, _) = parse_timeseries(&tp, ParseMode::Strict).unwrap();
            assert_eq!(s, depot.sessions, "{ext}");
            assert_eq!(t, depot.series, "{ext}");
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticDepotSpec {
            n_stations: 3,
            seed: 11,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.sessions, b.sessions);
        assert_eq!(a.series, b.series);
    }

    #[test]
    fn synthetic_shift_raises_station_means() {
        let spec = SyntheticDepotSpec {
            n_stations: 10,
            sessions_per_station: (200, 200),
            heterogeneity_shift_kwh: 5.0,
            noise_std_kwh: 0.0,
            station_energy_std_kwh: 2.0,
            seed: 3,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let (mut hi, mut lo) = (Vec::new(), Vec::new());
        for (s, t) in d.sessions.iter().zip(&d.truth) {
            let y = s.delivered_energy_kwh.unwrap();
            if t.shifted { hi.push(y) } else { lo.push(y) }
        }
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        // 1000 draws per group with std 2 → standard error of the gap ~0.09.
        assert!((m(&hi) - m(&lo) - 5.0).abs() < 0.4, "{} vs {}", m(&hi), m(&lo));
    }

    #[test]
    fn synthetic_energy_equals_profile_integral_without_noise() {
        let spec = SyntheticDepotSpec {
            n_stations: 2,
            noise_std_kwh: 0.0,
            pilot_only_rate: 0.2,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        for (s, t) in d.sessions.iter().zip(&d.truth) {
            assert!((s.delivered_energy_kwh.unwrap() - t.profile_energy_kwh).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = SyntheticDepotSpec {
            station_energy_mean_kwh: vec![0.0],
            ..Default::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }
}

//! Session and telemetry domain types, plus the retention rules that decide
//! which sessions enter the modelling cohort.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

/// Session metadata as exported by the charging network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub site_id: String,
    pub station_id: String,
    pub connection_time: Timestamp,
    pub disconnect_time: Option<Timestamp>,
    /// Regression target. `None` rows never survive retention.
    pub delivered_energy_kwh: Option<f64>,
    pub requested_energy_kwh: Option<f64>,
    pub available_minutes: Option<f64>,
    pub requested_departure: Option<Timestamp>,
}

impl SessionRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.session_id.is_empty() {
            return Err("session_id is empty".into());
        }
        if let Some(d) = self.disconnect_time {
            if d < self.connection_time {
                return Err("disconnect_time precedes connection_time".into());
            }
        }
        for (name, v) in [
            ("delivered_energy_kwh", self.delivered_energy_kwh),
            ("requested_energy_kwh", self.requested_energy_kwh),
            ("available_minutes", self.available_minutes),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(format!("{name} must be a nonnegative number, got {v}"));
                }
            }
        }
        Ok(())
    }
}

/// One telemetry observation. At least one of the two signals is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub session_id: String,
    pub timestamp: Timestamp,
    pub current_a: Option<f64>,
    pub pilot_a: Option<f64>,
}

impl TimeSeriesSample {
    /// Builds a sample, clamping negative readings to zero. The flag reports
    /// whether any clamping happened.
    pub fn new(
        session_id: impl Into<String>,
        timestamp: Timestamp,
        current_a: Option<f64>,
        pilot_a: Option<f64>,
    ) -> std::result::Result<(Self, bool), String> {
        if current_a.is_none() && pilot_a.is_none() {
            return Err("sample carries neither current nor pilot".into());
        }
        let mut clamped = false;
        let mut fix = |v: Option<f64>| -> std::result::Result<Option<f64>, String> {
            match v {
                Some(x) if !x.is_finite() => Err(format!("non-finite reading {x}")),
                Some(x) if x < 0.0 => {
                    clamped = true;
                    Ok(Some(0.0))
                }
                other => Ok(other),
            }
        };
        let current_a = fix(current_a)?;
        let pilot_a = fix(pilot_a)?;
        Ok((
            TimeSeriesSample {
                session_id: session_id.into(),
                timestamp,
                current_a,
                pilot_a,
            },
            clamped,
        ))
    }
}

/// Telemetry grouped per session, each list sorted strictly ascending by time.
pub type SeriesIndex = BTreeMap<String, Vec<TimeSeriesSample>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub early_window_minutes: f64,
    pub min_early_current_samples: usize,
    pub nominal_voltage_v: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            early_window_minutes: 10.0,
            min_early_current_samples: 5,
            nominal_voltage_v: 208.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.early_window_minutes > 0.0) {
            return Err(Error::config("early_window_minutes", "must be > 0"));
        }
        if self.min_early_current_samples == 0 {
            return Err(Error::config("min_early_current_samples", "must be > 0"));
        }
        if !(self.nominal_voltage_v > 0.0) {
            return Err(Error::config("nominal_voltage_v", "must be > 0"));
        }
        Ok(())
    }

    /// Window length rounded to whole seconds (timestamps carry second precision).
    pub fn window(&self) -> Duration {
        Duration::seconds((self.early_window_minutes * 60.0).round() as i64)
    }
}

/// True when `t` lies in the closed interval `[conn, conn + W]`.
pub fn in_early_window(t: Timestamp, conn: Timestamp, cfg: &DatasetConfig) -> bool {
    t >= conn && t <= conn + cfg.window()
}

pub fn count_early_current(
    session: &SessionRecord,
    samples: &[TimeSeriesSample],
    cfg: &DatasetConfig,
) -> usize {
    samples
        .iter()
        .filter(|s| s.current_a.is_some() && in_early_window(s.timestamp, session.connection_time, cfg))
        .count()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionTally {
    pub input: usize,
    pub retained: usize,
    pub missing_series: usize,
    pub missing_target: usize,
    pub too_few_early_current: usize,
}

/// Keeps sessions present in both sources, with a target, and with enough
/// early-window current readings. Input order is preserved.
pub fn retain_sessions(
    sessions: &[SessionRecord],
    series: &SeriesIndex,
    cfg: &DatasetConfig,
) -> (Vec<SessionRecord>, RetentionTally) {
    let mut tally = RetentionTally {
        input: sessions.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(sessions.len());
    for s in sessions {
        let samples = match series.get(&s.session_id) {
            Some(v) if !v.is_empty() => v,
            _ => {
                tally.missing_series += 1;
                continue;
            }
        };
        if s.delivered_energy_kwh.is_none() {
            tally.missing_target += 1;
            continue;
        }
        if count_early_current(s, samples, cfg) < cfg.min_early_current_samples {
            tally.too_few_early_current += 1;
            continue;
        }
        kept.push(s.clone());
    }
    tally.retained = kept.len();
    (kept, tally)
}

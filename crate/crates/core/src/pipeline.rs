//! Stage glue shared by the CLI and tests: raw directory to feature rows.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{retain_sessions, DatasetConfig, RetentionTally, SeriesIndex, SessionRecord};
use crate::error::Result;
use crate::features::{featurize, read_features, FeaturizeReport, RawFeatures};
use crate::ingest::{parse_sessions, parse_timeseries, session_file, timeseries_file, ParseMode, ParseReport};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub sessions: ParseReport,
    pub timeseries: ParseReport,
    pub retention: RetentionTally,
}

/// Parsed and filtered sessions with their series.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub sessions: Vec<SessionRecord>,
    pub series: SeriesIndex,
    pub report: IngestReport,
}

pub fn ingest_dir(dir: &Path, mode: ParseMode, cfg: &DatasetConfig) -> Result<Ingested> {
    cfg.validate()?;
    let (sessions, s_rep) = parse_sessions(&session_file(dir), mode)?;
    let (mut series, t_rep) = parse_timeseries(&timeseries_file(dir), mode)?;
    let (kept, tally) = retain_sessions(&sessions, &series, cfg);
    let ids: std::collections::HashSet<&str> = kept.iter().map(|s| s.session_id.as_str()).collect();
    series.retain(|k, _| ids.contains(k.as_str()));
    Ok(Ingested {
        sessions: kept,
        series,
        report: IngestReport {
            sessions: s_rep,
            timeseries: t_rep,
            retention: tally,
        },
    })
}

pub fn featurize_dir(
    dir: &Path,
    mode: ParseMode,
    cfg: &DatasetConfig,
) -> Result<(Vec<RawFeatures>, IngestReport, FeaturizeReport)> {
    let ing = ingest_dir(dir, mode, cfg)?;
    let (rows, rep) = featurize(&ing.sessions, &ing.series, cfg);
    Ok((rows, ing.report, rep))
}

/// `path` itself when it is a file, otherwise `path/features.csv`.
pub fn features_path(path: &Path) -> PathBuf {
    if path.is_file() {
        path.to_path_buf()
    } else {
        path.join("features.csv")
    }
}

pub fn load_features(path: &Path) -> Result<Vec<RawFeatures>> {
    read_features(&features_path(path))
}

//! Splits, metrics, single- and multi-seed experiment runs, and report files.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Design, Preprocessor, RawFeatures};
use crate::federation::{
    federated_target_moments, run_centralized, run_federated, CentralConfig, ClientData, EvalSets,
    FedConfig, RoundLog,
};
use crate::models::{
    Architecture, DummyGaussian, DummyMean, LinearRegression, Mlp, MlpSpec, Model, ModelKind,
    Predictor,
};
use crate::partition::ClientPartition;
use crate::rng;

fn check_lengths(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred, target)?;
    let mse = pred.iter().zip(target).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("split.train", self.train), ("split.val", self.val), ("split.test", self.test)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(name, format!("must be in (0, 1), got {v}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub fractions: SplitFractions,
    /// One label per input row, in input order.
    pub labels: Vec<SplitLabel>,
}

impl SplitAssignment {
    /// Row indices carrying `label`, ascending.
    pub fn indices(&self, label: SplitLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Seeded shuffle of `n` rows cut into train, val and test. Val holds
/// `floor(f_val·n)` rows, train and val together `floor((f_train + f_val)·n)`,
/// and test the remainder, so every split is within one row of its target.
/// Small inputs can leave val empty.
pub fn split(n: usize, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    if n < 3 {
        return Err(Error::config("dataset", format!("{n} rows cannot fill three splits")));
    }
    let floor = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let n_val = floor(fractions.val);
    let n_train = floor(fractions.train + fractions.val) - n_val;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag::SPLIT]));
    let mut labels = vec![SplitLabel::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        if pos < n_train {
            labels[i] = SplitLabel::Train;
        } else if pos < n_train + n_val {
            labels[i] = SplitLabel::Val;
        }
    }
    Ok(SplitAssignment {
        seed,
        fractions,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Centralized,
    Federated,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Centralized => "centralized",
            TrainMode::Federated => "federated",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "centralized" => Ok(TrainMode::Centralized),
            "federated" => Ok(TrainMode::Federated),
            other => Err(Error::config("mode", format!("unknown mode {other:?} (centralized|federated)"))),
        }
    }
}

/// Everything one (model, mode) experiment needs besides the data and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub mode: TrainMode,
    pub split: SplitFractions,
    pub fed: FedConfig,
    pub central: CentralConfig,
    pub mlp_dropout: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelKind::Mlp,
            mode: TrainMode::Centralized,
            split: SplitFractions::default(),
            fed: FedConfig::default(),
            central: CentralConfig::default(),
            mlp_dropout: 0.2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        self.fed.validate()?;
        self.central.validate()?;
        if !(0.0..1.0).contains(&self.mlp_dropout) {
            return Err(Error::config("mlp_dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.fed.seed = seed;
        c.central.seed = seed;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub session_id: String,
    pub y_true: f64,
    pub y_pred: f64,
}

/// Complete output of one seeded run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub split: SplitAssignment,
    pub preprocessor: Preprocessor,
    pub predictor: Predictor,
    pub best_round: usize,
    pub convergence_round: Option<usize>,
    pub val_mae: f64,
    pub test_mae: f64,
    pub test_rmse: f64,
    pub log: Vec<RoundLog>,
    /// Test-split predictions at the retained checkpoint.
    pub predictions: Vec<Prediction>,
    pub n_clients: usize,
}

pub fn build_architecture(kind: ModelKind, pre: &Preprocessor, dropout: f64) -> Result<Option<Architecture>> {
    let dim = pre.feature_names.len();
    Ok(match kind {
        ModelKind::DummyMean | ModelKind::DummyGauss => None,
        ModelKind::Lr => Some(Architecture::Linear(LinearRegression { dim })),
        ModelKind::Mlp => {
            let spec = MlpSpec {
                dropout_rate: dropout,
                ..MlpSpec::new(dim, pre.vocab.cardinality())
            };
            Some(Architecture::Mlp(Mlp::new(spec)?))
        }
    })
}

fn fit_dummy(kind: ModelKind, mode: TrainMode, train: &Design, clients: &[ClientData], seed: u64) -> Result<Predictor> {
    let (mu, sigma) = match mode {
        TrainMode::Federated => federated_target_moments(clients)?,
        TrainMode::Centralized => {
            let g = DummyGaussian::fit(&train.y)?;
            (DummyMean::fit(&train.y)?.mean, g.sigma)
        }
    };
    Ok(match kind {
        ModelKind::DummyMean => Predictor::DummyMean(DummyMean { mean: mu }),
        _ => Predictor::DummyGauss {
            model: DummyGaussian { mu, sigma },
            seed,
        },
    })
}

/// Split, preprocess, train and score one seed.
pub fn run_seed(rows: &[RawFeatures], cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let cfg = cfg.with_seed(seed);
    let split = split(rows.len(), cfg.split, seed)?;
    let pick = |l| split.indices(l).into_iter().map(|i| &rows[i]).collect::<Vec<_>>();
    let (train_rows, val_rows, test_rows) = (pick(SplitLabel::Train), pick(SplitLabel::Val), pick(SplitLabel::Test));
    for (rows, name) in [(&val_rows, "validation split"), (&test_rows, "test split")] {
        if rows.is_empty() {
            return Err(Error::Empty(name));
        }
    }
    let pre = Preprocessor::fit(&train_rows)?;
    let train = pre.design(train_rows.iter().copied());
    let val = pre.design(val_rows.iter().copied());
    let test = pre.design(test_rows.iter().copied());
    let partition = ClientPartition::by_station(&train_rows.iter().map(|r| r.station_id.as_str()).collect::<Vec<_>>())?;
    let clients = ClientData::from_partition(&train, &partition)?;
    let eval = EvalSets { val: &val, test: &test };

    let (predictor, best_round, convergence_round, log) = match build_architecture(cfg.model, &pre, cfg.mlp_dropout)? {
        None => (fit_dummy(cfg.model, cfg.mode, &train, &clients, seed)?, 0, None, Vec::new()),
        Some(arch) => {
            let level = train.y.iter().sum::<f64>() / train.len() as f64;
            let init = arch.init_params(seed, level);
            let out = match cfg.mode {
                TrainMode::Federated => run_federated(&arch, &init, &clients, eval, &cfg.fed)?,
                TrainMode::Centralized => run_centralized(&arch, &init, &train, eval, &cfg.central)?,
            };
            let model = Model::new(arch, out.best)?;
            (Predictor::Trained(model), out.best_round, out.convergence_round, out.log)
        }
    };
    let val_pred = predictor.predict(&val)?;
    let test_pred = predictor.predict(&test)?;
    let predictions = test_rows
        .iter()
        .zip(&test_pred)
        .map(|(r, &p)| Prediction {
            session_id: r.session_id.clone(),
            y_true: r.target_kwh,
            y_pred: p,
        })
        .collect();
    Ok(SeedRun {
        seed,
        split,
        preprocessor: pre,
        predictor,
        best_round,
        convergence_round,
        val_mae: mae(&val_pred, &val.y)?,
        test_mae: mae(&test_pred, &test.y)?,
        test_rmse: rmse(&test_pred, &test.y)?,
        log,
        predictions,
        n_clients: partition.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_mae: f64,
    pub test_rmse: f64,
    pub best_round: usize,
    pub convergence_round: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelKind,
    pub mode: TrainMode,
    /// How splits relate across seeds.
    pub split_policy: String,
    pub per_seed: Vec<SeedResult>,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub n_seeds: usize,
    /// Median over seeds whose run converged; `None` if none did.
    pub convergence_round_median: Option<f64>,
}

pub const SPLIT_POLICY: &str = "resplit-per-seed";

pub fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

impl RunReport {
    pub fn from_seeds(model: ModelKind, mode: TrainMode, per_seed: Vec<SeedResult>) -> Result<RunReport> {
        if per_seed.is_empty() {
            return Err(Error::Empty("seed results"));
        }
        let maes: Vec<f64> = per_seed.iter().map(|s| s.test_mae).collect();
        let rmses: Vec<f64> = per_seed.iter().map(|s| s.test_rmse).collect();
        let (mae_mean, mae_std) = mean_std(&maes);
        let (rmse_mean, rmse_std) = mean_std(&rmses);
        let conv = per_seed.iter().filter_map(|s| s.convergence_round.map(|r| r as f64)).collect();
        Ok(RunReport {
            model,
            mode,
            split_policy: SPLIT_POLICY.into(),
            n_seeds: per_seed.len(),
            per_seed,
            mae_mean,
            mae_std,
            rmse_mean,
            rmse_std,
            convergence_round_median: median(conv),
        })
    }
}

impl From<&SeedRun> for SeedResult {
    fn from(r: &SeedRun) -> SeedResult {
        SeedResult {
            seed: r.seed,
            test_mae: r.test_mae,
            test_rmse: r.test_rmse,
            best_round: r.best_round,
            convergence_round: r.convergence_round,
        }
    }
}

/// Runs every seed, concurrently, and aggregates. The first failing seed
/// (in seed-list order) is reported.
pub fn multi_seed_run(rows: &[RawFeatures], cfg: &ExperimentConfig, seeds: &[u64]) -> Result<(RunReport, Vec<SeedRun>)> {
    if seeds.is_empty() {
        return Err(Error::Empty("seeds"));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("seeds", "seeds must be distinct"));
    }
    cfg.validate()?;
    let runs = seeds
        .par_iter()
        .map(|&s| {
            run_seed(rows, cfg, s).map_err(|e| Error::Seed {
                seed: s,
                source: Box::new(e),
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport::from_seeds(cfg.model, cfg.mode, runs.iter().map(SeedResult::from).collect())?;
    Ok((report, runs))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub const RESULTS_HEADER: &str =
    "model,mode,mae_mean,mae_std,rmse_mean,rmse_std,n_seeds,convergence_round_median";

pub fn results_csv(reports: &[RunReport]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in reports {
        let conv = r.convergence_round_median.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.model, r.mode.as_str(), r.mae_mean, r.mae_std, r.rmse_mean, r.rmse_std, r.n_seeds, conv
        );
    }
    s
}

/// Writes `results.csv` and `results.json` into `dir`.
pub fn emit_report(reports: &[RunReport], dir: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Empty("reports"));
    }
    write_file(&dir.join("results.csv"), &results_csv(reports))?;
    let mut json = serde_json::to_string_pretty(reports)?;
    json.push('\n');
    write_file(&dir.join("results.json"), &json)
}

pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut s = String::from("session_id,y_true,y_pred\n");
    for p in preds {
        let _ = writeln!(s, "{},{},{}", p.session_id, p.y_true, p.y_pred);
    }
    write_file(path, &s)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    })?;
    rdr.deserialize()
        .map(|r| {
            r.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })
        })
        .collect()
}

pub const ROUNDS_HEADER: &str = "round,val_mae,val_rmse,test_mae,test_rmse,clients";

/// `rounds.csv`; the clients column joins sampled client ids with `;`.
pub fn write_rounds(path: &Path, log: &[RoundLog]) -> Result<()> {
    let mut s = String::from(ROUNDS_HEADER);
    s.push('\n');
    for l in log {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            l.round,
            l.val_mae,
            l.val_rmse,
            l.test_mae,
            l.test_rmse,
            l.clients.join(";")
        );
    }
    write_file(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 4.0]).unwrap(), 1.0);
        assert!((rmse(&[1.0, 2.0], &[1.0, 4.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        let c = 2.5;
        let y = [1.0, -3.0, 7.0];
        let p: Vec<f64> = y.iter().map(|v| v + c).collect();
        assert_eq!(mae(&p, &y).unwrap(), c);
        assert_eq!(rmse(&p, &y).unwrap(), c);
        assert!(mae(&[1.0], &[]).is_err());
        assert!(mae(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae(pairs in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..60)) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (a, r) = (mae(&p, &y).unwrap(), rmse(&p, &y).unwrap());
            prop_assert!(r >= a * (1.0 - 1e-12) - 1e-12);
        }

        #[test]
        fn split_partitions_and_respects_counts(n in 3usize..400, seed in 0u64..1000) {
            let s = split(n, SplitFractions::default(), seed).unwrap();
            let (tr, va, te) = (s.indices(SplitLabel::Train), s.indices(SplitLabel::Val), s.indices(SplitLabel::Test));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            prop_assert!(!tr.is_empty() && !te.is_empty());
            prop_assert!(n < 7 || !va.is_empty());
            for (got, f) in [(tr.len(), 0.70), (va.len(), 0.15), (te.len(), 0.15)] {
                prop_assert!((got as f64 - f * n as f64).abs() <= 1.0 + 1e-9, "{} vs {}", got, f * n as f64);
            }
        }
    }

    #[test]
    fn split_examples() {
        let count = |s: &SplitAssignment, l| s.indices(l).len();
        let s = split(100, SplitFractions::default(), 3).unwrap();
        assert_eq!(
            (count(&s, SplitLabel::Train), count(&s, SplitLabel::Val), count(&s, SplitLabel::Test)),
            (70, 15, 15)
        );
        let s = split(10, SplitFractions::default(), 3).unwrap();
        assert_eq!(
            (count(&s, SplitLabel::Train), count(&s, SplitLabel::Val), count(&s, SplitLabel::Test)),
            (7, 1, 2)
        );
        assert_eq!(split(10, SplitFractions::default(), 3).unwrap(), s);
        assert_ne!(split(10, SplitFractions::default(), 4).unwrap().labels, s.labels);
        assert!(split(2, SplitFractions::default(), 0).is_err());
        let bad = SplitFractions { train: 0.8, ..Default::default() };
        assert!(split(10, bad, 0).is_err());
    }

    #[test]
    fn mean_std_is_population() {
        let (m, s) = mean_std(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]);
        assert_eq!((m, s), (5.0, 2.0));
    }

    fn report(model: ModelKind, maes: &[f64]) -> RunReport {
        RunReport::from_seeds(
            model,
            TrainMode::Federated,
            maes.iter()
                .enumerate()
                .map(|(i, &m)| SeedResult {
                    seed: i as u64,
                    test_mae: m,
                    test_rmse: m * 1.5,
                    best_round: 3,
                    convergence_round: if i % 2 == 0 { Some(10 + i) } else { None },
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn report_files_are_stable_and_consistent() {
        let reps = vec![report(ModelKind::Lr, &[3.0, 4.0, 5.5]), report(ModelKind::Mlp, &[3.2])];
        let dir = tempfile::tempdir().unwrap();
        emit_report(&reps, dir.path()).unwrap();
        let csv1 = std::fs::read(dir.path().join("results.csv")).unwrap();
        let json1 = std::fs::read(dir.path().join("results.json")).unwrap();
        emit_report(&reps, dir.path()).unwrap();
        assert_eq!(csv1, std::fs::read(dir.path().join("results.csv")).unwrap());
        assert_eq!(json1, std::fs::read(dir.path().join("results.json")).unwrap());

        let text = String::from_utf8(csv1).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RESULTS_HEADER);
        assert_eq!(lines.len(), 3);
        let back = read_reports(&dir.path().join("results.json")).unwrap();
        assert_eq!(back, reps);
        for (line, r) in lines[1..].iter().zip(&back) {
            let cols: Vec<&str> = line.split(',').collect();
            let per_seed_mean =
                r.per_seed.iter().map(|s| s.test_mae).sum::<f64>() / r.per_seed.len() as f64;
            assert!((cols[2].parse::<f64>().unwrap() - per_seed_mean).abs() < 1e-12);
        }
        // Seeds 0 and 2 converged at rounds 10 and 12.
        assert_eq!(back[0].convergence_round_median, Some(11.0));
        assert!(emit_report(&[], dir.path()).is_err());
    }

    #[test]
    fn predictions_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("predictions.csv");
        let preds = vec![
            Prediction { session_id: "a".into(), y_true: 1.0 / 3.0, y_pred: 2.0e-17 },
            Prediction { session_id: "b".into(), y_true: 9.5, y_pred: 8.123456789012345 },
        ];
        write_predictions(&p, &preds).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), preds);
    }
}

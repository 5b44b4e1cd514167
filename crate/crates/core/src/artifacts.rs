//! Reading and writing a single run directory.
//!
//! ```text
//! config.json       effective configuration
//! preprocess.json   imputer, scaler and station vocabulary
//! checkpoint.bin    retained parameters
//! rounds.csv        per-round (or per-epoch) scores
//! predictions.csv   test-split predictions
//! metrics.json      split sizes and headline scores
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{build_architecture, write_predictions, write_rounds, SeedRun, SplitLabel, TrainMode};
use crate::features::Preprocessor;
use crate::models::{checkpoint, DummyGaussian, DummyMean, Model, ModelKind, Predictor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub model: ModelKind,
    pub mode: TrainMode,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_clients: usize,
    pub n_params: usize,
    pub best_round: usize,
    pub convergence_round: Option<usize>,
    pub val_mae: f64,
    pub test_mae: f64,
    pub test_rmse: f64,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_run(dir: &Path, cfg: &RunConfig, run: &SeedRun) -> Result<RunMetrics> {
    cfg.echo(dir)?;
    write_json(&dir.join("preprocess.json"), &run.preprocessor)?;
    let params = run.predictor.params();
    checkpoint::save(&dir.join("checkpoint.bin"), &params)?;
    write_rounds(&dir.join("rounds.csv"), &run.log)?;
    write_predictions(&dir.join("predictions.csv"), &run.predictions)?;
    let count = |l| run.split.indices(l).len();
    let metrics = RunMetrics {
        model: cfg.experiment.model,
        mode: cfg.experiment.mode,
        seed: run.seed,
        n_train: count(SplitLabel::Train),
        n_val: count(SplitLabel::Val),
        n_test: count(SplitLabel::Test),
        n_clients: run.n_clients,
        n_params: params.len(),
        best_round: run.best_round,
        convergence_round: run.convergence_round,
        val_mae: run.val_mae,
        test_mae: run.test_mae,
        test_rmse: run.test_rmse,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// A trained predictor restored from its run directory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub preprocessor: Preprocessor,
    pub predictor: Predictor,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = crate::config::RunConfig::load(&dir.join("config.json"))?;
    let preprocessor: Preprocessor = read_json(&dir.join("preprocess.json"))?;
    let exp = &config.experiment;
    let seed = config.seeds.first().copied().unwrap_or(0);
    let ckpt = dir.join("checkpoint.bin");
    let predictor = match build_architecture(exp.model, &preprocessor, exp.mlp_dropout)? {
        Some(arch) => {
            let params = checkpoint::load(&ckpt, Arc::new(arch.layout()))?;
            Predictor::Trained(Model::new(arch, params)?)
        }
        None => {
            let template = match exp.model {
                ModelKind::DummyMean => Predictor::DummyMean(DummyMean { mean: 0.0 }),
                _ => Predictor::DummyGauss {
                    model: DummyGaussian { mu: 0.0, sigma: 0.0 },
                    seed,
                },
            };
            let p = checkpoint::load(&ckpt, template.params().layout)?;
            match template {
                Predictor::DummyMean(_) => Predictor::DummyMean(DummyMean { mean: p.values[0] }),
                _ => Predictor::DummyGauss {
                    model: DummyGaussian {
                        mu: p.values[0],
                        sigma: p.values[1],
                    },
                    seed,
                },
            }
        }
    };
    Ok(LoadedRun {
        config,
        preprocessor,
        predictor,
    })
}

pub fn read_metrics(dir: &Path) -> Result<RunMetrics> {
    read_json(&dir.join("metrics.json"))
}

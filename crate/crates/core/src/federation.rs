//! Centralized mini-batch training and the FedAvg simulation.
//!
//! The server side of a federated run only ever handles [`ClientUpdate`]s:
//! a parameter snapshot and a sample count. Rows stay inside
//! [`ClientData`], which trains locally and hands back an update.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{mae, rmse};
use crate::features::Design;
use crate::models::{AdamConfig, AdamState, Architecture, ModelParameters};
use crate::partition::ClientPartition;
use crate::rng::{self, StreamRng};

/// Improvements smaller than this are treated as rounding noise when
/// comparing against `min_delta`.
const DELTA_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_fraction: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub convergence_patience: usize,
    pub convergence_min_delta: f64,
    /// Dropout during local training (MLP only).
    pub dropout: bool,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            rounds: 400,
            local_epochs: 3,
            client_fraction: 0.2,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            convergence_patience: 30,
            convergence_min_delta: 0.01,
            dropout: true,
        }
    }
}

fn check_optimizer(batch_size: usize, lr: f64) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::config("lr", format!("must be positive and finite, got {lr}")));
    }
    Ok(())
}

impl FedConfig {
    /// Everything the trainer needs. `rounds = 0` is accepted here and
    /// yields the initial parameters.
    pub fn validate_training(&self) -> Result<()> {
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(Error::config(
                "client_fraction",
                format!("must be in (0, 1], got {}", self.client_fraction),
            ));
        }
        check_optimizer(self.batch_size, self.lr)?;
        if self.convergence_patience == 0 {
            return Err(Error::config("convergence_patience", "must be at least 1"));
        }
        if !(self.convergence_min_delta >= 0.0 && self.convergence_min_delta.is_finite()) {
            return Err(Error::config("convergence_min_delta", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// Training checks plus `rounds >= 1`, as required of user-supplied runs.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        self.validate_training()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CentralConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub dropout: bool,
    /// Reset Adam moments every this many epochs. `None` keeps one optimizer
    /// for the whole run.
    pub optimizer_reset_every: Option<usize>,
    pub convergence_patience: usize,
    pub convergence_min_delta: f64,
}

impl Default for CentralConfig {
    fn default() -> Self {
        CentralConfig {
            epochs: 40,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            dropout: true,
            optimizer_reset_every: None,
            convergence_patience: 30,
            convergence_min_delta: 0.01,
        }
    }
}

impl CentralConfig {
    pub fn validate(&self) -> Result<()> {
        check_optimizer(self.batch_size, self.lr)?;
        if self.optimizer_reset_every == Some(0) {
            return Err(Error::config("optimizer_reset_every", "must be at least 1"));
        }
        if self.convergence_patience == 0 {
            return Err(Error::config("convergence_patience", "must be at least 1"));
        }
        Ok(())
    }
}

/// One completed round (federated) or epoch (centralized). `round` counts
/// from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub clients: Vec<String>,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub test_mae: f64,
    pub test_rmse: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub params: ModelParameters,
    pub n_samples: usize,
}

/// Seeds and batching shared by every pass over a client's rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSchedule {
    pub seed: u64,
    pub batch_size: usize,
    pub dropout: bool,
}

/// A client's private rows.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub id: String,
    /// Position in the partition; keys the client's random streams.
    pub ordinal: usize,
    data: Design,
}

impl ClientData {
    pub fn new(id: impl Into<String>, ordinal: usize, data: Design) -> Result<ClientData> {
        if data.is_empty() {
            return Err(Error::Empty("client data"));
        }
        Ok(ClientData {
            id: id.into(),
            ordinal,
            data,
        })
    }

    /// Splits `train` into one client per partition entry.
    pub fn from_partition(train: &Design, partition: &ClientPartition) -> Result<Vec<ClientData>> {
        partition
            .clients
            .iter()
            .enumerate()
            .map(|(k, c)| ClientData::new(c.id.clone(), k, train.subset(&c.indices)))
            .collect()
    }

    pub fn n_samples(&self) -> usize {
        self.data.len()
    }

    /// Runs `epochs` passes from `global` with a fresh optimizer.
    /// `first_epoch` offsets the epoch counter that keys the shuffle streams.
    pub fn local_train(
        &self,
        arch: &Architecture,
        global: &ModelParameters,
        epochs: usize,
        first_epoch: usize,
        adam: AdamConfig,
        schedule: &EpochSchedule,
    ) -> Result<ClientUpdate> {
        global.check_layout(&arch.layout())?;
        let mut params = global.values.clone();
        let mut opt = AdamState::new(params.len(), adam);
        for e in first_epoch..first_epoch + epochs {
            run_epoch(arch, &mut params, &self.data, &mut opt, schedule, self.ordinal, e)?;
        }
        Ok(ClientUpdate {
            params: ModelParameters::new(global.layout.clone(), params)?,
            n_samples: self.data.len(),
        })
    }
}

fn epoch_stream(schedule: &EpochSchedule, ordinal: usize, epoch: usize) -> StreamRng {
    rng::stream(schedule.seed, &[rng::tag::EPOCH, ordinal as u64, epoch as u64])
}

/// One shuffled pass of mini-batch Adam. Dropout masks are drawn from the
/// same stream as the shuffle.
fn run_epoch(
    arch: &Architecture,
    params: &mut [f64],
    data: &Design,
    opt: &mut AdamState,
    schedule: &EpochSchedule,
    ordinal: usize,
    epoch: usize,
) -> Result<()> {
    let mut r = epoch_stream(schedule, ordinal, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut r);
    let dropout = schedule.dropout && arch.uses_dropout();
    for batch in order.chunks(schedule.batch_size) {
        let (_, grad) = arch.loss_grad(params, data, batch, dropout.then_some(&mut r));
        opt.step(params, &grad)?;
    }
    Ok(())
}

/// Sample-count weighted mean of `updates`, summed in slice order.
///
/// Accumulates `θ_0 + Σ w_k (θ_k − θ_0)`, which equals `Σ w_k θ_k` and
/// returns identical inputs unchanged bit for bit.
pub fn aggregate(updates: &[ClientUpdate]) -> Result<ModelParameters> {
    let first = updates.first().ok_or(Error::Empty("client updates"))?;
    for u in &updates[1..] {
        u.params.check_layout(&first.params.layout)?;
    }
    let total: usize = updates.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::Empty("client samples"));
    }
    let mut out = first.params.values.clone();
    for u in &updates[1..] {
        let w = u.n_samples as f64 / total as f64;
        for ((o, v), b) in out.iter_mut().zip(&u.params.values).zip(&first.params.values) {
            *o += w * (v - b);
        }
    }
    ModelParameters::new(first.params.layout.clone(), out)
}

/// `max(1, round(fraction·K))` clients drawn without replacement, returned
/// as ascending partition ordinals.
pub fn sample_clients(n_clients: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    let m = ((fraction * n_clients as f64).round() as usize).clamp(1, n_clients.max(1));
    if m >= n_clients {
        return (0..n_clients).collect();
    }
    let mut r = rng::stream(seed, &[rng::tag::SAMPLE_CLIENTS, round as u64]);
    let mut picked = rand::seq::index::sample(&mut r, n_clients, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Validation and test rows the global model is scored on.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub val: &'a Design,
    pub test: &'a Design,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub val_mae: f64,
    pub val_rmse: f64,
    pub test_mae: f64,
    pub test_rmse: f64,
}

impl EvalSets<'_> {
    pub fn score(&self, arch: &Architecture, params: &[f64]) -> Result<Scores> {
        let pv = arch.predict(params, self.val)?;
        let pt = arch.predict(params, self.test)?;
        Ok(Scores {
            val_mae: mae(&pv, &self.val.y)?,
            val_rmse: rmse(&pv, &self.val.y)?,
            test_mae: mae(&pt, &self.test.y)?,
            test_rmse: rmse(&pt, &self.test.y)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MAE seen in the log, or the
    /// initial ones when nothing was logged.
    pub best: ModelParameters,
    /// Round or epoch of `best`; 0 for the initial parameters.
    pub best_round: usize,
    pub best_scores: Scores,
    pub final_params: ModelParameters,
    pub log: Vec<RoundLog>,
    pub convergence_round: Option<usize>,
}

struct BestTracker {
    params: ModelParameters,
    round: usize,
    scores: Scores,
}

impl BestTracker {
    fn offer(&mut self, round: usize, params: &ModelParameters, scores: Scores) {
        if self.round == 0 || scores.val_mae < self.scores.val_mae {
            self.params = params.clone();
            self.round = round;
            self.scores = scores;
        }
    }
}

fn log_entry(round: usize, clients: Vec<String>, s: Scores, started: Instant) -> RoundLog {
    RoundLog {
        round,
        clients,
        val_mae: s.val_mae,
        val_rmse: s.val_rmse,
        test_mae: s.test_mae,
        test_rmse: s.test_rmse,
        wall_time_s: started.elapsed().as_secs_f64(),
    }
}

/// FedAvg over `clients`, starting from `init`. Sampled clients train in
/// parallel; aggregation runs in ascending client order.
pub fn run_federated(
    arch: &Architecture,
    init: &ModelParameters,
    clients: &[ClientData],
    eval: EvalSets<'_>,
    cfg: &FedConfig,
) -> Result<TrainOutcome> {
    cfg.validate_training()?;
    if clients.is_empty() {
        return Err(Error::Empty("clients"));
    }
    init.check_layout(&arch.layout())?;
    let schedule = EpochSchedule {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        dropout: cfg.dropout,
    };
    let mut global = init.clone();
    let mut best = BestTracker {
        params: init.clone(),
        round: 0,
        scores: eval.score(arch, &init.values)?,
    };
    let mut log = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let picked = sample_clients(clients.len(), cfg.client_fraction, round, cfg.seed);
        let first_epoch = (round - 1) * cfg.local_epochs;
        let updates = picked
            .par_iter()
            .map(|&k| {
                clients[k].local_train(arch, &global, cfg.local_epochs, first_epoch, cfg.adam(), &schedule)
            })
            .collect::<Result<Vec<_>>>()?;
        global = aggregate(&updates)?;
        let scores = eval.score(arch, &global.values)?;
        best.offer(round, &global, scores);
        let ids = picked.iter().map(|&k| clients[k].id.clone()).collect();
        log.push(log_entry(round, ids, scores, started));
    }
    let convergence_round =
        detect_convergence(&log, cfg.convergence_patience, cfg.convergence_min_delta);
    Ok(TrainOutcome {
        best: best.params,
        best_round: best.round,
        best_scores: best.scores,
        final_params: global,
        log,
        convergence_round,
    })
}

/// Mini-batch Adam on the pooled training rows. Uses the same epoch streams
/// as client 0 of a federated run.
pub fn run_centralized(
    arch: &Architecture,
    init: &ModelParameters,
    train: &Design,
    eval: EvalSets<'_>,
    cfg: &CentralConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    init.check_layout(&arch.layout())?;
    let schedule = EpochSchedule {
        seed: cfg.seed,
        batch_size: cfg.batch_size,
        dropout: cfg.dropout,
    };
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut params = init.values.clone();
    let mut opt = AdamState::new(params.len(), adam);
    let mut best = BestTracker {
        params: init.clone(),
        round: 0,
        scores: eval.score(arch, &init.values)?,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if cfg.optimizer_reset_every.is_some_and(|k| epoch % k == 0) {
            opt = AdamState::new(params.len(), adam);
        }
        run_epoch(arch, &mut params, train, &mut opt, &schedule, 0, epoch)?;
        let scores = eval.score(arch, &params)?;
        let snapshot = ModelParameters::new(init.layout.clone(), params.clone())?;
        best.offer(epoch + 1, &snapshot, scores);
        log.push(log_entry(epoch + 1, Vec::new(), scores, started));
    }
    let convergence_round =
        detect_convergence(&log, cfg.convergence_patience, cfg.convergence_min_delta);
    Ok(TrainOutcome {
        best: best.params,
        best_round: best.round,
        best_scores: best.scores,
        final_params: ModelParameters::new(init.layout.clone(), params)?,
        log,
        convergence_round,
    })
}

/// Earliest round `r` after which none of the next `patience` rounds lowers
/// validation MAE by more than `min_delta` below the best seen up to `r`.
/// The whole patience window must lie inside the log.
pub fn detect_convergence(log: &[RoundLog], patience: usize, min_delta: f64) -> Option<usize> {
    let vals: Vec<f64> = log.iter().map(|l| l.val_mae).collect();
    let mut best = f64::INFINITY;
    for r in 0..vals.len() {
        best = best.min(vals[r]);
        let end = r + patience;
        if end >= vals.len() {
            return None;
        }
        if vals[r + 1..=end].iter().all(|&v| best - v <= min_delta + DELTA_SLACK) {
            return Some(log[r].round);
        }
    }
    None
}

/// Closed-form federated fit of the dummy baselines: each client reports
/// `(n, Σy, Σy²)` over its rows and the server combines them.
pub fn federated_target_moments(clients: &[ClientData]) -> Result<(f64, f64)> {
    let stats: Vec<(f64, f64, f64)> = clients
        .iter()
        .map(|c| {
            let y = &c.data.y;
            (y.len() as f64, y.iter().sum(), y.iter().map(|v| v * v).sum())
        })
        .collect();
    let n: f64 = stats.iter().map(|s| s.0).sum();
    if n == 0.0 {
        return Err(Error::Empty("training targets"));
    }
    let mean = stats.iter().map(|s| s.1).sum::<f64>() / n;
    let var = (stats.iter().map(|s| s.2).sum::<f64>() / n - mean * mean).max(0.0);
    Ok((mean, var.sqrt()))
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evfl::artifacts::{write_run, RunMetrics};
use evfl::config::RunConfig;
use evfl::error::{Error, Result};
use evfl::evaluation::{emit_report, multi_seed_run, read_reports, run_seed, write_predictions, write_rounds, TrainMode};
use evfl::features::write_features;
use evfl::heterogeneity::analyze;
use evfl::ingest::{generate_synthetic, write_sessions, write_timeseries, ParseMode};
use evfl::models::ModelKind;
use evfl::partition::ClientPartition;
use evfl::pipeline::{featurize_dir, ingest_dir, load_features};

#[derive(Parser)]
#[command(name = "evfl", version, about = "Early-session EV charging energy prediction and FedAvg simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct Input {
    /// Input directory (or file, where noted).
    #[arg(long = "in")]
    input: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct DatasetFlags {
    /// Abort on the first malformed row instead of skipping it.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    window_minutes: Option<f64>,
    #[arg(long)]
    min_early_samples: Option<usize>,
    #[arg(long)]
    voltage: Option<f64>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Dropout rate of the MLP hidden layers.
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic depot (sessions.csv, timeseries.csv).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        stations: Option<usize>,
        /// Added to station mean energy (kWh) on the shifted stations.
        #[arg(long)]
        shift: Option<f64>,
        #[arg(long)]
        shifted_fraction: Option<f64>,
        #[arg(long)]
        sessions_min: Option<usize>,
        #[arg(long)]
        sessions_max: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Parse raw logs, apply retention rules, write cleaned files.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        dataset: DatasetFlags,
    },
    /// Build features.csv from a raw or ingested directory.
    Featurize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        dataset: DatasetFlags,
    },
    /// Station-level heterogeneity of the target (heterogeneity.json).
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        permutations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one seeded run from features.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Multi-seed run of one model and mode (results.csv, results.json).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        train: TrainFlags,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Merge results.json files from evaluate directories into one table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Evaluate output directories (repeatable).
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn apply_input(cfg: &mut RunConfig, input: &Input) {
    if let Some(i) = &input.input {
        cfg.input = Some(i.clone());
    }
}

fn apply_dataset(cfg: &mut RunConfig, f: &DatasetFlags) {
    if f.strict {
        cfg.parse_mode = ParseMode::Strict;
    }
    if let Some(v) = f.window_minutes {
        cfg.dataset.early_window_minutes = v;
    }
    if let Some(v) = f.min_early_samples {
        cfg.dataset.min_early_current_samples = v;
    }
    if let Some(v) = f.voltage {
        cfg.dataset.nominal_voltage_v = v;
    }
}

fn apply_train(cfg: &mut RunConfig, f: &TrainFlags) -> Result<()> {
    let e = &mut cfg.experiment;
    if let Some(m) = &f.mode {
        e.mode = m.parse::<TrainMode>()?;
    }
    if let Some(m) = &f.model {
        e.model = m.parse::<ModelKind>()?;
    }
    if let Some(v) = f.rounds {
        e.fed.rounds = v;
    }
    if let Some(v) = f.epochs {
        e.central.epochs = v;
    }
    if let Some(v) = f.local_epochs {
        e.fed.local_epochs = v;
    }
    if let Some(v) = f.fraction {
        e.fed.client_fraction = v;
    }
    if let Some(v) = f.batch_size {
        e.fed.batch_size = v;
        e.central.batch_size = v;
    }
    if let Some(v) = f.lr {
        e.fed.lr = v;
        e.central.lr = v;
    }
    if let Some(v) = f.dropout {
        e.mlp_dropout = v;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            seed,
            stations,
            shift,
            shifted_fraction,
            sessions_min,
            sessions_max,
            noise,
        } => {
            let mut cfg = base_config(&common)?;
            let s = &mut cfg.synthetic;
            if let Some(v) = seed {
                s.seed = v;
            }
            if let Some(v) = stations {
                s.n_stations = v;
            }
            if let Some(v) = shift {
                s.heterogeneity_shift_kwh = v;
            }
            if let Some(v) = shifted_fraction {
                s.shifted_fraction = v;
            }
            if let Some(v) = sessions_min {
                s.sessions_per_station.0 = v;
            }
            if let Some(v) = sessions_max {
                s.sessions_per_station.1 = v;
            }
            if let Some(v) = noise {
                s.noise_std_kwh = v;
            }
            cfg.validate()?;
            let out = cfg.require_out()?.to_path_buf();
            let depot = generate_synthetic(&cfg.synthetic)?;
            mkdir(&out)?;
            write_sessions(&out.join("sessions.csv"), &depot.sessions)?;
            write_timeseries(&out.join("timeseries.csv"), &depot.series)?;
            cfg.echo(&out)?;
            log::info!("wrote {} sessions to {}", depot.sessions.len(), out.display());
        }
        Command::Ingest { common, input, dataset } => {
            let mut cfg = base_config(&common)?;
            apply_input(&mut cfg, &input);
            apply_dataset(&mut cfg, &dataset);
            cfg.validate()?;
            let (inp, out) = (cfg.require_input()?.to_path_buf(), cfg.require_out()?.to_path_buf());
            let ing = ingest_dir(&inp, cfg.parse_mode, &cfg.dataset)?;
            mkdir(&out)?;
            write_sessions(&out.join("sessions.csv"), &ing.sessions)?;
            write_timeseries(&out.join("timeseries.csv"), &ing.series)?;
            write_json(&out.join("ingest_report.json"), &ing.report)?;
            cfg.echo(&out)?;
            log::info!("retained {} of {} sessions", ing.report.retention.retained, ing.report.retention.input);
        }
        Command::Featurize { common, input, dataset } => {
            let mut cfg = base_config(&common)?;
            apply_input(&mut cfg, &input);
            apply_dataset(&mut cfg, &dataset);
            cfg.validate()?;
            let (inp, out) = (cfg.require_input()?.to_path_buf(), cfg.require_out()?.to_path_buf());
            let (rows, ing, feat) = featurize_dir(&inp, cfg.parse_mode, &cfg.dataset)?;
            mkdir(&out)?;
            write_features(&out.join("features.csv"), &rows)?;
            write_json(
                &out.join("featurize_report.json"),
                &serde_json::json!({ "ingest": ing, "featurize": feat }),
            )?;
            cfg.echo(&out)?;
            log::info!("wrote {} feature rows", rows.len());
        }
        Command::Analyze {
            common,
            input,
            bins,
            permutations,
            seed,
        } => {
            let mut cfg = base_config(&common)?;
            apply_input(&mut cfg, &input);
            if let Some(v) = bins {
                cfg.heterogeneity.bins = v;
            }
            if let Some(v) = permutations {
                cfg.heterogeneity.n_permutations = v;
            }
            if let Some(v) = seed {
                cfg.heterogeneity.seed = v;
            }
            cfg.validate()?;
            let (inp, out) = (cfg.require_input()?.to_path_buf(), cfg.require_out()?.to_path_buf());
            let rows = load_features(&inp)?;
            let targets: Vec<f64> = rows.iter().map(|r| r.target_kwh).collect();
            let stations: Vec<&str> = rows.iter().map(|r| r.station_id.as_str()).collect();
            let partition = ClientPartition::by_station(&stations)?;
            let report = analyze(&targets, &partition, &cfg.heterogeneity)?;
            mkdir(&out)?;
            write_json(&out.join("heterogeneity.json"), &report)?;
            cfg.echo(&out)?;
            println!(
                "K={} js_weighted={:.6} tau_iid={:.6} -> {}",
                partition.len(),
                report.js_weighted,
                report.tau_iid,
                report.classification.as_str()
            );
        }
        Command::Train {
            common,
            input,
            train,
            seed,
        } => {
            let mut cfg = base_config(&common)?;
            apply_input(&mut cfg, &input);
            apply_train(&mut cfg, &train)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            cfg.seeds.truncate(1);
            cfg.validate()?;
            let (inp, out) = (cfg.require_input()?.to_path_buf(), cfg.require_out()?.to_path_buf());
            let rows = load_features(&inp)?;
            let run = run_seed(&rows, &cfg.experiment, cfg.seeds[0])?;
            mkdir(&out)?;
            let m: RunMetrics = write_run(&out, &cfg, &run)?;
            println!(
                "{} {} seed={} test_mae={:.4} test_rmse={:.4} best_round={}",
                m.model,
                m.mode.as_str(),
                m.seed,
                m.test_mae,
                m.test_rmse,
                m.best_round
            );
        }
        Command::Evaluate {
            common,
            input,
            train,
            seeds,
        } => {
            let mut cfg = base_config(&common)?;
            apply_input(&mut cfg, &input);
            apply_train(&mut cfg, &train)?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let (inp, out) = (cfg.require_input()?.to_path_buf(), cfg.require_out()?.to_path_buf());
            let rows = load_features(&inp)?;
            let (report, runs) = multi_seed_run(&rows, &cfg.experiment, &cfg.seeds)?;
            mkdir(&out)?;
            for r in &runs {
                let d = out.join(format!("seed-{}", r.seed));
                mkdir(&d)?;
                write_predictions(&d.join("predictions.csv"), &r.predictions)?;
                write_rounds(&d.join("rounds.csv"), &r.log)?;
            }
            emit_report(std::slice::from_ref(&report), &out)?;
            cfg.echo(&out)?;
            println!(
                "{} {} mae={:.4}±{:.4} rmse={:.4}±{:.4} seeds={}",
                report.model,
                report.mode.as_str(),
                report.mae_mean,
                report.mae_std,
                report.rmse_mean,
                report.rmse_std,
                report.n_seeds
            );
        }
        Command::Report { common, inputs } => {
            let cfg = base_config(&common)?;
            let out = cfg.require_out()?.to_path_buf();
            let mut all = Vec::new();
            for dir in &inputs {
                all.extend(read_reports(&dir.join("results.json"))?);
            }
            emit_report(&all, &out)?;
            print!("{}", evfl::evaluation::results_csv(&all));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

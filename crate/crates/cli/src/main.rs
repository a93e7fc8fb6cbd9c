use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ncdyn::nbody::{generate_dataset, read_dataset, worker_threads, write_dataset};
use ncdyn::train::{
    evaluate, run_study, train_to_dir, Checkpoint, StudyConfig, StudyKind, TrainConfig, TrainData, REPORT_FILE,
};

/// Newton–Cotes graph networks for charged particle dynamics.
#[derive(Debug, Parser)]
#[command(name = "nc-dyn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate trajectories and write them as JSON lines.
    Gen {
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 700)]
        count: usize,
        /// Window duration.
        #[arg(long, default_value_t = 1.0)]
        t: f64,
        /// Recorded intervals per window.
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0.001)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a predictor; writes metrics.csv and checkpoint.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        batch: usize,
    },
    /// Run an experiment and write report.csv.
    Study {
        /// impact_of_k, nc_vs_ncplus or consecutive.
        #[arg(long)]
        kind: StudyKind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "study")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen {
            n,
            count,
            t,
            k,
            dt,
            seed,
            out,
        } => {
            if count == 0 {
                bail!("--count must be positive");
            }
            let threads = worker_threads();
            log::info!("simulating {count} trajectories on {threads} workers");
            let samples = generate_dataset(count, seed, n, t, k, dt, threads)?;
            write_dataset(&samples, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::from_json_file(&config).with_context(|| format!("reading {}", config.display()))?;
            let outcome = train_to_dir(&cfg, &out)?;
            println!(
                "best epoch {}  valid mse {:.6e}  ({:.3} x1e-2)",
                outcome.best.epoch,
                outcome.best.valid_mse,
                outcome.best.valid_mse * 100.0
            );
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            batch,
        } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let model = ck.to_model()?;
            let samples = read_dataset(&data).with_context(|| format!("reading {}", data.display()))?;
            let report = evaluate(&model, &ck.rollout, &samples, batch)?;
            println!("samples {}", report.samples);
            println!("mse {:.6e}", report.mse);
            println!("mse_x1e-2 {:.4}", report.mse_e2());
            if let Some(nodes) = report.intermediate_velocity_mse {
                for (k, v) in nodes.iter().enumerate() {
                    println!("ivel_mse_k{k} {v:.6e}");
                }
            }
        }
        Command::Study { kind, config, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg: StudyConfig = serde_json::from_str(&text)?;
            cfg.train.validate()?;
            let data = TrainData::load(&cfg.train.data)?;
            std::fs::create_dir_all(&out)?;
            let report = run_study(kind, &cfg, &data)?;
            let path = out.join(REPORT_FILE);
            report.write(&path)?;
            println!("wrote {} rows to {}", report.rows.len(), path.display());
        }
    }
    Ok(())
}

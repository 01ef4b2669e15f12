use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bvib::harness::{
    evaluate_predictions, predict_dataset, read_predictions, report, run_experiment, write_eval_files, write_predictions,
    ExperimentConfig,
};
use bvib::inference::Predictor;
use bvib::model::{Checkpoint, Variant};
use bvib::shapegen::{build_dataset, Dataset};
use bvib::training::{train, train_naive_ensemble, TrainData};
use bvib::{Error, Result};

/// Bayesian VIB regression from 3D volumes to correspondence points.
///
/// Every `--config` is the experiment TOML; each command reads the sections
/// it needs and uses defaults when the file is omitted.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic supershapes dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant (naive ensembles train K members).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict test samples with uncertainty; several checkpoints form a naive ensemble.
    Predict {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score stored predictions: errors, outlier degrees, calibration.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-create plots of an experiment directory from its summary.
    Report {
        #[arg(long)]
        experiment: PathBuf,
    },
    /// Full experiment: generate, train, predict, evaluate, report.
    RunAll {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?.dataset.generation;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = build_dataset(&cfg, &out)?;
            println!("{} samples written to {}", m.samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            variant,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let variant: Variant = variant.parse()?;
            let ds = Dataset::load(&data)?;
            let td = TrainData::from_dataset(&ds)?;
            let mut tc = cfg.train.clone();
            if let Some(s) = seed {
                tc.seed = s;
            }
            let mc = cfg.model_for(&ds.manifest.config, variant);
            if variant.is_naive_ensemble() {
                let outs = train_naive_ensemble(&mc, &td, &tc, mc.ensemble_size, Some(&out))?;
                for (i, o) in outs.iter().enumerate() {
                    println!("member {i}: best val RMSE {:.6} at epoch {}", o.best_val_rmse(), o.checkpoint.epoch);
                }
            } else {
                let o = train(&mc, &td, &tc, Some(&out))?;
                println!("best val RMSE {:.6} at epoch {}", o.best_val_rmse(), o.checkpoint.epoch);
            }
        }
        Command::Predict {
            checkpoint,
            data,
            out,
            config,
            seed,
        } => {
            let cfg = load_config(config.as_deref())?;
            let cks = checkpoint.iter().map(|p| Checkpoint::read(p)).collect::<Result<Vec<_>>>()?;
            let member = cks[0].network.variant();
            let variant = match (cks.len(), member) {
                (1, v) => v,
                (_, Variant::Vib) => Variant::Ne,
                (_, Variant::Cd) => Variant::NeCd,
                (_, v) => return Err(Error::Config(format!("several checkpoints only pool VIB or CD members, got {v}"))),
            };
            let p = Predictor::from_checkpoints(variant, cks)?;
            let mut inf = cfg.inference;
            if let Some(s) = seed {
                inf.seed = s;
            }
            let ds = Dataset::load(&data)?;
            let records = predict_dataset(&p, &ds, &inf)?;
            write_predictions(&out, &records)?;
            println!("{} predictions ({variant}) written to {}", records.len(), out.display());
        }
        Command::Evaluate {
            data,
            predictions,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = Dataset::load(&data)?;
            let records = read_predictions(&predictions)?;
            let e = evaluate_predictions(&ds, &records, &cfg.eval)?;
            write_eval_files(&out, &e)?;
            let m = &e.metrics;
            println!(
                "RMSE {:.6}  surface distance {:.6}  r(error, total) {}",
                m.test_rmse,
                m.surface_distance,
                m.r_error_total.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Report { experiment } => {
            let b = report(&experiment)?;
            println!("{} plot files written under {}", b.plot_files.len(), b.dir.display());
        }
        Command::RunAll { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let b = run_experiment(&cfg)?;
            println!("{}", b.dir.join(bvib::harness::SUMMARY_FILE).display());
            if !b.summary.complete {
                eprintln!("warning: {} run(s) failed, see the summary", b.summary.failures.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

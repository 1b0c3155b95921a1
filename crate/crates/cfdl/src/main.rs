//! Thin CLI over the command layer. See `examples/` for programmatic use.

use cfdl::commands::{self, CmdError, Overrides};
use cfdl::synthdata::SynthConfig;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cfdl", about = "Multimodal disentanglement & expert-fusion training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config (synth/dataset, model, train, folds)
    #[arg(long)]
    config: PathBuf,
    /// Override the seed of both generator and trainer
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides out_dir in the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of cross-validation folds
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated enabled ablation switches: dis_ps,moe,ling
    #[arg(long)]
    flags: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file from a generator config
    GenData {
        /// JSON generator config
        #[arg(long)]
        config: PathBuf,
        /// Output dataset path
        #[arg(long)]
        out: PathBuf,
        /// Override the generator seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train with k-fold cross-validation and write run artifacts
    Train(RunArgs),
    /// Run the dis_ps × MoE × LinG ablation grid
    Ablate(RunArgs),
    /// Export per-sample gate weights (plus a mean row) from a checkpoint
    ExportGates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the pairwise feature cosine-similarity matrix and feature dump
    ExportSimilarity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and print metrics JSON
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Optional path for the metrics JSON (printed to stdout regardless)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(args: &RunArgs) -> Result<Overrides, CmdError> {
    Ok(Overrides {
        seed: args.seed,
        folds: args.folds,
        flags: args.flags.as_deref().map(commands::parse_flags).transpose()?,
        out: args.out.clone(),
    })
}

fn run() -> Result<(), CmdError> {
    match Cli::parse().command {
        Command::GenData { config, out, seed } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg: SynthConfig = serde_json::from_str(&text)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            println!("{}", commands::cmd_gen_data(&cfg, &out)?);
        }
        Command::Train(args) => {
            let run = commands::load_run_config(&args.config, &overrides(&args)?)?;
            let art = commands::cmd_train(&run)?;
            println!("wrote artifacts to {}", art.out_dir.display());
            println!("metric,mean,std");
            for (name, mean, std) in &art.aggregate {
                println!("{name},{mean},{std}");
            }
        }
        Command::Ablate(args) => {
            let run = commands::load_run_config(&args.config, &overrides(&args)?)?;
            let grid = commands::cmd_ablate(&run)?;
            if let Some(n) = &grid.notice {
                eprintln!("notice: {n}");
            }
            println!("dis_ps,moe,ling,ACC_mean,AUC_mean");
            for row in &grid.rows {
                let get = |name: &str| {
                    row.artifacts
                        .aggregate
                        .iter()
                        .find(|(n, _, _)| n == name)
                        .map_or(f64::NAN, |(_, m, _)| *m)
                };
                println!(
                    "{},{},{},{},{}",
                    u8::from(row.flags.dis_ps),
                    u8::from(row.flags.moe),
                    u8::from(row.flags.ling),
                    get("ACC"),
                    get("AUC"),
                );
            }
        }
        Command::ExportGates {
            checkpoint,
            dataset,
            out,
        } => {
            let mean = commands::cmd_export_gates(&checkpoint, &dataset, &out)?;
            println!("wrote {} (mean gate weights: {:?})", out.display(), mean);
        }
        Command::ExportSimilarity {
            checkpoint,
            dataset,
            out,
        } => {
            let (names, _) = commands::cmd_export_similarity(&checkpoint, &dataset, &out)?;
            println!(
                "wrote similarity.csv and features.csv ({} features) to {}",
                names.len(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => {
            let report = commands::cmd_eval(&checkpoint, &dataset)?;
            let json = serde_json::to_string_pretty(&report.to_json())
                .map_err(|e| CmdError::Other(e.to_string()))?;
            if let Some(path) = out {
                std::fs::write(&path, &json)?;
            }
            println!("{json}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

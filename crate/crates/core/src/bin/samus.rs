//! Command-line entry point: train, evaluate and tabulate runs.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use samus::train::{evaluate_checkpoint, train, write_reports};
use samus::{Ablation, HdVariant, PromptMode, Regime, RunConfig};

#[derive(Parser)]
#[command(name = "samus", version, about = "Ultrasound segmentation training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write best.ckpt and run.json.
    Train {
        /// Key-value run config (`key = value` per line).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated components to disable: cnn, cba, fadapt, padapt.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
        /// Train on generated synthetic data instead of the configured datasets.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        prompt: Option<PromptMode>,
        /// Start from this checkpoint (e.g. an adapted model for auto-prompt tuning).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print per-dataset Dice/HD as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "synthetic")]
        datasets: Vec<String>,
        #[arg(long, default_value = "manual")]
        prompt: PromptMode,
        #[arg(long, default_value = "data")]
        data_root: PathBuf,
        /// Report the 95th-percentile Hausdorff distance instead of the maximum.
        #[arg(long)]
        hd95: bool,
        #[arg(long, default_value_t = 8)]
        synthetic_count: usize,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collect `<runs>/*/run.json` into results.csv and ablation.csv.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            regime,
            seed,
            ablate,
            synthetic,
            prompt,
            init,
            out,
        } => {
            let mut run = match &config {
                Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
                None => RunConfig::default(),
            };
            if let Some(r) = regime {
                run.regime = r;
                if prompt.is_none() && config.is_none() && r.uses_apg() {
                    run.prompt_mode = PromptMode::Auto;
                }
            }
            if let Some(s) = seed {
                run.seed = s;
            }
            if !ablate.is_empty() {
                run.ablation = Ablation::with_disabled(ablate.iter().map(String::as_str))?;
            }
            if synthetic {
                run.datasets = vec!["synthetic".into()];
            }
            if let Some(p) = prompt {
                run.prompt_mode = p;
            }
            if init.is_some() {
                run.init_checkpoint = init;
            }
            std::fs::create_dir_all(&out)?;
            let record = train(&run, Some(&out))?;
            print!("{}", record.final_report.to_csv_string()?);
            eprintln!(
                "{} steps in {:.1}s, best train dice {:.2}, outputs in {}",
                record.steps,
                record.wall_clock_secs,
                record.best_train_dice(),
                out.display()
            );
        }
        Command::Eval {
            checkpoint,
            datasets,
            prompt,
            data_root,
            hd95,
            synthetic_count,
            out,
        } => {
            let variant = if hd95 { HdVariant::P95 } else { HdVariant::Max };
            let report = evaluate_checkpoint(&checkpoint, &datasets, &data_root, prompt, variant, synthetic_count)?;
            let csv = report.to_csv_string()?;
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Report { runs } => {
            for path in write_reports(&runs)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

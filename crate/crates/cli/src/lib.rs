//! Command-line front-end for the `musu` experiments.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::commands::AssignSource;
use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(
    name = "musu",
    version,
    about = "Mutual-supervision label assignment experiments"
)]
pub struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.assign.alpha=1/6` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory (`output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Sets `scenes.seed`, `train.seed` and `layout.shape_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded scene set to `scenes.json`.
    GenerateScenes,
    /// Train one table per scene; writes `checkpoint.json` and `train_log.csv`.
    Train {
        /// Existing scene file; generated from the config otherwise.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes `eval_report.json`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Also write `pr_curves.csv`.
        #[arg(long)]
        pr_curves: bool,
    },
    /// Dump per-anchor assignment records for a fixture or a trained scene.
    AssignDebug {
        /// JSON fixture with `num_categories`, `probs`, `boxes`, `centers`, `objects`.
        #[arg(long, conflicts_with_all = ["checkpoint", "scenes", "scene"])]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Train and evaluate a grid of assignment settings; writes `sweep_results.csv`.
    Sweep {
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = ExperimentConfig::resolve(
        cli.config.as_deref(),
        &cli.overrides,
        cli.seed,
        cli.out.as_deref(),
    )?;
    match cli.command {
        Command::GenerateScenes => {
            let path = commands::generate(&config)?;
            println!("wrote {}", path.display());
        }
        Command::Train { scenes } => {
            let outcome = commands::train(&config, scenes.as_deref())?;
            if let Some(last) = outcome.log.steps.last() {
                println!("step {} l_total {:.6}", last.step, last.breakdown.l_total);
            }
            if let Some(m) = outcome.log.consistency.last() {
                println!("agreement {:.4}", m.metrics.agreement_rate);
            }
        }
        Command::Eval {
            checkpoint,
            scenes,
            pr_curves,
        } => {
            config.output.pr_curves |= pr_curves;
            let r = commands::eval(&config, checkpoint.as_deref(), scenes.as_deref())?;
            println!(
                "ap50 {:.4} ap75 {:.4} ap {:.4} agreement {:.4}",
                r.ap50, r.ap75, r.ap_coco, r.consistency.agreement_rate
            );
        }
        Command::AssignDebug {
            snapshot,
            checkpoint,
            scenes,
            scene,
        } => {
            let source = match &snapshot {
                Some(p) => AssignSource::Fixture(p),
                None => AssignSource::Trained {
                    checkpoint: checkpoint.as_deref(),
                    scenes: scenes.as_deref(),
                    scene,
                },
            };
            let dump = commands::assign_debug(&config, source)?;
            println!(
                "{} bag members across {} objects",
                dump.records.len(),
                dump.objects.len()
            );
        }
        Command::Sweep { scenes } => {
            let rows = commands::sweep(&config, scenes.as_deref())?;
            println!(
                "{} cells written to {}",
                rows.len(),
                config
                    .output
                    .dir
                    .join(commands::SWEEP_RESULTS_FILE)
                    .display()
            );
        }
    }
    Ok(())
}

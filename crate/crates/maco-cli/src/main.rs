//! Front door for training, evaluating and preparing MACO runs.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use maco::io::{run_eval, run_splits, run_synth, run_train, RunConfig, Variant};

#[derive(Parser)]
#[command(name = "maco", version, about = "Few-shot image classification with metric-agnostic conditioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config file.
    Train {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Model variant: `maco` or `no-cond`.
        #[arg(long)]
        variant: Option<String>,
        /// Overrides the global seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on its held-out test classes at 1-shot and 5-shot.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test episodes per shot count.
        #[arg(long)]
        episodes: usize,
        /// Fixes the evaluation episode stream.
        #[arg(long)]
        seed: u64,
        /// Where to write the result row as CSV (defaults next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition class directories into train/val/test and write a manifest.
    Splits {
        /// Directory containing one subdirectory per class.
        #[arg(long)]
        classes: PathBuf,
        /// Comma-separated class counts, e.g. `20,5,5`.
        #[arg(long)]
        counts: String,
        #[arg(long)]
        seed: u64,
        /// Manifest path to write (`class_id,split` lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the synthetic dataset to disk as PNG files.
    Synth {
        /// Number of classes to generate.
        #[arg(long)]
        classes: usize,
        /// Images per class.
        #[arg(long)]
        per_class: usize,
        /// Output directory (one subdirectory per class).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 84)]
        image_size: usize,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

fn parse_counts(text: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        bail!("--counts expects three comma-separated numbers, got {text:?}");
    }
    let parse = |s: &str| s.trim().parse::<usize>().with_context(|| format!("bad count {s:?}"));
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, variant, seed } => {
            let mut run_config = RunConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            if let Some(v) = variant {
                run_config.variant = Variant::parse(&v)?;
            }
            if let Some(s) = seed {
                run_config.global_seed = s;
            }
            let artifacts = run_train(&run_config).context("training run failed")?;
            println!(
                "best epoch {} at validation accuracy {:.4}",
                artifacts.best_epoch, artifacts.best_val_accuracy
            );
            println!("checkpoint: {}", artifacts.checkpoint.display());
            println!("metrics:    {}", artifacts.metrics.display());
            println!("config:     {}", artifacts.config.display());
        }
        Command::Eval { checkpoint, episodes, seed, out } => {
            let out = out.unwrap_or_else(|| checkpoint.with_extension("eval.csv"));
            run_eval(&checkpoint, episodes, seed, Some(&out))
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("written: {}", out.display());
        }
        Command::Splits { classes, counts, seed, out } => {
            let counts = parse_counts(&counts)?;
            let splits = run_splits(&classes, counts, seed, &out)
                .with_context(|| format!("splitting {}", classes.display()))?;
            println!(
                "wrote {} ({} train / {} val / {} test classes)",
                out.display(),
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            );
        }
        Command::Synth { classes, per_class, out, image_size, seed } => {
            let written = run_synth(classes, per_class, image_size, seed, &out)
                .context("synthetic dataset generation failed")?;
            println!("wrote {written} images under {}", out.display());
        }
    }
    Ok(())
}

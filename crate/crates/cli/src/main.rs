//! `lfma` — command-line entry point for the self-distillation toolkit.
//!
//! Subcommands: `train`, `evaluate`, `compare`, `report attention`,
//! `report embeddings`. Any configuration key can be overridden with a
//! dotted flag, e.g. `--loss.temperature=5`; flags beat the file.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use clap::{Parser, Subcommand};
use lfma_core::config::{load_run_config, RunConfig};
use lfma_core::data::{channel_stats, eval_batch, load_dataset, Split};
use lfma_core::eval::{evaluate, export_attention_maps, export_embeddings, EmbeddingOutcome};
use lfma_core::runner::{run_compare, run_train};
use lfma_core::train::{load_model_checkpoint, EpochMetrics};
use lfma_core::{LfmaError, Result};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

const LAYOUT_HELP: &str = "\
Run directory layout:
  config.toml    resolved configuration; feeding it back reproduces the run
  metrics.csv    per-epoch losses and accuracies
  last.ckpt      model after the most recent epoch
  best.ckpt      model with the best validation accuracy
  compare/       one subdirectory per (mode, seed) cell, each with the
                 layout above plus result.json; comparison.txt and
                 comparison.csv summarize all cells

Overrides:
  any config key works as a dotted flag, e.g. --train.epochs=40
  --loss.temperature=5 --dataset.root_path=/data --seeds=[0,1,2]

Environment:
  LFMA_DATA_ROOT   default dataset root when the config sets none";

#[derive(Parser)]
#[command(
    name = "lfma",
    version,
    about = "Self-distillation training toolkit: auxiliary heads teach the backbone",
    after_help = LAYOUT_HELP
)]
struct Cli {
    /// TOML run configuration; omit to use the documented defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model with the configured mode and seed.
    Train,
    /// Evaluate a checkpoint on a dataset split.
    Evaluate {
        /// Checkpoint file, e.g. runs/best.ckpt.
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Dataset split: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train baseline, dsn, and lfma for every seed and tabulate accuracy.
    Compare,
    /// Export diagnostics from a trained checkpoint.
    #[command(subcommand)]
    Report(Report),
}

#[derive(Subcommand)]
enum Report {
    /// Per-block attention heatmaps (PNG + CSV) for evaluation images.
    Attention {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Number of images to visualize.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Output directory [default: <output_dir>/attention].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Per-block 2-D embeddings of pooled features via the reducer command.
    Embeddings {
        #[arg(long, value_name = "PATH")]
        ckpt: PathBuf,
        /// Number of evaluation images to embed.
        #[arg(long, default_value_t = 512)]
        count: usize,
        /// Output CSV [default: <output_dir>/embeddings.csv].
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
}

/// Top-level configuration keys that work as flags without a dot.
const TOP_LEVEL_KEYS: [&str; 5] = ["arch", "mode", "seeds", "output_dir", "reducer"];

/// Pull config overrides — `--key.path=value`, `--key.path value`, or the
/// same with a bare top-level key — out of the raw arguments so clap only
/// sees its own flags.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if let Some(body) = arg.strip_prefix("--") {
            let key = body.split('=').next().unwrap_or("");
            if key.contains('.') || TOP_LEVEL_KEYS.contains(&key) {
                if body.contains('=') {
                    overrides.push(body.to_string());
                } else if let Some(value) = it.next() {
                    overrides.push(format!("{body}={value}"));
                } else {
                    // Let the config layer report the malformed override.
                    overrides.push(body.to_string());
                }
                continue;
            }
        }
        plain.push(arg);
    }
    (plain, overrides)
}

fn epoch_line(label: &str, total_epochs: usize, m: &EpochMetrics) {
    println!(
        "[{label}] epoch {:>3}/{} lr {:.4} loss {:.4} train {:.4} val {:.4} ({:.1}s)",
        m.epoch, total_epochs, m.lr, m.total, m.train_acc, m.val_acc, m.seconds
    );
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let epochs = cfg.train.epochs;
    let progress = move |label: &str, m: &EpochMetrics| epoch_line(label, epochs, m);
    let artifacts = run_train(cfg, Some(&progress))?;
    println!(
        "best val accuracy {:.4} at epoch {}; artifacts in {}",
        artifacts.outcome.best_val_acc,
        artifacts.outcome.best_epoch,
        artifacts.run_dir.display()
    );
    Ok(())
}

fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    let epochs = cfg.train.epochs;
    let progress = move |label: &str, m: &EpochMetrics| epoch_line(label, epochs, m);
    let (table, dir) = run_compare(cfg, Some(&progress))?;
    print!("{}", table.render_text());
    println!("written: {}", dir.join("comparison.{txt,csv}").display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, ckpt: &PathBuf, split: &str) -> Result<()> {
    let split = Split::from_str(split)?;
    let (backbone, _heads, _meta) = load_model_checkpoint::<f32>(ckpt)?;
    let mut spec = cfg.dataset.with_split(split);
    if split != Split::Train {
        spec.subset_size = None;
    }
    let ds = load_dataset(&spec, cfg.train.seed)?;
    if backbone.topology().num_classes != ds.num_classes {
        return Err(LfmaError::Config(format!(
            "checkpoint predicts {} classes but dataset '{}' has {}",
            backbone.topology().num_classes,
            ds.name,
            ds.num_classes
        )));
    }
    let stats = channel_stats(&cfg.dataset.with_split(Split::Train))?;
    let acc = evaluate(&backbone, &ds, &stats, cfg.train.batch_size)?;
    println!(
        "{}: accuracy {:.4} ({:.2}%) on {} {} ({} images)",
        ckpt.display(),
        acc,
        acc * 100.0,
        ds.name,
        ds.split,
        ds.len()
    );
    Ok(())
}

/// Load the checkpoint plus a normalized batch of the first `count`
/// evaluation images.
fn report_inputs(
    cfg: &RunConfig,
    ckpt: &PathBuf,
    count: usize,
) -> Result<(lfma_core::backbone::Backbone<f32>, ndarray::Array4<f32>, Vec<usize>)> {
    let (backbone, _heads, _meta) = load_model_checkpoint::<f32>(ckpt)?;
    let mut spec = cfg.dataset.with_split(Split::Val);
    spec.subset_size = None;
    let ds = load_dataset(&spec, cfg.train.seed)?;
    let stats = channel_stats(&cfg.dataset.with_split(Split::Train))?;
    if count == 0 {
        return Err(LfmaError::Argument("--count must be positive".into()));
    }
    let idxs: Vec<usize> = (0..count.min(ds.len())).collect();
    let (x, labels) = eval_batch::<f32>(&ds, &stats, &idxs)?;
    Ok((backbone, x, labels))
}

fn cmd_report(cfg: &RunConfig, report: &Report) -> Result<()> {
    match report {
        Report::Attention { ckpt, count, out } => {
            let (backbone, x, _labels) = report_inputs(cfg, ckpt, *count)?;
            let dir = out.clone().unwrap_or_else(|| cfg.output_dir.join("attention"));
            let files = export_attention_maps(&backbone, &x, &dir)?;
            println!("wrote {} attention files to {}", files.len(), dir.display());
        }
        Report::Embeddings { ckpt, count, out } => {
            let (backbone, x, labels) = report_inputs(cfg, ckpt, *count)?;
            let path = out
                .clone()
                .unwrap_or_else(|| cfg.output_dir.join("embeddings.csv"));
            match export_embeddings(&backbone, &x, &labels, &cfg.reducer, &path)? {
                EmbeddingOutcome::Written { path, rows } => {
                    println!("wrote {rows} embedding rows to {}", path.display());
                }
                EmbeddingOutcome::Skipped { reason } => {
                    println!("embeddings skipped: {reason}");
                }
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli, overrides: &[String]) -> Result<()> {
    let cfg = load_run_config(cli.config.as_deref(), overrides)?;
    match &cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Compare => cmd_compare(&cfg),
        Command::Evaluate { ckpt, split } => cmd_evaluate(&cfg, ckpt, split),
        Command::Report(report) => cmd_report(&cfg, report),
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(&cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn override_flags_are_extracted_in_both_forms() {
        let (plain, ov) = split_overrides(strings(&[
            "lfma",
            "train",
            "--config",
            "run.toml",
            "--loss.temperature=5",
            "--train.epochs",
            "12",
            "--seeds=[0,1]",
            "--mode",
            "dsn",
        ]));
        assert_eq!(plain, strings(&["lfma", "train", "--config", "run.toml"]));
        assert_eq!(
            ov,
            strings(&[
                "loss.temperature=5",
                "train.epochs=12",
                "seeds=[0,1]",
                "mode=dsn"
            ])
        );
    }

    #[test]
    fn non_dotted_flags_pass_through_untouched() {
        let args = strings(&["lfma", "evaluate", "--ckpt", "best.ckpt", "--split=val"]);
        let (plain, ov) = split_overrides(args.clone());
        assert_eq!(plain, args);
        assert!(ov.is_empty());
    }

    #[test]
    fn cli_parses_every_subcommand() {
        for argv in [
            vec!["lfma", "train"],
            vec!["lfma", "compare", "--config", "c.toml"],
            vec!["lfma", "evaluate", "--ckpt", "best.ckpt"],
            vec!["lfma", "report", "attention", "--ckpt", "b.ckpt", "--count", "2"],
            vec!["lfma", "report", "embeddings", "--ckpt", "b.ckpt", "--out", "e.csv"],
        ] {
            Cli::try_parse_from(argv).unwrap();
        }
    }
}

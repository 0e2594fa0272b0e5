//! Run orchestration: turns a resolved [`RunConfig`] into models, datasets,
//! and completed training runs, including the resumable multi-seed
//! baseline / dsn / lfma comparison.

use crate::backbone::{build_backbone, Backbone};
use crate::config::{LossSettings, RunConfig};
use crate::cutout::CutoutConfig;
use crate::data::{channel_stats, load_dataset, ChannelStats, Dataset, Split};
use crate::error::{LfmaError, Result};
use crate::eval::{ComparisonEntry, ComparisonTable};
use crate::heads::{build_heads, AuxHead, HeadTemplate};
use crate::train::{train, EpochMetrics, Mode, TrainOutcome, TrainPlan};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// The ablation arms of a comparison, in fixed execution order.
pub const COMPARE_MODES: [Mode; 3] = [Mode::Baseline, Mode::Dsn, Mode::Lfma];

/// Progress hook: `(run label, metrics for the finished epoch)`.
pub type Progress<'a> = Option<&'a (dyn Fn(&str, &EpochMetrics) + Sync)>;

/// Build the backbone plus auxiliary heads for one run. Baseline carries no
/// heads — it is the plain network.
pub fn build_model(
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
) -> Result<(Backbone<f32>, Vec<AuxHead<f32>>)> {
    let shape = (3, cfg.dataset.image_size, cfg.dataset.image_size);
    let backbone = build_backbone::<f32>(&cfg.arch, cfg.dataset.num_classes, shape, seed)?;
    let heads = match mode {
        Mode::Baseline => Vec::new(),
        _ => build_heads::<f32>(&backbone.topology(), &HeadTemplate::default(), seed)?,
    };
    Ok((backbone, heads))
}

/// Load the train and evaluation splits plus normalization statistics.
/// The subset (when any) applies to training only; evaluation always runs
/// on the full held-out split.
pub fn load_train_val(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset, ChannelStats)> {
    let train_spec = cfg.dataset.with_split(Split::Train);
    let mut val_spec = cfg.dataset.with_split(Split::Val);
    val_spec.subset_size = None;
    let train_ds = load_dataset(&train_spec, seed)?;
    let val_ds = load_dataset(&val_spec, seed)?;
    let stats = channel_stats(&train_spec)?;
    Ok((train_ds, val_ds, stats))
}

/// Loss settings a given mode actually optimizes: unused terms forced to
/// zero so logs and resolved configs never claim otherwise.
pub fn loss_for_mode(base: &LossSettings, mode: Mode) -> LossSettings {
    let mut s = base.clone();
    match mode {
        Mode::Baseline => {
            s.alpha = 0.0;
            s.beta = 0.0;
            s.delta = 0.0;
        }
        Mode::Dsn => {
            s.alpha = 0.0;
            s.beta = 0.0;
        }
        Mode::Lfma => {}
    }
    s
}

/// Cutout for a given mode: only lfma augments feature maps.
pub fn cutout_for_mode(base: &CutoutConfig, mode: Mode) -> CutoutConfig {
    let mut c = base.clone();
    if mode != Mode::Lfma {
        c.enabled = false;
    }
    c
}

/// Outcome of a single orchestrated run.
pub struct RunArtifacts {
    pub outcome: TrainOutcome,
    pub run_dir: PathBuf,
}

/// Train one model per the config (mode and seed from `cfg.train`), writing
/// the resolved config, metrics, and checkpoints into `cfg.output_dir`.
pub fn run_train(cfg: &RunConfig, progress: Progress<'_>) -> Result<RunArtifacts> {
    let run_dir = cfg.output_dir.clone();
    cfg.write_into(&run_dir)?;
    let outcome = train_one(cfg, cfg.train.mode, cfg.train.seed, &run_dir, progress)?;
    Ok(RunArtifacts { outcome, run_dir })
}

fn train_one(
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
    out_dir: &Path,
    progress: Progress<'_>,
) -> Result<TrainOutcome> {
    let (train_ds, val_ds, stats) = load_train_val(cfg, seed)?;
    train_one_with_data(cfg, mode, seed, out_dir, &train_ds, &val_ds, &stats, progress)
}

#[allow(clippy::too_many_arguments)]
fn train_one_with_data(
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
    out_dir: &Path,
    train_ds: &Dataset,
    val_ds: &Dataset,
    stats: &ChannelStats,
    progress: Progress<'_>,
) -> Result<TrainOutcome> {
    let (mut backbone, mut heads) = build_model(cfg, mode, seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.mode = mode;
    train_cfg.seed = seed;
    let weights = loss_for_mode(&cfg.loss, mode).to_weights::<f32>();
    let cutout = cutout_for_mode(&cfg.cutout, mode);
    let label = format!("{mode}-seed{seed}");
    let hook = progress.map(|p| move |m: &EpochMetrics| p(&label, m));
    let plan = TrainPlan {
        train_ds,
        val_ds,
        stats,
        config: &train_cfg,
        cutout: &cutout,
        out_dir: Some(out_dir),
        head_template: HeadTemplate::default(),
        on_epoch: hook.as_ref().map(|h| h as &(dyn Fn(&EpochMetrics) + Sync)),
    };
    train(&mut backbone, &mut heads, &weights, &plan)
}

/// Completion record for one comparison cell; its presence marks the cell
/// as done, making `run_compare` resumable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: Mode,
    pub arch: String,
    pub dataset: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

fn cell_error(cell: &str, e: LfmaError) -> LfmaError {
    LfmaError::Cell {
        cell: cell.to_string(),
        source: Box::new(e),
    }
}

fn read_cell_result(path: &Path, cell: &str) -> Result<CellResult> {
    let text = std::fs::read_to_string(path).map_err(|e| LfmaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        cell_error(
            cell,
            LfmaError::Config(format!(
                "unreadable completion record {}: {e}; delete the cell \
                 directory to retrain",
                path.display()
            )),
        )
    })
}

fn write_cell_result(path: &Path, result: &CellResult) -> Result<()> {
    let text = serde_json::to_string_pretty(result)
        .map_err(|e| LfmaError::Config(format!("serializing cell result: {e}")))?;
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, text).map_err(|e| LfmaError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| LfmaError::io(path, e))?;
    Ok(())
}

/// Train every (mode, seed) cell of the comparison, reusing cells that
/// already carry a completion record. Returns the accuracy table and the
/// comparison directory; `comparison.txt` / `comparison.csv` land there.
pub fn run_compare(cfg: &RunConfig, progress: Progress<'_>) -> Result<(ComparisonTable, PathBuf)> {
    let compare_dir = cfg.output_dir.join("compare");
    std::fs::create_dir_all(&compare_dir).map_err(|e| LfmaError::io(&compare_dir, e))?;
    cfg.write_into(&cfg.output_dir)?;

    let mut table = ComparisonTable::new();
    for &seed in &cfg.seeds {
        // The three arms of one seed share the same subset draw; load once.
        let mut data: Option<(Dataset, Dataset, ChannelStats)> = None;
        for mode in COMPARE_MODES {
            let cell = format!("{mode}-seed{seed}");
            let cell_dir = compare_dir.join(&cell);
            let result_path = cell_dir.join("result.json");

            let result = if result_path.is_file() {
                let found = read_cell_result(&result_path, &cell)?;
                let expected = (mode, cfg.arch.as_str(), cfg.dataset.name.as_str(), seed);
                let got = (found.mode, found.arch.as_str(), found.dataset.as_str(), found.seed);
                if got != expected || found.epochs != cfg.train.epochs {
                    return Err(cell_error(
                        &cell,
                        LfmaError::Config(format!(
                            "existing result {found:?} does not match the current \
                             config; delete {} to retrain",
                            cell_dir.display()
                        )),
                    ));
                }
                found
            } else {
                if data.is_none() {
                    data = Some(load_train_val(cfg, seed).map_err(|e| cell_error(&cell, e))?);
                }
                let (train_ds, val_ds, stats) = data.as_ref().unwrap();
                let outcome = train_one_with_data(
                    cfg, mode, seed, &cell_dir, train_ds, val_ds, stats, progress,
                )
                .map_err(|e| cell_error(&cell, e))?;
                let result = CellResult {
                    mode,
                    arch: cfg.arch.clone(),
                    dataset: cfg.dataset.name.clone(),
                    seed,
                    epochs: cfg.train.epochs,
                    best_epoch: outcome.best_epoch,
                    best_val_acc: outcome.best_val_acc,
                };
                write_cell_result(&result_path, &result).map_err(|e| cell_error(&cell, e))?;
                result
            };

            table.add(ComparisonEntry {
                mode: mode.to_string(),
                arch: cfg.arch.clone(),
                dataset: cfg.dataset.name.clone(),
                seed,
                accuracy: result.best_val_acc,
            });
        }
    }
    table.write_files(&compare_dir)?;
    Ok((table, compare_dir))
}

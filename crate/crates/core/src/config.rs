//! Run configuration: a strict TOML layer with documented defaults,
//! dotted-path command-line overrides, cross-field validation, and a
//! lossless resolved form that round-trips through a file.
//!
//! Precedence: command-line overrides beat the file; the `LFMA_DATA_ROOT`
//! environment variable supplies the data root when neither sets one.

use crate::backbone::ARCHITECTURES;
use crate::cutout::CutoutConfig;
use crate::data::DatasetSpec;
use crate::error::{LfmaError, Result};
use crate::losses::LossWeights;
use crate::nn::{fromf, Scalar};
use crate::train::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Environment variable consulted for the dataset root when the config
/// does not set one.
pub const DATA_ROOT_ENV: &str = "LFMA_DATA_ROOT";

/// Default reducer command for embedding exports.
pub const DEFAULT_REDUCER: &str = "python3 tools/reduce2d.py";

// ---------------------------------------------------------------------------
// Raw layer: every field optional, unknown keys rejected.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawRunConfig {
    pub dataset: RawDataset,
    pub arch: Option<String>,
    pub mode: Option<String>,
    pub train: RawTrain,
    pub loss: RawLoss,
    pub cutout: RawCutout,
    pub output_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub reducer: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawDataset {
    pub name: Option<String>,
    pub root_path: Option<PathBuf>,
    pub subset_size: Option<usize>,
    pub num_classes: Option<usize>,
    pub image_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawTrain {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_drop_epochs: Option<Vec<usize>>,
    pub lr_drop_factor: Option<f64>,
    pub seed: Option<u64>,
    pub decay_norm_params: Option<bool>,
    pub grad_clip: Option<f64>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawLoss {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub delta: Option<f64>,
    pub temperature: Option<f64>,
    pub t_squared: Option<bool>,
    pub ensemble_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawCutout {
    pub enabled: Option<bool>,
    pub erase_fraction: Option<f64>,
    pub block_policy: Option<Vec<usize>>,
    pub per_sample: Option<bool>,
}

// ---------------------------------------------------------------------------
// Resolved layer
// ---------------------------------------------------------------------------

/// Loss hyperparameters in plain `f64`, convertible to the generic
/// [`LossWeights`] used by the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub temperature: f64,
    pub t_squared: bool,
    pub ensemble_weights: Option<Vec<f64>>,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            temperature: 3.0,
            t_squared: true,
            ensemble_weights: None,
        }
    }
}

impl LossSettings {
    pub fn to_weights<F: Scalar>(&self) -> LossWeights<F> {
        LossWeights {
            alpha: fromf(self.alpha),
            beta: fromf(self.beta),
            gamma: fromf(self.gamma),
            delta: fromf(self.delta),
            temperature: fromf(self.temperature),
            ensemble_weights: self
                .ensemble_weights
                .as_ref()
                .map(|w| w.iter().map(|&v| fromf(v)).collect()),
            t_squared: self.t_squared,
        }
    }
}

/// A fully-resolved run description. Every knob has a concrete value, so
/// writing it back out reproduces the run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Canonical dataset description; callers pick splits via `with_split`.
    pub dataset: DatasetSpec,
    pub arch: String,
    pub train: TrainConfig,
    pub loss: LossSettings,
    pub cutout: CutoutConfig,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub reducer: String,
}

fn default_classes_for(name: &str) -> Option<usize> {
    match name {
        "cifar10" | "cifar-10" => Some(10),
        "cifar100" | "cifar-100" => Some(100),
        "synthetic" => Some(10),
        _ => None,
    }
}

impl RawRunConfig {
    /// Validate cross-field constraints and fill every default.
    pub fn resolve(self) -> Result<RunConfig> {
        let mode = match &self.mode {
            Some(s) => Mode::from_str(s)?,
            None => Mode::Lfma,
        };

        // Baseline trains with plain cross-entropy: explicitly configuring
        // the distillation terms would silently lie about the objective.
        if mode == Mode::Baseline {
            for (name, value) in [
                ("loss.alpha", self.loss.alpha),
                ("loss.beta", self.loss.beta),
                ("loss.delta", self.loss.delta),
            ] {
                if let Some(v) = value {
                    if v != 0.0 {
                        return Err(LfmaError::Config(format!(
                            "{name} = {v} has no effect in baseline mode; \
                             remove it or set it to 0"
                        )));
                    }
                }
            }
        }
        // Deep supervision has no distillation terms either.
        if mode == Mode::Dsn {
            for (name, value) in [("loss.alpha", self.loss.alpha), ("loss.beta", self.loss.beta)]
            {
                if let Some(v) = value {
                    if v != 0.0 {
                        return Err(LfmaError::Config(format!(
                            "{name} = {v} has no effect in dsn mode; \
                             remove it or set it to 0"
                        )));
                    }
                }
            }
        }
        if self.cutout.enabled == Some(true) && mode != Mode::Lfma {
            return Err(LfmaError::Config(format!(
                "cutout.enabled = true requires mode = \"lfma\", got \"{mode}\""
            )));
        }

        let arch = self.arch.unwrap_or_else(|| "resnet8".to_string());
        if !ARCHITECTURES.contains(&arch.as_str()) {
            return Err(LfmaError::Config(format!(
                "unknown architecture '{arch}'; registered: {}",
                ARCHITECTURES.join(", ")
            )));
        }

        let name = self.dataset.name.unwrap_or_else(|| "cifar10".to_string());
        let num_classes = match self.dataset.num_classes.or(default_classes_for(&name)) {
            Some(c) if c >= 2 => c,
            Some(c) => {
                return Err(LfmaError::Config(format!(
                    "dataset.num_classes must be at least 2, got {c}"
                )))
            }
            None => {
                return Err(LfmaError::Config(format!(
                    "dataset.num_classes is required for dataset '{name}'"
                )))
            }
        };
        if let Some(0) = self.dataset.subset_size {
            return Err(LfmaError::Config(
                "dataset.subset_size must be positive when set".into(),
            ));
        }
        let image_size = match self.dataset.image_size {
            Some(s) if s >= 8 => s,
            Some(s) => {
                return Err(LfmaError::Config(format!(
                    "dataset.image_size must be at least 8, got {s}"
                )))
            }
            None => 32,
        };
        let root_path = match self.dataset.root_path {
            Some(p) => p,
            None => std::env::var_os(DATA_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("./data")),
        };
        let dataset = DatasetSpec {
            name,
            root_path,
            split: crate::data::Split::Train,
            subset_size: self.dataset.subset_size,
            num_classes,
            image_size,
        };

        let base = TrainConfig::default();
        let train = TrainConfig {
            epochs: self.train.epochs.unwrap_or(base.epochs),
            batch_size: self.train.batch_size.unwrap_or(base.batch_size),
            lr: self.train.lr.unwrap_or(base.lr),
            momentum: self.train.momentum.unwrap_or(base.momentum),
            weight_decay: self.train.weight_decay.unwrap_or(base.weight_decay),
            lr_drop_epochs: self.train.lr_drop_epochs.unwrap_or(base.lr_drop_epochs),
            lr_drop_factor: self.train.lr_drop_factor.unwrap_or(base.lr_drop_factor),
            mode,
            seed: self.train.seed.unwrap_or(0),
            decay_norm_params: self.train.decay_norm_params.unwrap_or(true),
            grad_clip: self.train.grad_clip,
            workers: self.train.workers.unwrap_or(0),
        };
        train.validate()?;

        let loss_defaults = LossSettings::default();
        let zero_kd = mode != Mode::Lfma;
        let loss = LossSettings {
            // In non-distillation modes the unused terms resolve to zero so
            // the resolved file states what actually ran.
            alpha: self.loss.alpha.unwrap_or(if zero_kd { 0.0 } else { loss_defaults.alpha }),
            beta: self.loss.beta.unwrap_or(if zero_kd { 0.0 } else { loss_defaults.beta }),
            gamma: self.loss.gamma.unwrap_or(loss_defaults.gamma),
            delta: self
                .loss
                .delta
                .unwrap_or(if mode == Mode::Baseline { 0.0 } else { loss_defaults.delta }),
            temperature: self.loss.temperature.unwrap_or(loss_defaults.temperature),
            t_squared: self.loss.t_squared.unwrap_or(loss_defaults.t_squared),
            ensemble_weights: self.loss.ensemble_weights,
        };
        for (name, v) in [
            ("loss.alpha", loss.alpha),
            ("loss.beta", loss.beta),
            ("loss.gamma", loss.gamma),
            ("loss.delta", loss.delta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LfmaError::Config(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        if !(loss.temperature > 0.0 && loss.temperature.is_finite()) {
            return Err(LfmaError::Config(format!(
                "loss.temperature must be positive, got {}",
                loss.temperature
            )));
        }

        let cutout = CutoutConfig {
            enabled: self.cutout.enabled.unwrap_or(mode == Mode::Lfma),
            erase_fraction: self.cutout.erase_fraction.unwrap_or(0.25),
            block_policy: self.cutout.block_policy,
            per_sample: self.cutout.per_sample.unwrap_or(true),
        };
        if !(0.0..1.0).contains(&cutout.erase_fraction) {
            return Err(LfmaError::Config(format!(
                "cutout.erase_fraction must lie in [0, 1), got {}",
                cutout.erase_fraction
            )));
        }

        let seeds = self.seeds.unwrap_or_else(|| vec![0, 1, 2]);
        if seeds.is_empty() {
            return Err(LfmaError::Config("seeds must not be empty".into()));
        }
        let mut dedup = seeds.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != seeds.len() {
            return Err(LfmaError::Config(format!("seeds contain duplicates: {seeds:?}")));
        }

        Ok(RunConfig {
            dataset,
            arch,
            train,
            loss,
            cutout,
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
            seeds,
            reducer: self.reducer.unwrap_or_else(|| DEFAULT_REDUCER.to_string()),
        })
    }
}

impl RunConfig {
    /// Raw form with every field explicitly populated; serializing it and
    /// loading the result reproduces this config bit for bit.
    pub fn to_raw(&self) -> RawRunConfig {
        RawRunConfig {
            dataset: RawDataset {
                name: Some(self.dataset.name.clone()),
                root_path: Some(self.dataset.root_path.clone()),
                subset_size: self.dataset.subset_size,
                num_classes: Some(self.dataset.num_classes),
                image_size: Some(self.dataset.image_size),
            },
            arch: Some(self.arch.clone()),
            mode: Some(self.train.mode.to_string()),
            train: RawTrain {
                epochs: Some(self.train.epochs),
                batch_size: Some(self.train.batch_size),
                lr: Some(self.train.lr),
                momentum: Some(self.train.momentum),
                weight_decay: Some(self.train.weight_decay),
                lr_drop_epochs: Some(self.train.lr_drop_epochs.clone()),
                lr_drop_factor: Some(self.train.lr_drop_factor),
                seed: Some(self.train.seed),
                decay_norm_params: Some(self.train.decay_norm_params),
                grad_clip: self.train.grad_clip,
                workers: Some(self.train.workers),
            },
            loss: RawLoss {
                alpha: Some(self.loss.alpha),
                beta: Some(self.loss.beta),
                gamma: Some(self.loss.gamma),
                delta: Some(self.loss.delta),
                temperature: Some(self.loss.temperature),
                t_squared: Some(self.loss.t_squared),
                ensemble_weights: self.loss.ensemble_weights.clone(),
            },
            cutout: RawCutout {
                enabled: Some(self.cutout.enabled),
                erase_fraction: Some(self.cutout.erase_fraction),
                block_policy: self.cutout.block_policy.clone(),
                per_sample: Some(self.cutout.per_sample),
            },
            output_dir: Some(self.output_dir.clone()),
            seeds: Some(self.seeds.clone()),
            reducer: Some(self.reducer.clone()),
        }
    }

    /// Write the resolved configuration into a directory as `config.toml`.
    pub fn write_into(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| LfmaError::io(dir, e))?;
        let path = dir.join("config.toml");
        let text = toml::to_string_pretty(&self.to_raw())
            .map_err(|e| LfmaError::Config(format!("serializing config: {e}")))?;
        std::fs::write(&path, text).map_err(|e| LfmaError::io(&path, e))?;
        Ok(path)
    }
}

// ---------------------------------------------------------------------------
// Loading: file + dotted-path overrides
// ---------------------------------------------------------------------------

/// Parse `key.path=value` items (e.g. `loss.temperature=5`) into a TOML
/// table, creating intermediate tables as needed. Values parse as TOML
/// (numbers, booleans, arrays); anything unparseable is taken as a string.
fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let Some((key, value)) = item.split_once('=') else {
        return Err(LfmaError::Config(format!(
            "override '{item}' is not of the form key.path=value"
        )));
    };
    let segments: Vec<&str> = key.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(LfmaError::Config(format!("override '{item}' has an empty key segment")));
    }
    let parsed: toml::Value = match format!("v = {}", value.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("fragment defines v"),
        Err(_) => toml::Value::String(value.trim().to_string()),
    };
    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                LfmaError::Config(format!(
                    "override '{item}' descends into '{seg}', which is not a table"
                ))
            })?;
    }
    current.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

/// Load a raw config from an optional file plus dotted overrides. A missing
/// path means "all defaults"; a named file that does not exist is an error.
pub fn load_raw_config(path: Option<&Path>, overrides: &[String]) -> Result<RawRunConfig> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                LfmaError::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            text.parse()
                .map_err(|e| LfmaError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    table
        .try_into()
        .map_err(|e| LfmaError::Config(format!("invalid configuration: {e}")))
}

/// File + overrides straight to a resolved config.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    load_raw_config(path, overrides)?.resolve()
}

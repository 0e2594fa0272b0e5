//! Training engine: SGD with momentum, the step-level mode dispatch
//! (baseline / deep supervision / full distillation), the epoch loop with
//! metrics logging and checkpointing, and bit-reproducible shuffling,
//! augmentation, and cutout draws keyed by `(seed, epoch, batch)`.

use crate::backbone::{build_backbone, build_custom_backbone, ArchRecipe, Backbone};
use crate::ckpt::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::cutout::{generate_cutout_plan, CutoutConfig};
use crate::data::{augment_train_batch, ChannelStats, Dataset};
use crate::error::{LfmaError, Result};
use crate::heads::{build_heads, AuxHead, HeadTemplate, ReducerKind};
use crate::losses::{
    ce_grad_from_logits, distill_forward_backward, predictions, LossBreakdown, LossWeights,
};
use crate::nn::{fromf, Param, ParamKind, Scalar};
use crate::rng::{stream_rng, Stream};
use ndarray::{Array2, Array4, ArrayD};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

/// Zero-padding width used by the training augmentation.
pub const AUG_PAD: usize = 4;

/// Training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Plain cross-entropy on the backbone; heads are ignored entirely.
    Baseline,
    /// Cross-entropy on the backbone and every head (deep supervision).
    Dsn,
    /// Full objective: ensemble-teacher distillation plus cross-entropy.
    Lfma,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Dsn => "dsn",
            Mode::Lfma => "lfma",
        })
    }
}

impl FromStr for Mode {
    type Err = LfmaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "dsn" => Ok(Mode::Dsn),
            "lfma" => Ok(Mode::Lfma),
            other => Err(LfmaError::Config(format!(
                "unknown mode '{other}'; expected baseline, dsn, or lfma"
            ))),
        }
    }
}

/// Optimization schedule and bookkeeping knobs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs after which the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Apply weight decay to normalization parameters too (the default);
    /// disable to exclude gains and biases of normalization layers.
    pub decay_norm_params: bool,
    /// Optional global gradient max-norm clip.
    pub grad_clip: Option<f64>,
    /// Batch-preparation worker threads; 0 prepares batches inline. Results
    /// are identical at any worker count because every batch's augmentation
    /// stream is keyed by (seed, epoch, batch index).
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_epochs: vec![20, 30],
            lr_drop_factor: 10.0,
            mode: Mode::Lfma,
            seed: 0,
            decay_norm_params: true,
            grad_clip: None,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(LfmaError::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(LfmaError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LfmaError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LfmaError::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(LfmaError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(LfmaError::Config(format!(
                "lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            )));
        }
        for pair in self.lr_drop_epochs.windows(2) {
            if pair[1] <= pair[0] {
                return Err(LfmaError::Config(format!(
                    "lr_drop_epochs must be strictly increasing, got {:?}",
                    self.lr_drop_epochs
                )));
            }
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                return Err(LfmaError::Config(format!(
                    "lr drop at epoch {last} is not before the final epoch {}",
                    self.epochs
                )));
            }
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0 && clip.is_finite()) {
                return Err(LfmaError::Config(format!(
                    "grad_clip must be positive, got {clip}"
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch: the base rate divided by
/// `lr_drop_factor` once per completed drop epoch.
pub fn lr_for_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&d| d < epoch).count();
    cfg.lr / cfg.lr_drop_factor.powi(drops as i32)
}

/// SGD with momentum and (optionally norm-excluded) weight decay. One
/// optimizer instance covers backbone and head parameters alike; velocity
/// buffers are keyed by parameter name.
pub struct Sgd<F: Scalar> {
    momentum: F,
    weight_decay: F,
    decay_norm_params: bool,
    grad_clip: Option<F>,
    velocity: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Sgd {
            momentum: fromf(cfg.momentum),
            weight_decay: fromf(cfg.weight_decay),
            decay_norm_params: cfg.decay_norm_params,
            grad_clip: cfg.grad_clip.map(fromf),
            velocity: BTreeMap::new(),
        }
    }

    /// `v <- momentum * v + g + weight_decay * theta; theta <- theta - lr * v`
    pub fn step(&mut self, mut params: Vec<Param<'_, F>>, lr: F) {
        if let Some(clip) = self.grad_clip {
            let norm_sq: F = params
                .iter()
                .map(|p| p.grad.iter().map(|&g| g * g).sum::<F>())
                .sum();
            let norm = norm_sq.sqrt();
            if norm > clip {
                let scale = clip / norm;
                for p in &mut params {
                    p.grad.mapv_inplace(|g| g * scale);
                }
            }
        }
        for p in params {
            let decay = if self.decay_norm_params
                || !matches!(p.kind, ParamKind::NormGain | ParamKind::NormBias)
            {
                self.weight_decay
            } else {
                F::zero()
            };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            v.mapv_inplace(|x| x * self.momentum);
            *v += &p.grad;
            if decay != F::zero() {
                v.scaled_add(decay, &p.value);
            }
            let mut value = p.value;
            value.scaled_add(-lr, v);
        }
    }
}

/// Per-step result: the loss breakdown plus how many backbone predictions on
/// the (augmented) batch were correct.
#[derive(Clone, Debug)]
pub struct StepOutcome<F: Scalar> {
    pub breakdown: LossBreakdown<F>,
    pub correct: usize,
}

fn count_correct<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> usize {
    predictions(&logits.view())
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

#[allow(clippy::too_many_arguments)]
/// One optimizer update on one minibatch. `batch_index` only labels
/// diagnostics. The baseline path never touches the heads; deep supervision
/// adds per-head cross-entropy; the full mode runs the distillation
/// objective, with cutout masks drawn from `cutout_rng` when enabled.
pub fn train_step<F: Scalar>(
    backbone: &mut Backbone<F>,
    heads: &mut [AuxHead<F>],
    batch: &Array4<F>,
    labels: &[usize],
    mode: Mode,
    weights: &LossWeights<F>,
    cutout: &CutoutConfig,
    cutout_rng: &mut ChaCha8Rng,
    opt: &mut Sgd<F>,
    lr: F,
    batch_index: usize,
) -> Result<StepOutcome<F>> {
    if cutout.enabled && mode != Mode::Lfma {
        return Err(LfmaError::Config(format!(
            "feature-map cutout requires mode=lfma, got mode={mode}"
        )));
    }
    if mode != Mode::Baseline && heads.is_empty() {
        return Err(LfmaError::Config(format!(
            "mode={mode} needs auxiliary heads, but none were provided"
        )));
    }
    let b = labels.len();
    if b == 0 || batch.dim().0 != b {
        return Err(LfmaError::Argument(format!(
            "batch of {} images with {b} labels",
            batch.dim().0
        )));
    }

    backbone.zero_grads();
    for h in heads.iter_mut() {
        h.zero_grads();
    }

    let plan = if mode == Mode::Lfma && cutout.enabled {
        Some(generate_cutout_plan::<F>(
            backbone.topology(),
            cutout,
            b,
            cutout_rng,
        )?)
    } else {
        None
    };
    let rec = backbone.forward_with_taps(batch, plan.as_ref())?;
    if rec.backbone_logits.iter().any(|v| !v.is_finite()) {
        return Err(LfmaError::NonFiniteLoss {
            batch_index,
            detail: "non-finite backbone logits in forward pass".into(),
        });
    }
    let num_blocks = backbone.num_blocks();
    let mut tap_grads: Vec<Option<Array4<F>>> = vec![None; num_blocks];
    let correct = count_correct(&rec.backbone_logits, labels);
    let inv_b = 1.0 / b as f64;

    let breakdown = match mode {
        Mode::Baseline => {
            let (ce, grad) = ce_grad_from_logits(
                &rec.backbone_logits,
                labels,
                weights.gamma * fromf(inv_b),
            )?;
            backbone.backward(&grad, &tap_grads)?;
            LossBreakdown {
                kld_backbone: F::zero(),
                kld_heads: F::zero(),
                ce_backbone: ce,
                ce_heads: F::zero(),
                total: weights.gamma * ce,
            }
        }
        Mode::Dsn => {
            let (ce_b, grad) = ce_grad_from_logits(
                &rec.backbone_logits,
                labels,
                weights.gamma * fromf(inv_b),
            )?;
            let k = heads.len();
            let mut ce_heads = F::zero();
            for head in heads.iter_mut() {
                let logits = head.forward_train(&rec.features[head.block_index])?;
                let (ce_k, g_k) = ce_grad_from_logits(
                    &logits,
                    labels,
                    weights.delta * fromf(inv_b / k as f64),
                )?;
                ce_heads += ce_k;
                tap_grads[head.block_index] = Some(head.backward(&g_k));
            }
            ce_heads /= fromf(k as f64);
            backbone.backward(&grad, &tap_grads)?;
            LossBreakdown {
                kld_backbone: F::zero(),
                kld_heads: F::zero(),
                ce_backbone: ce_b,
                ce_heads,
                total: weights.gamma * ce_b + weights.delta * ce_heads,
            }
        }
        Mode::Lfma => {
            let mut head_logits = Vec::with_capacity(heads.len());
            for head in heads.iter_mut() {
                head_logits.push(head.forward_train(&rec.features[head.block_index])?);
            }
            let out = distill_forward_backward(&rec.backbone_logits, &head_logits, labels, weights)?;
            for (head, g) in heads.iter_mut().zip(&out.grad_heads) {
                tap_grads[head.block_index] = Some(head.backward(g));
            }
            backbone.backward(&out.grad_backbone, &tap_grads)?;
            out.breakdown
        }
    };

    if !breakdown.total.is_finite() {
        return Err(LfmaError::NonFiniteLoss {
            batch_index,
            detail: format!("{breakdown:?}"),
        });
    }

    let mut params = backbone.params_mut();
    if mode != Mode::Baseline {
        for h in heads.iter_mut() {
            params.extend(h.params_mut());
        }
    }
    opt.step(params, lr);
    Ok(StepOutcome { breakdown, correct })
}

/// Accuracy of the backbone and of every head on an evaluation split,
/// computed with running statistics and no augmentation.
pub fn validation_pass<F: Scalar>(
    backbone: &Backbone<F>,
    heads: &[AuxHead<F>],
    ds: &Dataset,
    stats: &ChannelStats,
    batch_size: usize,
) -> Result<(f64, Vec<f64>)> {
    if ds.is_empty() {
        return Err(LfmaError::Argument(
            "validation dataset holds no samples".into(),
        ));
    }
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    let mut head_correct = vec![0usize; heads.len()];
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (x, labels) = crate::data::eval_batch::<F>(ds, stats, chunk)?;
        let rec = backbone.forward_taps_eval(&x)?;
        correct += count_correct(&rec.backbone_logits, &labels);
        for (hi, head) in heads.iter().enumerate() {
            let logits = head.forward_eval(&rec.features[head.block_index])?;
            head_correct[hi] += count_correct(&logits, &labels);
        }
    }
    let n = ds.len() as f64;
    Ok((
        correct as f64 / n,
        head_correct.iter().map(|&c| c as f64 / n).collect(),
    ))
}

/// One row of the training log.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub kld_backbone: f64,
    pub kld_heads: f64,
    pub ce_backbone: f64,
    pub ce_heads: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub head_val_acc: Vec<f64>,
    pub seconds: f64,
}

pub fn metrics_csv_header(num_heads: usize) -> String {
    let mut cols = vec![
        "epoch".to_string(),
        "lr".to_string(),
        "total".to_string(),
        "kld_backbone".to_string(),
        "kld_heads".to_string(),
        "ce_backbone".to_string(),
        "ce_heads".to_string(),
        "train_acc".to_string(),
        "val_acc".to_string(),
    ];
    cols.extend((0..num_heads).map(|k| format!("head{k}_val_acc")));
    cols.push("seconds".to_string());
    cols.join(",")
}

fn metrics_csv_row(m: &EpochMetrics) -> String {
    let mut fields = vec![
        m.epoch.to_string(),
        format!("{}", m.lr),
        format!("{}", m.total),
        format!("{}", m.kld_backbone),
        format!("{}", m.kld_heads),
        format!("{}", m.ce_backbone),
        format!("{}", m.ce_heads),
        format!("{}", m.train_acc),
        format!("{}", m.val_acc),
    ];
    fields.extend(m.head_val_acc.iter().map(|v| format!("{v}")));
    fields.push(format!("{}", m.seconds));
    fields.join(",")
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

fn reducer_tag(reducer: ReducerKind) -> &'static str {
    match reducer {
        ReducerKind::ConvStack => "conv_stack",
        ReducerKind::PoolOnly => "pool_only",
    }
}

fn reducer_from_tag(tag: &str) -> Result<ReducerKind> {
    match tag {
        "conv_stack" => Ok(ReducerKind::ConvStack),
        "pool_only" => Ok(ReducerKind::PoolOnly),
        other => Err(LfmaError::Checkpoint(format!(
            "unknown head reducer '{other}'"
        ))),
    }
}

/// Write backbone + head parameters (and normalization buffers) with enough
/// metadata to rebuild the model shape from the file alone.
#[allow(clippy::too_many_arguments)]
pub fn save_model_checkpoint<F: Scalar>(
    path: &Path,
    backbone: &Backbone<F>,
    heads: &[AuxHead<F>],
    template: &HeadTemplate,
    mode: Mode,
    seed: u64,
    epoch: usize,
    val_acc: f64,
) -> Result<()> {
    let mut tensors = BTreeMap::new();
    for (name, value) in backbone.state() {
        tensors.insert(name, value);
    }
    for head in heads {
        for (name, value) in head.state() {
            tensors.insert(name, value);
        }
    }
    let (c, h, w) = backbone.input_shape;
    let meta = serde_json::json!({
        "arch": backbone.arch,
        "recipe": backbone.recipe,
        "num_classes": backbone.topology().num_classes,
        "input_shape": [c, h, w],
        "mode": mode.to_string(),
        "seed": seed,
        "epoch": epoch,
        "val_acc": val_acc,
        "head_count": heads.len(),
        "head_reducer": reducer_tag(template.reducer),
        "head_hidden": template.hidden_channels,
        "dtype": format!("{:?}", F::DTYPE).to_lowercase(),
    });
    save_checkpoint(path, &Checkpoint::new(meta, tensors))
}

/// Rebuild a model from a checkpoint. Head tensors may have been stripped;
/// in that case no heads are returned even if the metadata mentions them.
pub fn load_model_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(Backbone<F>, Vec<AuxHead<F>>, serde_json::Value)> {
    let ckpt = load_checkpoint::<F>(path)?;
    let arch = ckpt.meta_str("arch")?.to_string();
    let classes = ckpt.meta_u64("num_classes")? as usize;
    let shape = ckpt
        .meta
        .get("input_shape")
        .and_then(|v| v.as_array())
        .filter(|a| a.len() == 3)
        .ok_or_else(|| LfmaError::Checkpoint("metadata key 'input_shape' missing".into()))?;
    let dims: Vec<usize> = shape
        .iter()
        .map(|v| v.as_u64().unwrap_or(0) as usize)
        .collect();
    let seed = ckpt.meta_u64("seed").unwrap_or(0);
    let shape3 = (dims[0], dims[1], dims[2]);
    let mut backbone = match ckpt.meta.get("recipe") {
        Some(value) => {
            let recipe: ArchRecipe = serde_json::from_value(value.clone())
                .map_err(|e| LfmaError::Checkpoint(format!("corrupt recipe metadata: {e}")))?;
            build_custom_backbone::<F>(
                &arch,
                recipe.kind,
                recipe.stem_channels,
                &recipe.stage_channels,
                &recipe.stage_blocks,
                classes,
                shape3,
                seed,
            )?
        }
        None => build_backbone::<F>(&arch, classes, shape3, seed)?,
    };
    backbone.load_state(&ckpt.tensors)?;
    let has_head_tensors = ckpt.tensors.keys().any(|k| k.starts_with("heads."));
    let head_count = ckpt.meta_u64("head_count").unwrap_or(0) as usize;
    let mut heads = Vec::new();
    if has_head_tensors && head_count > 0 {
        let template = HeadTemplate {
            reducer: reducer_from_tag(ckpt.meta_str("head_reducer")?)?,
            hidden_channels: ckpt
                .meta
                .get("head_hidden")
                .and_then(|v| v.as_u64())
                .map(|v| v as usize),
        };
        heads = build_heads::<F>(backbone.topology(), &template, seed)?;
        if heads.len() != head_count {
            return Err(LfmaError::Checkpoint(format!(
                "checkpoint lists {head_count} heads but the topology yields {}",
                heads.len()
            )));
        }
        for head in &mut heads {
            heads_load(head, &ckpt.tensors)?;
        }
    }
    Ok((backbone, heads, ckpt.meta))
}

fn heads_load<F: Scalar>(
    head: &mut AuxHead<F>,
    map: &BTreeMap<String, ArrayD<F>>,
) -> Result<()> {
    head.load_state(map)
}

/// Everything `train` needs besides the model itself.
pub struct TrainPlan<'a> {
    pub train_ds: &'a Dataset,
    pub val_ds: &'a Dataset,
    pub stats: &'a ChannelStats,
    pub config: &'a TrainConfig,
    pub cutout: &'a CutoutConfig,
    /// Directory for metrics.csv, last.ckpt and best.ckpt; `None` disables
    /// file output.
    pub out_dir: Option<&'a Path>,
    /// Recorded in checkpoints so heads can be rebuilt from the file.
    pub head_template: HeadTemplate,
    /// Called after each epoch with the fresh metrics (progress reporting).
    pub on_epoch: Option<&'a (dyn Fn(&EpochMetrics) + Sync)>,
}

/// Full training loop. Best checkpoint selection tracks backbone validation
/// accuracy; ties keep the earlier epoch.
pub fn train<F: Scalar>(
    backbone: &mut Backbone<F>,
    heads: &mut [AuxHead<F>],
    weights: &LossWeights<F>,
    plan: &TrainPlan<'_>,
) -> Result<TrainOutcome> {
    let cfg = plan.config;
    cfg.validate()?;
    if cfg.mode != Mode::Baseline && heads.is_empty() {
        return Err(LfmaError::Config(format!(
            "mode={} needs auxiliary heads, but none were provided",
            cfg.mode
        )));
    }
    if plan.cutout.enabled && cfg.mode != Mode::Lfma {
        return Err(LfmaError::Config(format!(
            "feature-map cutout requires mode=lfma, got mode={}",
            cfg.mode
        )));
    }
    let classes = backbone.topology().num_classes;
    for (role, ds) in [("train", plan.train_ds), ("val", plan.val_ds)] {
        if ds.num_classes != classes {
            return Err(LfmaError::Config(format!(
                "{role} split has {} classes but the model expects {classes}",
                ds.num_classes
            )));
        }
        if ds.is_empty() {
            return Err(LfmaError::Argument(format!("{role} split holds no samples")));
        }
    }

    let mut csv = match plan.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| LfmaError::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let mut file = std::fs::File::create(&path).map_err(|e| LfmaError::io(&path, e))?;
            writeln!(file, "{}", metrics_csv_header(heads.len()))
                .map_err(|e| LfmaError::io(&path, e))?;
            Some((file, path))
        }
        None => None,
    };

    let mut opt = Sgd::<F>::new(cfg);
    let mut outcome = TrainOutcome {
        epochs: Vec::with_capacity(cfg.epochs),
        best_val_acc: f64::NEG_INFINITY,
        best_epoch: 0,
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_for_epoch(cfg, epoch);
        let mut indices: Vec<usize> = (0..plan.train_ds.len()).collect();
        indices.shuffle(&mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64, 0));
        let batches: Vec<Vec<usize>> = indices
            .chunks(cfg.batch_size)
            .map(<[usize]>::to_vec)
            .collect();

        let mut sums = LossBreakdownSums::default();
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut process = |bi: usize,
                           backbone: &mut Backbone<F>,
                           heads: &mut [AuxHead<F>],
                           opt: &mut Sgd<F>,
                           x: Array4<F>,
                           labels: Vec<usize>|
         -> Result<()> {
            let mut cut_rng = stream_rng(cfg.seed, Stream::Cutout, epoch as u64, bi as u64);
            let out = train_step(
                backbone,
                heads,
                &x,
                &labels,
                cfg.mode,
                weights,
                plan.cutout,
                &mut cut_rng,
                opt,
                fromf(lr),
                bi,
            )?;
            sums.add(&out.breakdown);
            correct += out.correct;
            seen += labels.len();
            Ok(())
        };

        if cfg.workers == 0 {
            for (bi, chunk) in batches.iter().enumerate() {
                let mut rng = stream_rng(cfg.seed, Stream::Augment, epoch as u64, bi as u64);
                let (x, labels) =
                    augment_train_batch::<F>(plan.train_ds, plan.stats, chunk, AUG_PAD, &mut rng)?;
                process(bi, backbone, heads, &mut opt, x, labels)?;
            }
        } else {
            prefetch_epoch(
                plan, cfg, epoch, &batches,
                |bi, x, labels| process(bi, backbone, heads, &mut opt, x, labels),
            )?;
        }

        let (val_acc, head_val_acc) =
            validation_pass(backbone, heads, plan.val_ds, plan.stats, cfg.batch_size)?;
        let nb = batches.len() as f64;
        let metrics = EpochMetrics {
            epoch,
            lr,
            total: sums.total / nb,
            kld_backbone: sums.kld_backbone / nb,
            kld_heads: sums.kld_heads / nb,
            ce_backbone: sums.ce_backbone / nb,
            ce_heads: sums.ce_heads / nb,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            head_val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some((file, path)) = &mut csv {
            writeln!(file, "{}", metrics_csv_row(&metrics))
                .map_err(|e| LfmaError::io(path.as_path(), e))?;
        }
        if let Some(dir) = plan.out_dir {
            save_model_checkpoint(
                &dir.join("last.ckpt"),
                backbone,
                heads,
                &plan.head_template,
                cfg.mode,
                cfg.seed,
                epoch,
                val_acc,
            )?;
        }
        if val_acc > outcome.best_val_acc {
            outcome.best_val_acc = val_acc;
            outcome.best_epoch = epoch;
            if let Some(dir) = plan.out_dir {
                save_model_checkpoint(
                    &dir.join("best.ckpt"),
                    backbone,
                    heads,
                    &plan.head_template,
                    cfg.mode,
                    cfg.seed,
                    epoch,
                    val_acc,
                )?;
            }
        }
        if let Some(hook) = plan.on_epoch {
            hook(&metrics);
        }
        outcome.epochs.push(metrics);
    }
    Ok(outcome)
}

#[derive(Default)]
struct LossBreakdownSums {
    total: f64,
    kld_backbone: f64,
    kld_heads: f64,
    ce_backbone: f64,
    ce_heads: f64,
}

impl LossBreakdownSums {
    fn add<F: Scalar>(&mut self, b: &LossBreakdown<F>) {
        self.total += b.total.to_f64().unwrap();
        self.kld_backbone += b.kld_backbone.to_f64().unwrap();
        self.kld_heads += b.kld_heads.to_f64().unwrap();
        self.ce_backbone += b.ce_backbone.to_f64().unwrap();
        self.ce_heads += b.ce_heads.to_f64().unwrap();
    }
}

/// Prepare batches on worker threads, consume them on the caller's thread in
/// batch order. Augmentation randomness is keyed by batch index, so any
/// worker count yields identical batches.
fn prefetch_epoch<F, Consume>(
    plan: &TrainPlan<'_>,
    cfg: &TrainConfig,
    epoch: usize,
    batches: &[Vec<usize>],
    mut consume: Consume,
) -> Result<()>
where
    F: Scalar,
    Consume: FnMut(usize, Array4<F>, Vec<usize>) -> Result<()>,
{
    let workers = cfg.workers.min(batches.len().max(1));
    let (tx, rx) = std::sync::mpsc::sync_channel(workers * 2);
    std::thread::scope(|scope| -> Result<()> {
        for w in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || {
                for bi in (w..batches.len()).step_by(workers) {
                    let mut rng = stream_rng(cfg.seed, Stream::Augment, epoch as u64, bi as u64);
                    let prepared = augment_train_batch::<F>(
                        plan.train_ds,
                        plan.stats,
                        &batches[bi],
                        AUG_PAD,
                        &mut rng,
                    );
                    if tx.send((bi, prepared)).is_err() {
                        return; // consumer gave up (error path)
                    }
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, Result<(Array4<F>, Vec<usize>)>> = BTreeMap::new();
        for next in 0..batches.len() {
            let prepared = loop {
                if let Some(r) = pending.remove(&next) {
                    break r;
                }
                match rx.recv() {
                    Ok((bi, r)) => {
                        pending.insert(bi, r);
                    }
                    Err(_) => {
                        return Err(LfmaError::Argument(
                            "batch workers exited before delivering every batch".into(),
                        ))
                    }
                }
            };
            let (x, labels) = prepared?;
            consume(next, x, labels)?;
        }
        Ok(())
    })
}

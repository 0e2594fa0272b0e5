//! Tapped residual backbones: a single training forward yields the final
//! logits plus every block's (optionally cutout-masked) output feature map.
//!
//! A "block" is a residual stage; the registry provides the standard
//! ResNet-18/34/50 stage layouts plus a small ResNet-8 for desk-scale runs.
//! Inputs up to 64x64 get the small-input stem (3x3 convolution, stride 1,
//! padding 1, no pooling); larger inputs use the 7x7/stride-2 stem with a
//! max-pool.

use crate::cutout::{apply_cutout, CutoutPlan};
use crate::error::{LfmaError, Result};
use crate::losses::softmax_with_temperature;
use crate::nn::ops::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, MaxPool2d,
};
use crate::nn::{BatchNorm2d, Conv2d, Linear, Param, ParamKind, Scalar};
use crate::rng::{stream_rng, Stream};
use ndarray::{Array2, Array4, ArrayD, ArrayView4};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Registered architecture names, in the order reported to the user.
pub const ARCHITECTURES: [&str; 4] = ["resnet8", "resnet18", "resnet34", "resnet50"];

/// Residual block flavor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

/// Static shape description of a built backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockTopology {
    pub num_blocks: usize,
    /// (channels, height, width) of each block's output for the build-time
    /// input resolution.
    pub per_block_output_shape: Vec<(usize, usize, usize)>,
    pub num_classes: usize,
}

/// One training/eval forward's observable products.
#[derive(Clone, Debug)]
pub struct TapRecord<F: Scalar> {
    /// Block outputs in depth order, after mask application where a mask
    /// existed — heads see exactly what the next block saw.
    pub features: Vec<Array4<F>>,
    pub backbone_logits: Array2<F>,
}

// ---------------------------------------------------------------------------
// Composite layers
// ---------------------------------------------------------------------------

/// Convolution + batch norm pair, the unit everything here is built from.
#[derive(Clone, Debug)]
pub(crate) struct ConvBn<F: Scalar> {
    pub(crate) conv: Conv2d<F>,
    pub(crate) bn: BatchNorm2d<F>,
}

impl<F: Scalar> ConvBn<F> {
    pub(crate) fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(in_c, out_c, k, stride, padding, rng),
            bn: BatchNorm2d::new(out_c),
        }
    }

    pub(crate) fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let y = self.conv.forward(x, train);
        if train {
            self.bn.forward_train(&y)
        } else {
            self.bn.forward_eval(&y.view())
        }
    }

    pub(crate) fn forward_eval(&self, x: &ArrayView4<'_, F>) -> Array4<F> {
        let y = self.conv.forward_eval(x);
        self.bn.forward_eval(&y.view())
    }

    pub(crate) fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let g = self.bn.backward(grad_out);
        self.conv.backward(&g)
    }

    pub(crate) fn zero_grad(&mut self) {
        self.conv.zero_grad();
        self.bn.zero_grad();
    }

    pub(crate) fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    /// Push `(prefix).conv.weight`, `(prefix).bn.gamma`, `(prefix).bn.beta`.
    pub(crate) fn push_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<Param<'a, F>>) {
        out.push(Param {
            name: format!("{prefix}.conv.weight"),
            kind: ParamKind::Weight,
            value: self.conv.weight.view_mut().into_dyn(),
            grad: self.conv.grad_weight.view_mut().into_dyn(),
        });
        out.push(Param {
            name: format!("{prefix}.bn.gamma"),
            kind: ParamKind::NormGain,
            value: self.bn.gamma.view_mut().into_dyn(),
            grad: self.bn.grad_gamma.view_mut().into_dyn(),
        });
        out.push(Param {
            name: format!("{prefix}.bn.beta"),
            kind: ParamKind::NormBias,
            value: self.bn.beta.view_mut().into_dyn(),
            grad: self.bn.grad_beta.view_mut().into_dyn(),
        });
    }

    /// Parameters plus batch-norm running buffers, for checkpoints.
    pub(crate) fn push_state(&self, prefix: &str, out: &mut Vec<(String, ArrayD<F>)>) {
        out.push((format!("{prefix}.conv.weight"), self.conv.weight.clone().into_dyn()));
        out.push((format!("{prefix}.bn.gamma"), self.bn.gamma.clone().into_dyn()));
        out.push((format!("{prefix}.bn.beta"), self.bn.beta.clone().into_dyn()));
        out.push((
            format!("{prefix}.bn.running_mean"),
            self.bn.running_mean.clone().into_dyn(),
        ));
        out.push((
            format!("{prefix}.bn.running_var"),
            self.bn.running_var.clone().into_dyn(),
        ));
    }

    pub(crate) fn load_state(
        &mut self,
        prefix: &str,
        map: &BTreeMap<String, ArrayD<F>>,
    ) -> Result<()> {
        load_into(map, &format!("{prefix}.conv.weight"), &mut self.conv.weight.view_mut().into_dyn())?;
        load_into(map, &format!("{prefix}.bn.gamma"), &mut self.bn.gamma.view_mut().into_dyn())?;
        load_into(map, &format!("{prefix}.bn.beta"), &mut self.bn.beta.view_mut().into_dyn())?;
        load_into(
            map,
            &format!("{prefix}.bn.running_mean"),
            &mut self.bn.running_mean.view_mut().into_dyn(),
        )?;
        load_into(
            map,
            &format!("{prefix}.bn.running_var"),
            &mut self.bn.running_var.view_mut().into_dyn(),
        )?;
        Ok(())
    }
}

/// Copy one named tensor out of a checkpoint map, shape-checked.
pub(crate) fn load_into<F: Scalar>(
    map: &BTreeMap<String, ArrayD<F>>,
    name: &str,
    dst: &mut ndarray::ArrayViewMutD<'_, F>,
) -> Result<()> {
    let src = map
        .get(name)
        .ok_or_else(|| LfmaError::Checkpoint(format!("missing tensor '{name}'")))?;
    if src.shape() != dst.shape() {
        return Err(LfmaError::Checkpoint(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    dst.assign(src);
    Ok(())
}

/// One residual block: 2 (basic) or 3 (bottleneck) conv+bn units on the
/// main path, an optional projection shortcut, ReLU after every unit except
/// the last, and ReLU after the residual sum.
#[derive(Clone, Debug)]
struct ResBlock<F: Scalar> {
    units: Vec<ConvBn<F>>,
    shortcut: Option<ConvBn<F>>,
    // Training caches: post-ReLU activations of non-final units, and the
    // block's post-ReLU output.
    unit_acts: Vec<Array4<F>>,
    out_act: Option<Array4<F>>,
}

impl<F: Scalar> ResBlock<F> {
    fn new(kind: BlockKind, in_c: usize, base_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let out_c = base_c * kind.expansion();
        let units = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(in_c, base_c, 3, stride, 1, rng),
                ConvBn::new(base_c, base_c, 3, 1, 1, rng),
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::new(in_c, base_c, 1, 1, 0, rng),
                ConvBn::new(base_c, base_c, 3, stride, 1, rng),
                ConvBn::new(base_c, out_c, 1, 1, 0, rng),
            ],
        };
        let shortcut = if stride != 1 || in_c != out_c {
            Some(ConvBn::new(in_c, out_c, 1, stride, 0, rng))
        } else {
            None
        };
        ResBlock { units, shortcut, unit_acts: Vec::new(), out_act: None }
    }

    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        if train {
            self.unit_acts.clear();
        }
        let n = self.units.len();
        let mut cur = x.clone();
        for (i, unit) in self.units.iter_mut().enumerate() {
            let mut y = unit.forward(&cur, train);
            if i + 1 < n {
                y = relu(&y);
                if train {
                    self.unit_acts.push(y.clone());
                }
            }
            cur = y;
        }
        let residual = match &mut self.shortcut {
            Some(sc) => sc.forward(x, train),
            None => x.clone(),
        };
        let out = relu(&(cur + residual));
        if train {
            self.out_act = Some(out.clone());
        }
        out
    }

    fn forward_eval(&self, x: &ArrayView4<'_, F>) -> Array4<F> {
        let n = self.units.len();
        let mut cur = self.units[0].forward_eval(x);
        if n > 1 {
            cur = relu(&cur);
        }
        for (i, unit) in self.units.iter().enumerate().skip(1) {
            cur = unit.forward_eval(&cur.view());
            if i + 1 < n {
                cur = relu(&cur);
            }
        }
        let residual = match &self.shortcut {
            Some(sc) => sc.forward_eval(x),
            None => x.to_owned(),
        };
        relu(&(cur + residual))
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let out = self.out_act.take().expect("block backward without forward");
        let g = relu_backward(grad_out, &out);
        let g_short = match &mut self.shortcut {
            Some(sc) => sc.backward(&g),
            None => g.clone(),
        };
        let mut gm = g;
        for i in (0..self.units.len()).rev() {
            gm = self.units[i].backward(&gm);
            if i > 0 {
                gm = relu_backward(&gm, &self.unit_acts[i - 1]);
            }
        }
        self.unit_acts.clear();
        gm + g_short
    }

    fn zero_grad(&mut self) {
        for u in &mut self.units {
            u.zero_grad();
        }
        if let Some(sc) = &mut self.shortcut {
            sc.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.units.iter().map(ConvBn::param_count).sum::<usize>()
            + self.shortcut.as_ref().map_or(0, ConvBn::param_count)
    }

    fn push_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<Param<'a, F>>) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.push_params(&format!("{prefix}.unit{}", i + 1), out);
        }
        if let Some(sc) = &mut self.shortcut {
            sc.push_params(&format!("{prefix}.shortcut"), out);
        }
    }

    fn push_state(&self, prefix: &str, out: &mut Vec<(String, ArrayD<F>)>) {
        for (i, u) in self.units.iter().enumerate() {
            u.push_state(&format!("{prefix}.unit{}", i + 1), out);
        }
        if let Some(sc) = &self.shortcut {
            sc.push_state(&format!("{prefix}.shortcut"), out);
        }
    }

    fn load_state(&mut self, prefix: &str, map: &BTreeMap<String, ArrayD<F>>) -> Result<()> {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.load_state(&format!("{prefix}.unit{}", i + 1), map)?;
        }
        if let Some(sc) = &mut self.shortcut {
            sc.load_state(&format!("{prefix}.shortcut"), map)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct Stem<F: Scalar> {
    unit: ConvBn<F>,
    pool: Option<MaxPool2d>,
    act: Option<Array4<F>>,
}

impl<F: Scalar> Stem<F> {
    fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let y = relu(&self.unit.forward(x, train));
        if train {
            self.act = Some(y.clone());
        }
        match &mut self.pool {
            Some(p) => p.forward(&y, train),
            None => y,
        }
    }

    fn forward_eval(&self, x: &ArrayView4<'_, F>) -> Array4<F> {
        let y = relu(&self.unit.forward_eval(x));
        match &self.pool {
            Some(p) => p.forward_eval(&y.view()),
            None => y,
        }
    }

    fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let g = match &self.pool {
            Some(p) => p.backward(grad_out),
            None => grad_out.clone(),
        };
        let act = self.act.take().expect("stem backward without forward");
        let g = relu_backward(&g, &act);
        self.unit.backward(&g)
    }
}

/// The construction parameters of a backbone, sufficient to rebuild its
/// exact layout (e.g. from checkpoint metadata).
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchRecipe {
    pub kind: BlockKind,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
}

/// A block-structured classifier whose forward pass exposes each stage's
/// output. Heads and cutout plug in at the stage boundaries.
#[derive(Clone, Debug)]
pub struct Backbone<F: Scalar> {
    pub arch: String,
    pub input_shape: (usize, usize, usize),
    pub recipe: ArchRecipe,
    topology: BlockTopology,
    stem: Stem<F>,
    stages: Vec<Vec<ResBlock<F>>>,
    fc: Linear<F>,
    /// Masks actually applied in the last training forward, per block.
    saved_masks: Vec<Option<Array4<F>>>,
    /// Spatial size of the last stage output (for pool backward).
    last_hw: (usize, usize),
}

/// Build a registered architecture with seeded initialization. The seed
/// feeds the parameter-init stream only, so two builds with the same seed
/// are bitwise identical.
pub fn build_backbone<F: Scalar>(
    arch_name: &str,
    num_classes: usize,
    input_shape: (usize, usize, usize),
    seed: u64,
) -> Result<Backbone<F>> {
    let (kind, stem_c, channels, blocks): (BlockKind, usize, &[usize], &[usize]) = match arch_name {
        "resnet8" => (BlockKind::Basic, 16, &[16, 32, 64], &[1, 1, 1]),
        "resnet18" => (BlockKind::Basic, 64, &[64, 128, 256, 512], &[2, 2, 2, 2]),
        "resnet34" => (BlockKind::Basic, 64, &[64, 128, 256, 512], &[3, 4, 6, 3]),
        "resnet50" => (BlockKind::Bottleneck, 64, &[64, 128, 256, 512], &[3, 4, 6, 3]),
        other => {
            return Err(LfmaError::Config(format!(
                "unknown architecture '{other}'; registered: {}",
                ARCHITECTURES.join(", ")
            )))
        }
    };
    build_custom_backbone(arch_name, kind, stem_c, channels, blocks, num_classes, input_shape, seed)
}

/// Build an arbitrary stage layout. The registry goes through here; tests
/// use it directly for micro-networks small enough to finite-difference.
#[allow(clippy::too_many_arguments)]
pub fn build_custom_backbone<F: Scalar>(
    arch_name: &str,
    kind: BlockKind,
    stem_channels: usize,
    stage_channels: &[usize],
    stage_blocks: &[usize],
    num_classes: usize,
    input_shape: (usize, usize, usize),
    seed: u64,
) -> Result<Backbone<F>> {
    if stage_channels.len() != stage_blocks.len() {
        return Err(LfmaError::Argument(format!(
            "{} stage channel counts vs {} block counts",
            stage_channels.len(),
            stage_blocks.len()
        )));
    }
    if stage_channels.len() < 2 {
        return Err(LfmaError::Argument(
            "a tapped backbone needs at least two blocks".into(),
        ));
    }
    if num_classes == 0 {
        return Err(LfmaError::Argument("num_classes must be positive".into()));
    }
    let (in_c, in_h, in_w) = input_shape;
    if in_c == 0 || in_h == 0 || in_w == 0 {
        return Err(LfmaError::Shape(format!(
            "input shape {input_shape:?} has a zero dimension"
        )));
    }

    let mut rng = stream_rng(seed, Stream::ParamInit, 0, 0);
    let small_input = in_h <= 64 && in_w <= 64;
    let (stem, mut h, mut w) = if small_input {
        let unit = ConvBn::new(in_c, stem_channels, 3, 1, 1, &mut rng);
        (Stem { unit, pool: None, act: None }, in_h, in_w)
    } else {
        let unit = ConvBn::new(in_c, stem_channels, 7, 2, 3, &mut rng);
        let pool = MaxPool2d::new(3, 2, 1);
        let h1 = (in_h + 2 * 3 - 7) / 2 + 1;
        let w1 = (in_w + 2 * 3 - 7) / 2 + 1;
        let (h2, w2) = pool.out_hw(h1, w1);
        (Stem { unit, pool: Some(pool), act: None }, h2, w2)
    };

    let mut stages = Vec::new();
    let mut shapes = Vec::new();
    let mut cur_c = stem_channels;
    for (i, (&base_c, &nblocks)) in stage_channels.iter().zip(stage_blocks).enumerate() {
        if base_c == 0 || nblocks == 0 {
            return Err(LfmaError::Argument(format!(
                "stage {i} must have positive channels and block count"
            )));
        }
        let stride = if i == 0 { 1 } else { 2 };
        if stride == 2 && (h < 2 || w < 2) {
            return Err(LfmaError::Shape(format!(
                "input {in_h}x{in_w} is too small for '{arch_name}': stage {i} \
                 would reduce a {h}x{w} map below 1x1"
            )));
        }
        let mut stage = Vec::with_capacity(nblocks);
        for j in 0..nblocks {
            let s = if j == 0 { stride } else { 1 };
            stage.push(ResBlock::new(kind, cur_c, base_c, s, &mut rng));
            cur_c = base_c * kind.expansion();
        }
        h = (h + 2 - 3) / stride + 1; // 3x3, padding 1
        w = (w + 2 - 3) / stride + 1;
        shapes.push((cur_c, h, w));
        stages.push(stage);
    }

    let fc = Linear::new(cur_c, num_classes, &mut rng);
    let num_blocks = stages.len();
    Ok(Backbone {
        arch: arch_name.to_string(),
        input_shape,
        recipe: ArchRecipe {
            kind,
            stem_channels,
            stage_channels: stage_channels.to_vec(),
            stage_blocks: stage_blocks.to_vec(),
        },
        topology: BlockTopology {
            num_blocks,
            per_block_output_shape: shapes,
            num_classes,
        },
        stem,
        stages,
        fc,
        saved_masks: vec![None; num_blocks],
        last_hw: (h, w),
    })
}

impl<F: Scalar> Backbone<F> {
    pub fn topology(&self) -> &BlockTopology {
        &self.topology
    }

    pub fn num_blocks(&self) -> usize {
        self.topology.num_blocks
    }

    fn check_input(&self, batch: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = batch.dim();
        if (c, h, w) != self.input_shape {
            return Err(LfmaError::Shape(format!(
                "batch shape ({c}, {h}, {w}) does not match backbone input {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    fn check_plan(&self, plan: &CutoutPlan<F>) -> Result<()> {
        for b in plan.blocks() {
            if b >= self.topology.num_blocks {
                return Err(LfmaError::Shape(format!(
                    "cutout plan addresses block {b}, but the backbone has {}",
                    self.topology.num_blocks
                )));
            }
        }
        Ok(())
    }

    /// Training forward: batch-norm batch statistics, caches for backward,
    /// optional cutout. Block `k`'s output is masked (when a mask exists),
    /// stored as `features[k]`, and fed to block `k+1`; the classifier
    /// consumes the last (possibly masked) map.
    pub fn forward_with_taps(
        &mut self,
        batch: &Array4<F>,
        cutout: Option<&CutoutPlan<F>>,
    ) -> Result<TapRecord<F>> {
        self.check_input(batch)?;
        if let Some(plan) = cutout {
            self.check_plan(plan)?;
        }
        let mut features = Vec::with_capacity(self.topology.num_blocks);
        let mut x = self.stem.forward(batch, true);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for block in stage.iter_mut() {
                x = block.forward(&x, true);
            }
            self.saved_masks[i] = match cutout.and_then(|p| p.mask_for(i)) {
                Some(mask) => {
                    apply_cutout(&mut x, mask)?;
                    Some(mask.clone())
                }
                None => None,
            };
            features.push(x.clone());
        }
        let pooled = global_avg_pool(&x.view());
        let backbone_logits = self.fc.forward(&pooled, true);
        Ok(TapRecord { features, backbone_logits })
    }

    /// Evaluation forward with taps: running batch-norm statistics, no
    /// caching, never any cutout.
    pub fn forward_taps_eval(&self, batch: &Array4<F>) -> Result<TapRecord<F>> {
        self.check_input(batch)?;
        let mut features = Vec::with_capacity(self.topology.num_blocks);
        let mut x = self.stem.forward_eval(&batch.view());
        for stage in &self.stages {
            for block in stage {
                x = block.forward_eval(&x.view());
            }
            features.push(x.clone());
        }
        let pooled = global_avg_pool(&x.view());
        let backbone_logits = self.fc.forward_eval(&pooled.view());
        Ok(TapRecord { features, backbone_logits })
    }

    /// Deployment path: eval-mode logits softmaxed at T=1. Touches no
    /// auxiliary-head parameters and never applies cutout.
    pub fn inference_forward(&self, batch: &Array4<F>) -> Result<Array2<F>> {
        self.check_input(batch)?;
        let mut x = self.stem.forward_eval(&batch.view());
        for stage in &self.stages {
            for block in stage {
                x = block.forward_eval(&x.view());
            }
        }
        let pooled = global_avg_pool(&x.view());
        let logits = self.fc.forward_eval(&pooled.view());
        softmax_with_temperature(&logits.view(), F::one())
    }

    /// Re-run one stage in eval mode from a given input map (tap-consistency
    /// checks and attention exports).
    pub fn stage_forward_eval(&self, stage_index: usize, x: &Array4<F>) -> Result<Array4<F>> {
        let stage = self.stages.get(stage_index).ok_or_else(|| {
            LfmaError::Argument(format!("no stage {stage_index}"))
        })?;
        let mut cur = x.clone();
        for block in stage {
            cur = block.forward_eval(&cur.view());
        }
        Ok(cur)
    }

    /// Eval-mode classifier over a final-stage feature map.
    pub fn classify_features_eval(&self, x: &Array4<F>) -> Array2<F> {
        let pooled = global_avg_pool(&x.view());
        self.fc.forward_eval(&pooled.view())
    }

    /// Backward after a training forward. `grad_logits` is dLoss/dlogits;
    /// `grad_taps[k]`, when present, is the gradient flowing into block
    /// `k`'s *stored* (post-mask) feature map from an auxiliary head.
    /// Accumulates parameter gradients.
    pub fn backward(
        &mut self,
        grad_logits: &Array2<F>,
        grad_taps: &[Option<Array4<F>>],
    ) -> Result<()> {
        if grad_taps.len() != self.topology.num_blocks {
            return Err(LfmaError::Shape(format!(
                "got {} tap gradients for {} blocks",
                grad_taps.len(),
                self.topology.num_blocks
            )));
        }
        let dpool = self.fc.backward(grad_logits);
        let (h, w) = self.last_hw;
        let mut g = global_avg_pool_backward(&dpool, h, w);
        for i in (0..self.stages.len()).rev() {
            if let Some(gt) = &grad_taps[i] {
                if gt.dim() != g.dim() {
                    return Err(LfmaError::Shape(format!(
                        "tap gradient {i} has shape {:?}, expected {:?}",
                        gt.dim(),
                        g.dim()
                    )));
                }
                g += gt;
            }
            // The mask multiplied the stage output, so it gates the gradient.
            if let Some(mask) = self.saved_masks[i].take() {
                apply_cutout(&mut g, &mask)?;
            }
            for j in (0..self.stages[i].len()).rev() {
                g = self.stages[i][j].backward(&g);
            }
        }
        self.stem.backward(&g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.stem.unit.zero_grad();
        for stage in &mut self.stages {
            for block in stage {
                block.zero_grad();
            }
        }
        self.fc.zero_grad();
    }

    /// Trainable parameter count (batch-norm buffers excluded).
    pub fn param_count(&self) -> usize {
        self.stem.unit.param_count()
            + self
                .stages
                .iter()
                .flatten()
                .map(ResBlock::param_count)
                .sum::<usize>()
            + self.fc.param_count()
    }

    /// All trainable parameters with their gradients, in a stable order.
    pub fn params_mut(&mut self) -> Vec<Param<'_, F>> {
        let mut out = Vec::new();
        self.stem.unit.push_params("backbone.stem", &mut out);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.push_params(&format!("backbone.stage{i}.block{j}"), &mut out);
            }
        }
        out.push(Param {
            name: "backbone.fc.weight".into(),
            kind: ParamKind::Weight,
            value: self.fc.weight.view_mut().into_dyn(),
            grad: self.fc.grad_weight.view_mut().into_dyn(),
        });
        out.push(Param {
            name: "backbone.fc.bias".into(),
            kind: ParamKind::Bias,
            value: self.fc.bias.view_mut().into_dyn(),
            grad: self.fc.grad_bias.view_mut().into_dyn(),
        });
        out
    }

    /// Named parameters and buffers for checkpointing.
    pub fn state(&self) -> Vec<(String, ArrayD<F>)> {
        let mut out = Vec::new();
        self.stem.unit.push_state("backbone.stem", &mut out);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, block) in stage.iter().enumerate() {
                block.push_state(&format!("backbone.stage{i}.block{j}"), &mut out);
            }
        }
        out.push(("backbone.fc.weight".into(), self.fc.weight.clone().into_dyn()));
        out.push(("backbone.fc.bias".into(), self.fc.bias.clone().into_dyn()));
        out
    }

    /// Restore parameters and buffers. Every backbone tensor must be
    /// present with a matching shape; unknown `backbone.*` names are
    /// rejected as a corruption guard.
    pub fn load_state(&mut self, map: &BTreeMap<String, ArrayD<F>>) -> Result<()> {
        let expected: std::collections::BTreeSet<String> =
            self.state().into_iter().map(|(n, _)| n).collect();
        for key in map.keys() {
            if key.starts_with("backbone.") && !expected.contains(key) {
                return Err(LfmaError::Checkpoint(format!(
                    "unexpected backbone tensor '{key}'"
                )));
            }
        }
        self.stem.unit.load_state("backbone.stem", map)?;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, block) in stage.iter_mut().enumerate() {
                block.load_state(&format!("backbone.stage{i}.block{j}"), map)?;
            }
        }
        load_into(map, "backbone.fc.weight", &mut self.fc.weight.view_mut().into_dyn())?;
        load_into(map, "backbone.fc.bias", &mut self.fc.bias.view_mut().into_dyn())?;
        Ok(())
    }
}

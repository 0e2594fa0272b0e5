//! Auxiliary classifier heads: per-block modules mapping an intermediate
//! feature map to class logits and a softened distribution.
//!
//! The default head for block `k` of `n` stacks `n-1-k` stride-2
//! convolution+norm+ReLU units — enough to bring the map down to the final
//! block's spatial size, giving shallow blocks proportionally more head
//! capacity — then global average pooling and one fully connected layer.
//! A pool-only variant skips the convolution stack. Heads train jointly
//! with the backbone and are stripped for inference by dropping every
//! parameter under the `heads.` namespace.

use crate::backbone::{load_into, BlockTopology, ConvBn};
use crate::error::{LfmaError, Result};
use crate::losses::softmax_with_temperature;
use crate::nn::ops::{global_avg_pool, global_avg_pool_backward, relu, relu_backward};
use crate::nn::{Linear, Param, ParamKind, Scalar};
use crate::rng::{stream_rng, Stream};
use ndarray::{Array2, Array4, ArrayD};
use std::collections::BTreeMap;

/// How a head reduces its feature map before the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReducerKind {
    /// Stride-2 conv+norm+ReLU units down to the last block's resolution.
    ConvStack,
    /// Global average pooling straight away.
    PoolOnly,
}

/// Per-head build parameters.
#[derive(Clone, Debug)]
pub struct HeadSpec {
    /// Which block this head taps; never the final block (its prediction
    /// is the backbone's own).
    pub block_index: usize,
    pub reducer: ReducerKind,
    /// First conv-stack unit's output channels; later units double it.
    /// `None` doubles the tapped block's own channel count instead.
    pub hidden_channels: Option<usize>,
    pub num_classes: usize,
}

/// Template applied to every non-final block by [`build_heads`].
#[derive(Clone, Debug)]
pub struct HeadTemplate {
    pub reducer: ReducerKind,
    pub hidden_channels: Option<usize>,
}

impl Default for HeadTemplate {
    fn default() -> Self {
        HeadTemplate { reducer: ReducerKind::ConvStack, hidden_channels: None }
    }
}

/// Logits and softened distribution from one head on one batch.
#[derive(Clone, Debug)]
pub struct HeadOutput<F: Scalar> {
    pub logits: Array2<F>,
    pub distribution: Array2<F>,
}

/// One auxiliary head attached to block `block_index`.
#[derive(Clone, Debug)]
pub struct AuxHead<F: Scalar> {
    pub block_index: usize,
    input_shape: (usize, usize, usize),
    reducers: Vec<ConvBn<F>>,
    fc: Linear<F>,
    // Training caches.
    acts: Vec<Array4<F>>,
    last_hw: (usize, usize),
}

/// Build one head for a validated spec against the topology it taps.
pub fn build_head<F: Scalar>(
    spec: &HeadSpec,
    topology: &BlockTopology,
    seed: u64,
) -> Result<AuxHead<F>> {
    let n = topology.num_blocks;
    if spec.block_index + 1 >= n {
        return Err(LfmaError::Argument(format!(
            "head block_index {} must address a non-final block (0..={})",
            spec.block_index,
            n.saturating_sub(2)
        )));
    }
    if spec.hidden_channels == Some(0) {
        return Err(LfmaError::Argument("hidden_channels must be positive".into()));
    }
    if spec.num_classes != topology.num_classes {
        return Err(LfmaError::Argument(format!(
            "head has {} classes but the backbone predicts {}",
            spec.num_classes, topology.num_classes
        )));
    }
    let (c, h, w) = topology.per_block_output_shape[spec.block_index];
    let mut rng = stream_rng(seed, Stream::HeadInit, spec.block_index as u64, 0);

    let mut reducers = Vec::new();
    let (mut cur_c, mut cur_h, mut cur_w) = (c, h, w);
    if spec.reducer == ReducerKind::ConvStack {
        let depth = n - 1 - spec.block_index;
        for j in 0..depth {
            let out_c = match spec.hidden_channels {
                Some(hc) => hc << j,
                None => c << (j + 1),
            };
            reducers.push(ConvBn::new(cur_c, out_c, 3, 2, 1, &mut rng));
            cur_c = out_c;
            cur_h = (cur_h + 2 - 3) / 2 + 1;
            cur_w = (cur_w + 2 - 3) / 2 + 1;
        }
    }
    let fc = Linear::new(cur_c, spec.num_classes, &mut rng);
    Ok(AuxHead {
        block_index: spec.block_index,
        input_shape: (c, h, w),
        reducers,
        fc,
        acts: Vec::new(),
        last_hw: (cur_h, cur_w),
    })
}

/// One head per non-final block, all from the same template.
pub fn build_heads<F: Scalar>(
    topology: &BlockTopology,
    template: &HeadTemplate,
    seed: u64,
) -> Result<Vec<AuxHead<F>>> {
    (0..topology.num_blocks - 1)
        .map(|k| {
            build_head(
                &HeadSpec {
                    block_index: k,
                    reducer: template.reducer,
                    hidden_channels: template.hidden_channels,
                    num_classes: topology.num_classes,
                },
                topology,
                seed,
            )
        })
        .collect()
}

/// Evaluate a head and soften its logits at the given temperature.
pub fn head_forward<F: Scalar>(
    head: &AuxHead<F>,
    features: &Array4<F>,
    temperature: F,
) -> Result<HeadOutput<F>> {
    let logits = head.forward_eval(features)?;
    let distribution = softmax_with_temperature(&logits.view(), temperature)?;
    Ok(HeadOutput { logits, distribution })
}

impl<F: Scalar> AuxHead<F> {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn check_features(&self, features: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = features.dim();
        if (c, h, w) != self.input_shape {
            return Err(LfmaError::Shape(format!(
                "head {} got features ({c}, {h}, {w}), expects {:?}",
                self.block_index, self.input_shape
            )));
        }
        Ok(())
    }

    /// Training forward (batch statistics, caches kept).
    pub fn forward_train(&mut self, features: &Array4<F>) -> Result<Array2<F>> {
        self.check_features(features)?;
        self.acts.clear();
        let mut x = features.clone();
        let nred = self.reducers.len();
        for unit in self.reducers.iter_mut() {
            let y = relu(&unit.forward(&x, true));
            self.acts.push(y.clone());
            x = y;
        }
        debug_assert_eq!(self.acts.len(), nred);
        let (_, _, h, w) = x.dim();
        self.last_hw = (h, w);
        let pooled = global_avg_pool(&x.view());
        Ok(self.fc.forward(&pooled, true))
    }

    /// Evaluation forward (running statistics, nothing cached).
    pub fn forward_eval(&self, features: &Array4<F>) -> Result<Array2<F>> {
        self.check_features(features)?;
        let mut x = features.clone();
        for unit in &self.reducers {
            x = relu(&unit.forward_eval(&x.view()));
        }
        let pooled = global_avg_pool(&x.view());
        Ok(self.fc.forward_eval(&pooled.view()))
    }

    /// Backward from dLoss/dlogits to dLoss/dfeatures; accumulates this
    /// head's parameter gradients.
    pub fn backward(&mut self, grad_logits: &Array2<F>) -> Array4<F> {
        let dpool = self.fc.backward(grad_logits);
        let (h, w) = self.last_hw;
        let mut g = global_avg_pool_backward(&dpool, h, w);
        for j in (0..self.reducers.len()).rev() {
            g = relu_backward(&g, &self.acts[j]);
            g = self.reducers[j].backward(&g);
        }
        self.acts.clear();
        g
    }

    pub fn zero_grads(&mut self) {
        for unit in &mut self.reducers {
            unit.zero_grad();
        }
        self.fc.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.reducers.iter().map(ConvBn::param_count).sum::<usize>() + self.fc.param_count()
    }

    fn prefix(&self) -> String {
        format!("heads.{}", self.block_index)
    }

    pub fn params_mut(&mut self) -> Vec<Param<'_, F>> {
        let prefix = self.prefix();
        let mut out = Vec::new();
        for (j, unit) in self.reducers.iter_mut().enumerate() {
            unit.push_params(&format!("{prefix}.reduce{}", j + 1), &mut out);
        }
        out.push(Param {
            name: format!("{prefix}.fc.weight"),
            kind: ParamKind::Weight,
            value: self.fc.weight.view_mut().into_dyn(),
            grad: self.fc.grad_weight.view_mut().into_dyn(),
        });
        out.push(Param {
            name: format!("{prefix}.fc.bias"),
            kind: ParamKind::Bias,
            value: self.fc.bias.view_mut().into_dyn(),
            grad: self.fc.grad_bias.view_mut().into_dyn(),
        });
        out
    }

    pub fn state(&self) -> Vec<(String, ArrayD<F>)> {
        let prefix = self.prefix();
        let mut out = Vec::new();
        for (j, unit) in self.reducers.iter().enumerate() {
            unit.push_state(&format!("{prefix}.reduce{}", j + 1), &mut out);
        }
        out.push((format!("{prefix}.fc.weight"), self.fc.weight.clone().into_dyn()));
        out.push((format!("{prefix}.fc.bias"), self.fc.bias.clone().into_dyn()));
        out
    }

    pub fn load_state(&mut self, map: &BTreeMap<String, ArrayD<F>>) -> Result<()> {
        let prefix = self.prefix();
        for (j, unit) in self.reducers.iter_mut().enumerate() {
            unit.load_state(&format!("{prefix}.reduce{}", j + 1), map)?;
        }
        load_into(map, &format!("{prefix}.fc.weight"), &mut self.fc.weight.view_mut().into_dyn())?;
        load_into(map, &format!("{prefix}.fc.bias"), &mut self.fc.bias.view_mut().into_dyn())?;
        Ok(())
    }
}

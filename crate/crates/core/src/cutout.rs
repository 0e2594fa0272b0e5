//! Feature-map cutout: per-sample binary masks that zero a fixed fraction of
//! spatial positions in a block's output feature map, coherently across
//! channels, before the next block consumes it.

use crate::backbone::BlockTopology;
use crate::error::{LfmaError, Result};
use crate::nn::Scalar;
use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Configuration for feature-map cutout.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CutoutConfig {
    /// Master switch; when off no plans are generated.
    pub enabled: bool,
    /// Fraction of spatial positions to erase, in `[0, 1)`.
    pub erase_fraction: f64,
    /// Block indices to mask. `None` selects every non-final block.
    pub block_policy: Option<Vec<usize>>,
    /// Draw an independent mask per sample (default) or one mask shared by
    /// the whole batch.
    pub per_sample: bool,
}

impl Default for CutoutConfig {
    fn default() -> Self {
        CutoutConfig {
            enabled: false,
            erase_fraction: 0.25,
            block_policy: None,
            per_sample: true,
        }
    }
}

impl CutoutConfig {
    /// Resolve the block policy against a topology, validating indices.
    pub fn resolve_blocks(&self, topology: &BlockTopology) -> Result<Vec<usize>> {
        let n = topology.num_blocks;
        match &self.block_policy {
            None => Ok((0..n.saturating_sub(1)).collect()),
            Some(blocks) => {
                let mut sorted: Vec<usize> = blocks.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if let Some(&bad) = sorted.iter().find(|&&b| b >= n) {
                    return Err(LfmaError::Argument(format!(
                        "cutout block_policy index {bad} out of range; valid blocks are 0..{n}"
                    )));
                }
                Ok(sorted)
            }
        }
    }
}

/// Number of positions to erase on an `h` x `w` map: `round(fraction * h * w)`,
/// clamped to the map size.
pub fn erase_count(erase_fraction: f64, h: usize, w: usize) -> usize {
    let total = h * w;
    ((erase_fraction * total as f64).round() as usize).min(total)
}

/// One mask per selected block, each of shape `(batch, 1, h, w)` with entries
/// in {0, 1}. Masks broadcast over channels when applied.
#[derive(Clone, Debug)]
pub struct CutoutPlan<F: Scalar> {
    masks: BTreeMap<usize, Array4<F>>,
}

impl<F: Scalar> CutoutPlan<F> {
    /// A plan with no masked blocks (useful for tests and manual plans).
    pub fn empty() -> Self {
        CutoutPlan {
            masks: BTreeMap::new(),
        }
    }

    pub fn mask_for(&self, block_index: usize) -> Option<&Array4<F>> {
        self.masks.get(&block_index)
    }

    pub fn blocks(&self) -> impl Iterator<Item = usize> + '_ {
        self.masks.keys().copied()
    }

    pub fn masks_mut(&mut self) -> &mut BTreeMap<usize, Array4<F>> {
        &mut self.masks
    }
}

/// Draw fresh masks for one batch. Positions are sampled without replacement,
/// so exactly `erase_count` distinct positions are zeroed per (sample, block).
pub fn generate_cutout_plan<F: Scalar>(
    topology: &BlockTopology,
    config: &CutoutConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CutoutPlan<F>> {
    if !(0.0..1.0).contains(&config.erase_fraction) {
        return Err(LfmaError::Argument(format!(
            "erase_fraction must lie in [0, 1), got {}",
            config.erase_fraction
        )));
    }
    if batch_size == 0 {
        return Err(LfmaError::Argument("batch_size must be positive".into()));
    }
    let blocks = config.resolve_blocks(topology)?;
    let mut masks = BTreeMap::new();
    for block in blocks {
        let (_, h, w) = topology.per_block_output_shape[block];
        let k = erase_count(config.erase_fraction, h, w);
        let mut mask = Array4::<F>::ones((batch_size, 1, h, w));
        if config.per_sample {
            for s in 0..batch_size {
                erase_into(&mut mask, s, h, w, k, rng);
            }
        } else {
            let picks = rand::seq::index::sample(rng, h * w, k);
            for s in 0..batch_size {
                for pos in picks.iter() {
                    mask[(s, 0, pos / w, pos % w)] = F::zero();
                }
            }
        }
        masks.insert(block, mask);
    }
    Ok(CutoutPlan { masks })
}

fn erase_into<F: Scalar>(
    mask: &mut Array4<F>,
    sample: usize,
    h: usize,
    w: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) {
    for pos in rand::seq::index::sample(rng, h * w, k) {
        mask[(sample, 0, pos / w, pos % w)] = F::zero();
    }
}

/// Multiply a feature map `(n, c, h, w)` by a mask `(n, 1, h, w)` in place.
/// The same spatial pattern is applied to every channel of a sample.
pub fn apply_cutout<F: Scalar>(features: &mut Array4<F>, mask: &Array4<F>) -> Result<()> {
    let (n, _, h, w) = features.dim();
    let expected = (n, 1, h, w);
    if mask.dim() != expected {
        return Err(LfmaError::Shape(format!(
            "cutout mask shape {:?} does not match features {:?} (want {:?})",
            mask.dim(),
            features.dim(),
            expected
        )));
    }
    *features *= &mask.broadcast(features.dim()).expect("mask broadcasts");
    Ok(())
}

//! The distillation objective: temperature softmax, weighted ensemble
//! teacher, KL and cross-entropy terms, and their closed-form gradients.
//!
//! The combined objective over a batch is
//!
//! ```text
//! total = alpha * KLD(teacher || backbone_T)
//!       + beta  * mean_k KLD(teacher || head_k_T)
//!       + gamma * CE(labels, backbone)
//!       + delta * mean_k CE(labels, head_k)
//! ```
//!
//! where the teacher is the weighted average of the heads' temperature-
//! softened distributions and is treated as a constant: no gradient flows
//! through it, otherwise the head-side KLD term would be minimized by
//! collapsing all heads together instead of learning. Both KLD terms carry
//! the usual `T^2` factor so their gradient magnitude stays comparable to
//! the hard-label terms; the factor can be disabled for ablation.

use crate::error::{LfmaError, Result};
use crate::nn::{fromf, Scalar};
use ndarray::{Array2, ArrayView2, Axis};

/// Floor applied inside logarithms of *predicted* probabilities so that a
/// collapsed student cannot produce infinities. Teacher-side zeros skip
/// their terms entirely (the `p ln p` limit at zero).
pub const PROB_FLOOR: f64 = 1e-12;

/// Scalar weights of the four loss terms, the softening temperature, and
/// the ensemble weighting of the teacher.
#[derive(Clone, Debug)]
pub struct LossWeights<F: Scalar> {
    pub alpha: F,
    pub beta: F,
    pub gamma: F,
    pub delta: F,
    pub temperature: F,
    /// Per-head teacher weights. `None` means uniform `1/N`; when given,
    /// the vector must be nonnegative, sum to 1 (±1e-9), and match the
    /// number of heads.
    pub ensemble_weights: Option<Vec<F>>,
    /// Multiply the KLD terms by `temperature^2` (on by default).
    pub t_squared: bool,
}

impl<F: Scalar> Default for LossWeights<F> {
    fn default() -> Self {
        LossWeights {
            alpha: F::one(),
            beta: F::one(),
            gamma: F::one(),
            delta: F::one(),
            temperature: fromf(3.0),
            ensemble_weights: None,
            t_squared: true,
        }
    }
}

impl<F: Scalar> LossWeights<F> {
    /// Effective multiplier applied to each KLD component.
    fn kld_scale(&self) -> F {
        if self.t_squared {
            self.temperature * self.temperature
        } else {
            F::one()
        }
    }

    /// Resolve the teacher weights for `n` heads (uniform by default).
    pub fn teacher_weights(&self, n: usize) -> Result<Vec<F>> {
        match &self.ensemble_weights {
            None => Ok(uniform_weights(n)),
            Some(w) => {
                if w.len() != n {
                    return Err(LfmaError::Argument(format!(
                        "ensemble_weights has {} entries for {n} heads",
                        w.len()
                    )));
                }
                Ok(w.clone())
            }
        }
    }
}

/// The four loss components (already carrying the `T^2` factor where it
/// applies) and their weighted sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown<F: Scalar> {
    pub kld_backbone: F,
    pub kld_heads: F,
    pub ce_backbone: F,
    pub ce_heads: F,
    pub total: F,
}

/// Everything a training step needs from one objective evaluation.
#[derive(Clone, Debug)]
pub struct DistillOutputs<F: Scalar> {
    pub breakdown: LossBreakdown<F>,
    /// The ensembled teacher distribution, `(batch, classes)`.
    pub teacher: Array2<F>,
    /// Gradient of the weighted total w.r.t. the backbone logits.
    pub grad_backbone: Array2<F>,
    /// Gradient of the weighted total w.r.t. each head's logits.
    pub grad_heads: Vec<Array2<F>>,
}

/// Row-wise temperature softmax with max subtraction: each row of the
/// result is `exp(z_i / t) / sum_j exp(z_j / t)`.
pub fn softmax_with_temperature<F: Scalar>(logits: &ArrayView2<'_, F>, t: F) -> Result<Array2<F>> {
    if t <= F::zero() {
        return Err(LfmaError::Argument(format!(
            "temperature must be positive, got {t}"
        )));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(LfmaError::Argument(format!(
            "softmax input contains non-finite logit {bad}"
        )));
    }
    Ok(softmax_rows(logits, t))
}

/// Unchecked softmax core shared by the validated entry point and the
/// already-validated objective paths.
fn softmax_rows<F: Scalar>(logits: &ArrayView2<'_, F>, t: F) -> Array2<F> {
    let mut out = Array2::zeros(logits.raw_dim());
    for (row, mut orow) in logits.rows().into_iter().zip(out.rows_mut()) {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for (&z, o) in row.iter().zip(orow.iter_mut()) {
            let e = ((z - max) / t).exp();
            *o = e;
            denom += e;
        }
        orow.mapv_inplace(|e| e / denom);
    }
    out
}

/// Weighted average of probability distributions. Weights must be
/// nonnegative and sum to one, so averaging rows that each sum to one
/// yields rows that again sum to one — this is the ensemble teacher when
/// fed the heads' softened predictions.
pub fn ensemble_distributions<F: Scalar>(
    dists: &[Array2<F>],
    weights: &[F],
) -> Result<Array2<F>> {
    if dists.is_empty() {
        return Err(LfmaError::Argument(
            "ensemble requires at least one distribution".into(),
        ));
    }
    if dists.len() != weights.len() {
        return Err(LfmaError::Argument(format!(
            "ensemble got {} distributions but {} weights",
            dists.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = weights.iter().find(|&&w| w < F::zero()) {
        return Err(LfmaError::Argument(format!(
            "ensemble weights must be nonnegative, got {bad}"
        )));
    }
    let sum: F = weights.iter().cloned().sum();
    if (sum - F::one()).abs() > fromf(1e-9) {
        return Err(LfmaError::Argument(format!(
            "ensemble weights must sum to 1, got {sum}"
        )));
    }
    let dim = dists[0].raw_dim();
    let mut out = Array2::<F>::zeros(dim);
    for (d, &w) in dists.iter().zip(weights) {
        if d.raw_dim() != dim {
            return Err(LfmaError::Argument(format!(
                "ensemble members disagree on shape: {:?} vs {:?}",
                dim,
                d.raw_dim()
            )));
        }
        out.scaled_add(w, d);
    }
    Ok(out)
}

/// Uniform ensemble weights `1/n`.
pub fn uniform_weights<F: Scalar>(n: usize) -> Vec<F> {
    vec![F::one() / fromf::<F>(n as f64); n]
}

/// Mean over the batch of `KL(p || q) = sum_i p_i (ln p_i - ln q_i)`.
/// Zero-probability teacher entries contribute zero; student entries are
/// floored at [`PROB_FLOOR`] inside the logarithm.
pub fn kld_loss<F: Scalar>(p: &ArrayView2<'_, F>, q: &ArrayView2<'_, F>) -> Result<F> {
    if p.dim() != q.dim() {
        return Err(LfmaError::Argument(format!(
            "kld shapes disagree: {:?} vs {:?}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(kld_unchecked(p, q))
}

fn kld_unchecked<F: Scalar>(p: &ArrayView2<'_, F>, q: &ArrayView2<'_, F>) -> F {
    let eps = fromf::<F>(PROB_FLOOR);
    let mut acc = F::zero();
    for (prow, qrow) in p.rows().into_iter().zip(q.rows()) {
        for (&pv, &qv) in prow.iter().zip(qrow.iter()) {
            if pv > F::zero() {
                acc += pv * (pv.ln() - qv.max(eps).ln());
            }
        }
    }
    acc / fromf(p.nrows() as f64)
}

/// Mean over the batch of `-sum_i target_i ln(predicted_i)`, with the same
/// probability floor. One-hot targets make this the negative log-likelihood
/// of the true class; soft targets are equally valid.
pub fn ce_loss<F: Scalar>(target: &ArrayView2<'_, F>, predicted: &ArrayView2<'_, F>) -> Result<F> {
    if target.dim() != predicted.dim() {
        return Err(LfmaError::Argument(format!(
            "ce shapes disagree: {:?} vs {:?}",
            target.dim(),
            predicted.dim()
        )));
    }
    let eps = fromf::<F>(PROB_FLOOR);
    let mut acc = F::zero();
    for (trow, qrow) in target.rows().into_iter().zip(predicted.rows()) {
        for (&tv, &qv) in trow.iter().zip(qrow.iter()) {
            if tv > F::zero() {
                acc -= tv * qv.max(eps).ln();
            }
        }
    }
    Ok(acc / fromf(target.nrows() as f64))
}

/// Cross-entropy against integer class labels (one-hot targets).
pub fn ce_loss_labels<F: Scalar>(labels: &[usize], predicted: &ArrayView2<'_, F>) -> Result<F> {
    if labels.len() != predicted.nrows() {
        return Err(LfmaError::Argument(format!(
            "ce got {} labels for batch of {}",
            labels.len(),
            predicted.nrows()
        )));
    }
    let eps = fromf::<F>(PROB_FLOOR);
    let mut acc = F::zero();
    for (row, &y) in predicted.rows().into_iter().zip(labels) {
        if y >= predicted.ncols() {
            return Err(LfmaError::Argument(format!(
                "label {y} out of range for {} classes",
                predicted.ncols()
            )));
        }
        acc -= row[y].max(eps).ln();
    }
    Ok(acc / fromf(labels.len() as f64))
}

fn check_objective_inputs<F: Scalar>(
    backbone_logits: &Array2<F>,
    head_logits: &[Array2<F>],
    labels: &[usize],
    w: &LossWeights<F>,
) -> Result<()> {
    let (b, c) = backbone_logits.dim();
    if head_logits.is_empty() {
        return Err(LfmaError::Argument(
            "distillation objective requires at least one auxiliary head".into(),
        ));
    }
    if w.temperature <= F::zero() {
        return Err(LfmaError::Argument(format!(
            "temperature must be positive, got {}",
            w.temperature
        )));
    }
    if labels.len() != b {
        return Err(LfmaError::Shape(format!(
            "label count {} does not match batch size {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(LfmaError::Argument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    for (k, h) in head_logits.iter().enumerate() {
        if h.dim() != (b, c) {
            return Err(LfmaError::Shape(format!(
                "head {k} logits have shape {:?}, expected ({b}, {c})",
                h.dim()
            )));
        }
    }
    Ok(())
}

/// Compute the loss breakdown and the teacher distribution. The teacher is
/// the ensemble of the heads' temperature-softened outputs under
/// `weights.ensemble_weights` (uniform by default).
pub fn lfma_objective<F: Scalar>(
    backbone_logits: &Array2<F>,
    head_logits: &[Array2<F>],
    labels: &[usize],
    w: &LossWeights<F>,
) -> Result<(LossBreakdown<F>, Array2<F>)> {
    check_objective_inputs(backbone_logits, head_logits, labels, w)?;
    let soft_heads: Vec<Array2<F>> = head_logits
        .iter()
        .map(|h| softmax_rows(&h.view(), w.temperature))
        .collect();
    let teacher = ensemble_distributions(&soft_heads, &w.teacher_weights(soft_heads.len())?)?;
    let breakdown =
        objective_with_teacher(backbone_logits, head_logits, &teacher, &soft_heads, labels, w);
    Ok((breakdown, teacher))
}

/// Loss value with an externally supplied (frozen) teacher. This is the
/// function that finite differences must probe: the training gradient is
/// defined with the teacher held constant, so the objective being
/// differentiated must not rebuild the teacher from the perturbed heads.
pub fn objective_value_frozen_teacher<F: Scalar>(
    backbone_logits: &Array2<F>,
    head_logits: &[Array2<F>],
    teacher: &Array2<F>,
    labels: &[usize],
    w: &LossWeights<F>,
) -> Result<F> {
    check_objective_inputs(backbone_logits, head_logits, labels, w)?;
    if teacher.dim() != backbone_logits.dim() {
        return Err(LfmaError::Shape(format!(
            "teacher shape {:?} does not match logits {:?}",
            teacher.dim(),
            backbone_logits.dim()
        )));
    }
    let soft_heads: Vec<Array2<F>> = head_logits
        .iter()
        .map(|h| softmax_rows(&h.view(), w.temperature))
        .collect();
    Ok(objective_with_teacher(backbone_logits, head_logits, teacher, &soft_heads, labels, w).total)
}

fn objective_with_teacher<F: Scalar>(
    backbone_logits: &Array2<F>,
    head_logits: &[Array2<F>],
    teacher: &Array2<F>,
    soft_heads: &[Array2<F>],
    labels: &[usize],
    w: &LossWeights<F>,
) -> LossBreakdown<F> {
    let t = w.temperature;
    let kld_scale = w.kld_scale();
    let nheads = fromf::<F>(head_logits.len() as f64);

    let backbone_soft = softmax_rows(&backbone_logits.view(), t);
    let backbone_hard = softmax_rows(&backbone_logits.view(), F::one());

    let kld_backbone = kld_scale * kld_unchecked(&teacher.view(), &backbone_soft.view());
    let mut kld_heads = F::zero();
    let mut ce_heads = F::zero();
    for (h, soft) in head_logits.iter().zip(soft_heads) {
        kld_heads += kld_unchecked(&teacher.view(), &soft.view());
        let hard = softmax_rows(&h.view(), F::one());
        ce_heads += ce_loss_labels(labels, &hard.view()).expect("validated labels");
    }
    let kld_heads = kld_scale * kld_heads / nheads;
    let ce_heads = ce_heads / nheads;
    let ce_backbone = ce_loss_labels(labels, &backbone_hard.view()).expect("validated labels");

    let total = w.alpha * kld_backbone
        + w.beta * kld_heads
        + w.gamma * ce_backbone
        + w.delta * ce_heads;
    LossBreakdown { kld_backbone, kld_heads, ce_backbone, ce_heads, total }
}

/// Loss breakdown, teacher, and exact logit gradients in one pass.
///
/// With `S^T` a temperature softmax, `S^1` the ordinary softmax, `P` the
/// (detached) teacher, `Y` one-hot labels, batch size `B` and `K` heads:
///
/// ```text
/// d total / d backbone_logits = alpha*c/(B*T) * (S_b^T - P) + gamma/B * (S_b^1 - Y)
/// d total / d head_k_logits   = beta*c*u_k/(B*T) * (S_k^T - P) + delta/(K*B) * (S_k^1 - Y)
/// ```
///
/// where `c` is `T^2` (default) or `1` when the `T^2` factor is disabled,
/// and `u_k` is head `k`'s share of the head-KLD mean (`1/K`).
pub fn distill_forward_backward<F: Scalar>(
    backbone_logits: &Array2<F>,
    head_logits: &[Array2<F>],
    labels: &[usize],
    w: &LossWeights<F>,
) -> Result<DistillOutputs<F>> {
    check_objective_inputs(backbone_logits, head_logits, labels, w)?;
    let (b, _c) = backbone_logits.dim();
    let t = w.temperature;
    let kld_scale = w.kld_scale();
    let k = head_logits.len();
    let inv_b = F::one() / fromf::<F>(b as f64);
    let inv_k = F::one() / fromf::<F>(k as f64);

    let soft_heads: Vec<Array2<F>> = head_logits
        .iter()
        .map(|h| softmax_rows(&h.view(), t))
        .collect();
    let teacher = ensemble_distributions(&soft_heads, &w.teacher_weights(k)?)?;
    let breakdown =
        objective_with_teacher(backbone_logits, head_logits, &teacher, &soft_heads, labels, w);

    // Backbone gradient.
    let backbone_soft = softmax_rows(&backbone_logits.view(), t);
    let backbone_hard = softmax_rows(&backbone_logits.view(), F::one());
    let kd_coef = w.alpha * kld_scale / t * inv_b;
    let ce_coef = w.gamma * inv_b;
    let mut grad_backbone = (&backbone_soft - &teacher) * kd_coef;
    add_ce_grad(&mut grad_backbone, &backbone_hard, labels, ce_coef);

    // Head gradients. The teacher is detached, so each head only sees its
    // own softmax through the KLD term.
    let kd_coef_h = w.beta * kld_scale / t * inv_b * inv_k;
    let ce_coef_h = w.delta * inv_b * inv_k;
    let grad_heads: Vec<Array2<F>> = head_logits
        .iter()
        .zip(&soft_heads)
        .map(|(h, soft)| {
            let hard = softmax_rows(&h.view(), F::one());
            let mut g = (soft - &teacher) * kd_coef_h;
            add_ce_grad(&mut g, &hard, labels, ce_coef_h);
            g
        })
        .collect();

    Ok(DistillOutputs { breakdown, teacher, grad_backbone, grad_heads })
}

/// Plain cross-entropy loss and its logit gradient scaled by `coef`:
/// `coef * (softmax - Y)`. Used directly by the non-distilling modes.
pub fn ce_grad_from_logits<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
    coef: F,
) -> Result<(F, Array2<F>)> {
    let hard = softmax_rows(&logits.view(), F::one());
    let loss = ce_loss_labels(labels, &hard.view())?;
    let mut g = Array2::zeros(logits.raw_dim());
    add_ce_grad(&mut g, &hard, labels, coef);
    Ok((loss, g))
}

fn add_ce_grad<F: Scalar>(g: &mut Array2<F>, hard: &Array2<F>, labels: &[usize], coef: F) {
    g.scaled_add(coef, hard);
    for (i, &y) in labels.iter().enumerate() {
        g[[i, y]] -= coef;
    }
}

/// Argmax over the class axis; ties resolve to the lowest index.
pub fn predictions<F: Scalar>(logits: &ArrayView2<'_, F>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

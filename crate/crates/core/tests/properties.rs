//! Randomized invariant checks for the loss algebra, cutout masks, data
//! subsetting, and the learning-rate schedule.

use lfma_core::ckpt::{load_checkpoint, save_checkpoint, Checkpoint};
use lfma_core::cutout::{erase_count, generate_cutout_plan, CutoutConfig};
use lfma_core::backbone::BlockTopology;
use lfma_core::data::stratified_subset;
use lfma_core::losses::{
    ce_grad_from_logits, distill_forward_backward, lfma_objective, softmax_with_temperature,
    LossWeights,
};
use lfma_core::train::{lr_for_epoch, TrainConfig};
use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random (batch, classes, heads) plus matching logits and labels.
#[derive(Debug, Clone)]
struct Instance {
    backbone: Array2<f64>,
    heads: Vec<Array2<f64>>,
    labels: Vec<usize>,
}

fn instance_strategy() -> impl Strategy<Value = Instance> {
    (1usize..=4, 2usize..=8, 1usize..=4).prop_flat_map(|(b, c, k)| {
        let logits = proptest::collection::vec(-8.0f64..8.0, b * c);
        (
            logits.clone(),
            proptest::collection::vec(logits, k),
            proptest::collection::vec(0usize..c, b),
        )
            .prop_map(move |(bb, hs, labels)| Instance {
                backbone: Array2::from_shape_vec((b, c), bb).unwrap(),
                heads: hs
                    .into_iter()
                    .map(|h| Array2::from_shape_vec((b, c), h).unwrap())
                    .collect(),
                labels,
            })
    })
}

fn weights(alpha: f64, beta: f64, gamma: f64, delta: f64, t: f64) -> LossWeights<f64> {
    LossWeights {
        alpha,
        beta,
        gamma,
        delta,
        temperature: t,
        ensemble_weights: None,
        t_squared: true,
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn breakdown_components_are_nonnegative_and_total_is_linear(
        inst in instance_strategy(),
        alpha in 0.0f64..2.0,
        beta in 0.0f64..2.0,
        gamma in 0.0f64..2.0,
        delta in 0.0f64..2.0,
        t in 1.0f64..8.0,
    ) {
        let w = weights(alpha, beta, gamma, delta, t);
        let (bd, teacher) = lfma_objective(&inst.backbone, &inst.heads, &inst.labels, &w).unwrap();
        for (name, v) in [
            ("kld_backbone", bd.kld_backbone),
            ("kld_heads", bd.kld_heads),
            ("ce_backbone", bd.ce_backbone),
            ("ce_heads", bd.ce_heads),
        ] {
            prop_assert!(v >= -1e-12, "{name} = {v} negative");
        }
        let recombined = alpha * bd.kld_backbone + beta * bd.kld_heads
            + gamma * bd.ce_backbone + delta * bd.ce_heads;
        let denom = bd.total.abs().max(recombined.abs()).max(1e-12);
        prop_assert!((bd.total - recombined).abs() / denom <= 1e-6);
        for row in teacher.rows() {
            let sum: f64 = row.sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9, "teacher row sums to {sum}");
        }
    }

    #[test]
    fn identical_logits_zero_the_distillation_terms(
        inst in instance_strategy(),
        t in 1.0f64..8.0,
    ) {
        let clones: Vec<Array2<f64>> = vec![inst.backbone.clone(); inst.heads.len()];
        let w = weights(1.0, 1.0, 1.0, 1.0, t);
        let (bd, _) = lfma_objective(&inst.backbone, &clones, &inst.labels, &w).unwrap();
        // Averaging k identical distributions can round by an ulp, so the
        // divergence is only zero to within noise rather than bitwise.
        prop_assert!(bd.kld_backbone.abs() <= 1e-12, "kld_backbone = {}", bd.kld_backbone);
        prop_assert!(bd.kld_heads.abs() <= 1e-12, "kld_heads = {}", bd.kld_heads);
    }

    #[test]
    fn zeroed_distillation_weights_reduce_to_plain_gradients(
        inst in instance_strategy(),
        gamma in 0.1f64..2.0,
        delta in 0.1f64..2.0,
    ) {
        let b = inst.labels.len() as f64;
        let k = inst.heads.len() as f64;

        // alpha = beta = 0 is deep supervision: plain CE gradients all round.
        let dsn = distill_forward_backward(
            &inst.backbone, &inst.heads, &inst.labels, &weights(0.0, 0.0, gamma, delta, 3.0),
        ).unwrap();
        let (_, ce_bb) = ce_grad_from_logits(&inst.backbone, &inst.labels, gamma / b).unwrap();
        prop_assert!(max_abs_diff(&dsn.grad_backbone, &ce_bb) <= 1e-12);
        for (gh, head) in dsn.grad_heads.iter().zip(&inst.heads) {
            let (_, ce_h) = ce_grad_from_logits(head, &inst.labels, delta / (k * b)).unwrap();
            prop_assert!(max_abs_diff(gh, &ce_h) <= 1e-12);
        }

        // alpha = beta = delta = 0 is the plain classifier: heads untouched.
        let plain = distill_forward_backward(
            &inst.backbone, &inst.heads, &inst.labels, &weights(0.0, 0.0, gamma, 0.0, 3.0),
        ).unwrap();
        prop_assert!(max_abs_diff(&plain.grad_backbone, &ce_bb) <= 1e-12);
        for gh in &plain.grad_heads {
            prop_assert!(gh.iter().all(|v| *v == 0.0), "head gradient must vanish");
        }
    }

    #[test]
    fn teacher_is_detached_from_head_gradients(
        inst in instance_strategy(),
        alpha in 0.1f64..2.0,
        t in 1.0f64..8.0,
    ) {
        // Only the backbone KD term is active; since the teacher is held
        // constant, nothing may flow back into the heads.
        let out = distill_forward_backward(
            &inst.backbone, &inst.heads, &inst.labels, &weights(alpha, 0.0, 0.0, 0.0, t),
        ).unwrap();
        for gh in &out.grad_heads {
            prop_assert!(gh.iter().all(|v| *v == 0.0));
        }
        prop_assert!(out.grad_backbone.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn softmax_is_invariant_to_rowwise_shifts(
        inst in instance_strategy(),
        shift in -50.0f64..50.0,
        t in 1.0f64..8.0,
    ) {
        let shifted = &inst.backbone + shift;
        let a = softmax_with_temperature(&inst.backbone.view(), t).unwrap();
        let b = softmax_with_temperature(&shifted.view(), t).unwrap();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn cutout_masks_spend_exactly_the_erase_budget(
        seed in 0u64..1_000_000,
        frac in 0.0f64..0.9,
        h in 2usize..10,
        w in 2usize..10,
        batch in 1usize..6,
        per_sample in proptest::bool::ANY,
    ) {
        let topology = BlockTopology {
            num_blocks: 2,
            per_block_output_shape: vec![(3, h, w), (6, h / 2 + 1, w / 2 + 1)],
            num_classes: 4,
        };
        let config = CutoutConfig {
            enabled: true,
            erase_fraction: frac,
            block_policy: Some(vec![0]),
            per_sample,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = generate_cutout_plan::<f64>(&topology, &config, batch, &mut rng).unwrap();
        let mask = plan.mask_for(0).unwrap();
        let want = erase_count(frac, h, w);
        for s in 0..batch {
            let zeros = mask
                .index_axis(ndarray::Axis(0), s)
                .iter()
                .filter(|v| **v == 0.0)
                .count();
            prop_assert_eq!(zeros, want);
            prop_assert!(mask
                .index_axis(ndarray::Axis(0), s)
                .iter()
                .all(|v| *v == 0.0 || *v == 1.0));
        }
        if !per_sample {
            let first = mask.index_axis(ndarray::Axis(0), 0).to_owned();
            for s in 1..batch {
                prop_assert_eq!(&mask.index_axis(ndarray::Axis(0), s), &first.view());
            }
        }
    }

    #[test]
    fn stratified_subsets_are_balanced_sorted_and_deterministic(
        seed in 0u64..1_000_000,
        classes in 2usize..6,
        per_class_pool in 4usize..12,
        per_class_take in 1usize..4,
    ) {
        prop_assume!(per_class_take <= per_class_pool);
        // Interleaved labels: 0,1,...,C-1,0,1,...
        let labels: Vec<usize> = (0..classes * per_class_pool).map(|i| i % classes).collect();
        let size = per_class_take * classes;
        let picked = stratified_subset(&labels, classes, size, seed).unwrap();
        prop_assert_eq!(picked.len(), size);
        prop_assert!(picked.windows(2).all(|w| w[0] < w[1]), "sorted, no duplicates");
        let mut counts = vec![0usize; classes];
        for &i in &picked {
            counts[labels[i]] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c == per_class_take));
        let again = stratified_subset(&labels, classes, size, seed).unwrap();
        prop_assert_eq!(picked, again);
    }

    #[test]
    fn lr_schedule_steps_down_by_exactly_the_factor(
        lr in 0.001f64..1.0,
        factor in 2.0f64..20.0,
        epochs in 4usize..40,
    ) {
        let drops: Vec<usize> = vec![epochs / 3, 2 * epochs / 3]
            .into_iter()
            .filter(|&d| d > 0)
            .collect();
        prop_assume!(drops.windows(2).all(|w| w[0] < w[1]));
        let cfg = TrainConfig {
            lr,
            lr_drop_factor: factor,
            lr_drop_epochs: drops.clone(),
            epochs,
            ..TrainConfig::default()
        };
        prop_assert_eq!(lr_for_epoch(&cfg, 1), lr);
        for e in 1..epochs {
            let now = lr_for_epoch(&cfg, e);
            let next = lr_for_epoch(&cfg, e + 1);
            if drops.contains(&e) {
                prop_assert!((next - now / factor).abs() <= 1e-15);
            } else {
                prop_assert_eq!(now, next);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_random_tensors(
        seed in 0u64..1_000_000,
        dims in proptest::collection::vec(1usize..5, 1..4),
        count in 1usize..4,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = std::collections::BTreeMap::new();
        for i in 0..count {
            let t = ArrayD::from_shape_fn(IxDyn(&dims), |_| rng.random_range(-4.0..4.0));
            tensors.insert(format!("t{i}"), t);
        }
        let ckpt = Checkpoint::<f64>::new(serde_json::json!({"arch": "prop"}), tensors);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prop.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint::<f64>(&path).unwrap();
        prop_assert_eq!(&back.tensors, &ckpt.tensors);
        prop_assert_eq!(&back.meta, &ckpt.meta);
    }
}

//! Property tests over the core invariants.

mod common;

use std::collections::BTreeSet;

use mergeforge::{
    apply_config, dice, encode, merge_linear, merge_slerp, merge_task_arithmetic, merge_ties,
    parego_scalarize, pareto_front, partition_layers, sample_config, ArchitectureSchema,
    GroupMergeSpec, MergeConfig, ModelParams, ScalarizationWeights, SearchSpace, TaskLossVector,
    TensorLayout, TensorRecord,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sam_names() -> Vec<String> {
    TensorLayout::sam_vit_b(2)
        .shapes
        .iter()
        .map(|(name, _)| name.clone())
        .collect()
}

proptest! {
    /// Groups partition the name set: disjoint and exhaustive, with the
    /// group count given by the per-component ceilings plus the extras.
    #[test]
    fn partition_is_exhaustive_and_disjoint(
        g_enc in 1usize..=4,
        g_prompt in 1usize..=4,
        g_dec in 1usize..=4,
    ) {
        let schema = ArchitectureSchema::sam_vit_b();
        let names = sam_names();
        let groups = partition_layers(&schema, g_enc, g_prompt, g_dec, &names).unwrap();
        prop_assert_eq!(groups.len(), schema.group_count(g_enc, g_prompt, g_dec));
        let mut seen = BTreeSet::new();
        for group in &groups {
            for name in &group.tensor_names {
                prop_assert!(seen.insert(name.clone()), "duplicate assignment of {}", name);
            }
        }
        let all: BTreeSet<String> = names.into_iter().collect();
        prop_assert_eq!(seen, all);
    }

    /// The ceiling formula holds for arbitrary layer counts, not just the
    /// SAM preset.
    #[test]
    fn group_count_matches_ceiling_sums(
        l in 1usize..=13,
        k in 1usize..=6,
        z in 1usize..=4,
        p in 1usize..=4,
        g_enc in 1usize..=4,
        g_prompt in 1usize..=4,
        g_dec in 1usize..=4,
        extras in 0usize..=3,
    ) {
        let extra_names: Vec<String> = (0..extras).map(|i| format!("extra{i}")).collect();
        let extra_refs: Vec<&str> = extra_names.iter().map(String::as_str).collect();
        let layout = TensorLayout::small(l, k, z, p, &extra_refs, 1);
        let names: Vec<String> = layout.shapes.iter().map(|(n, _)| n.clone()).collect();
        let groups = partition_layers(&layout.schema, g_enc, g_prompt, g_dec, &names).unwrap();
        let expected = l.div_ceil(g_enc) + k.div_ceil(g_prompt) + (z + p).div_ceil(g_dec) + extras;
        prop_assert_eq!(groups.len(), expected);
    }

    /// Decode of encode is the identity, and re-encode is byte-stable.
    #[test]
    fn container_roundtrip_is_identity(
        tensors in prop::collection::btree_map(
            "[a-z]{1,6}(\\.[a-z]{1,6}){0,2}",
            prop::collection::vec(-1.0e30f32..1.0e30f32, 1..24),
            0..5,
        ),
        meta in prop::collection::btree_map("[a-z]{1,8}", "[ -~]{0,12}", 0..3),
    ) {
        let mut model = ModelParams::new();
        for (name, data) in tensors {
            let shape = vec![data.len()];
            model.insert(TensorRecord::new(name, shape, data).unwrap()).unwrap();
        }
        model.meta = meta;
        let bytes = mergeforge::checkpoint::encode(&model).unwrap();
        let decoded = mergeforge::checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&decoded, &model);
        prop_assert_eq!(mergeforge::checkpoint::encode(&decoded).unwrap(), bytes);
    }

    /// Merging identical models returns the shared weights exactly, for
    /// every method (linear restricted to convex weights).
    #[test]
    fn merging_clones_is_identity(
        data in prop::collection::vec(-100.0f32..100.0f32, 1..20),
        lambda in 0.0f64..=1.0,
        retain in proptest::num::f64::POSITIVE.prop_map(|v| (v % 1.0).abs().max(1e-6)),
        t in 0.0f64..=1.0,
        raw_w in prop::collection::vec(0.01f64..1.0, 3),
    ) {
        let nonzero = data.iter().any(|&v| v != 0.0);
        let taus = vec![vec![0.0f32; data.len()]; 2];
        let tau_refs: Vec<&[f32]> = taus.iter().map(Vec::as_slice).collect();
        prop_assert_eq!(merge_task_arithmetic(&data, &tau_refs, lambda).unwrap(), data.clone());
        prop_assert_eq!(merge_ties(&data, &tau_refs, retain, lambda).unwrap(), data.clone());
        if nonzero {
            prop_assert_eq!(merge_slerp(&data, &data, t).unwrap(), data.clone());
        }
        let total: f64 = raw_w.iter().sum();
        let weights: Vec<f64> = raw_w.iter().map(|w| w / total).collect();
        let models: Vec<&[f32]> = vec![&data, &data, &data];
        prop_assert_eq!(merge_linear(&models, &weights).unwrap(), data);
    }

    /// With one task vector and full retention, TIES equals task arithmetic
    /// exactly.
    #[test]
    fn ties_single_tau_full_retain_matches_task_arithmetic(
        base in prop::collection::vec(-10.0f32..10.0, 1..20),
        tau_scale in 0.1f32..5.0,
        lambda in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau = common::random_tensor(&mut rng, base.len(), tau_scale);
        let ties = merge_ties(&base, &[&tau], 1.0, lambda).unwrap();
        let ta = merge_task_arithmetic(&base, &[&tau], lambda).unwrap();
        prop_assert_eq!(ties, ta);
    }

    /// Interpolating unit vectors stays on the unit sphere away from the
    /// parallel fallback, and reversing the endpoints mirrors t.
    #[test]
    fn slerp_preserves_norm_and_is_symmetric(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw_a = common::random_tensor(&mut rng, 12, 1.0);
        let raw_b = common::random_tensor(&mut rng, 12, 1.0);
        let norm = |v: &[f32]| (v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()).sqrt();
        let (na, nb) = (norm(&raw_a), norm(&raw_b));
        prop_assume!(na > 1e-3 && nb > 1e-3);
        let a: Vec<f32> = raw_a.iter().map(|&v| (v as f64 / na) as f32).collect();
        let b: Vec<f32> = raw_b.iter().map(|&v| (v as f64 / nb) as f32).collect();
        let cos: f64 = a.iter().zip(&b).map(|(&x, &y)| x as f64 * y as f64).sum();
        prop_assume!(cos.abs() < 0.999);
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let out = merge_slerp(&a, &b, t).unwrap();
            prop_assert!((norm(&out) - 1.0).abs() < 1e-5, "norm {} at t {}", norm(&out), t);
            let reversed = merge_slerp(&b, &a, 1.0 - t).unwrap();
            for (x, y) in out.iter().zip(&reversed) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    /// Linear merging is linear in each input: scaling one model scales its
    /// contribution.
    #[test]
    fn linear_merge_is_linear_in_each_model(
        a in prop::collection::vec(-5.0f32..5.0, 1..16),
        scale in -3.0f32..3.0,
        wa in 0.0f64..=1.0,
        wb in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = common::random_tensor(&mut rng, a.len(), 2.0);
        let scaled: Vec<f32> = a.iter().map(|&v| v * scale).collect();
        let plain = merge_linear(&[&a, &b], &[wa, wb]).unwrap();
        let with_scaled = merge_linear(&[&scaled, &b], &[wa, wb]).unwrap();
        let b_only = merge_linear(&[&b], &[wb]).unwrap();
        for i in 0..a.len() {
            let expected =
                scale as f64 * (plain[i] as f64 - b_only[i] as f64) + b_only[i] as f64;
            prop_assert!((with_scaled[i] as f64 - expected).abs() <= 1e-5 * expected.abs().max(1.0));
        }
    }

    /// Sampled configurations always validate, and their encodings are
    /// finite with the space's fixed length.
    #[test]
    fn sampled_configs_validate_and_encode(seed in 0u64..2000) {
        let layout = TensorLayout::small(3, 2, 1, 1, &["neck"], 2);
        let space = SearchSpace::new(layout.schema, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = sample_config(&space, &mut rng);
        space.validate_config(&config).unwrap();
        let fv = encode(&config, &space).unwrap();
        prop_assert_eq!(fv.len(), space.feature_len());
        prop_assert!(fv.0.iter().all(|v| v.is_finite()));
        let mutated = mergeforge::mutate(&config, &space, &mut rng);
        space.validate_config(&mutated).unwrap();
    }

    /// Raising any loss with positive weight never lowers the scalarization.
    #[test]
    fn scalarization_is_monotone(
        f in prop::collection::vec(0.0f64..=1.0, 2..5),
        bump in 0.001f64..0.5,
        which in 0usize..5,
        seed in 0u64..1000,
    ) {
        let which = which % f.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = mergeforge::sample_simplex_weights(f.len(), &mut rng).unwrap();
        let tasks: Vec<String> = (0..f.len()).map(|i| format!("t{i}")).collect();
        let make = |values: &[f64]| {
            TaskLossVector::new(tasks.iter().cloned().zip(values.iter().copied())).unwrap()
        };
        let base = parego_scalarize(&make(&f), &weights, 0.05).unwrap();
        let mut bigger = f.clone();
        bigger[which] += bump;
        let after = parego_scalarize(&make(&bigger), &weights, 0.05).unwrap();
        prop_assert!(after >= base - 1e-15);
    }

    /// Dice is symmetric and maximal on identical masks.
    #[test]
    fn dice_symmetry(mask_a in prop::collection::vec(any::<bool>(), 1..64), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask_b: Vec<bool> = (0..mask_a.len()).map(|_| rng.random::<bool>()).collect();
        prop_assert_eq!(dice(&mask_a, &mask_b).unwrap(), dice(&mask_b, &mask_a).unwrap());
        prop_assert_eq!(dice(&mask_a, &mask_a).unwrap(), 1.0);
    }

    /// The front is mutually non-dominated and contains every per-task
    /// argmin.
    #[test]
    fn pareto_front_is_sound(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 1..30),
    ) {
        let history: Vec<TaskLossVector> = rows
            .iter()
            .map(|r| {
                TaskLossVector::new(
                    r.iter().enumerate().map(|(i, &v)| (format!("t{i}"), v)),
                )
                .unwrap()
            })
            .collect();
        let front = pareto_front(&history).unwrap();
        prop_assert!(!front.is_empty());
        let values: Vec<Vec<f64>> = history.iter().map(|h| h.values()).collect();
        for &i in &front {
            for &j in &front {
                if i == j { continue; }
                let dominated = values[j].iter().zip(&values[i]).all(|(a, b)| a <= b)
                    && values[j].iter().zip(&values[i]).any(|(a, b)| a < b);
                prop_assert!(!dominated, "{} dominates {} inside the front", j, i);
            }
        }
        for task in 0..3 {
            let mut argmin = 0;
            for (i, v) in values.iter().enumerate() {
                if v[task] < values[argmin][task] {
                    argmin = i;
                }
            }
            let covered = front.iter().any(|&i| values[i][task] == values[argmin][task]);
            prop_assert!(covered, "per-task argmin for task {} missing from the front", task);
        }
    }

    /// Expected improvement is nonnegative.
    #[test]
    fn expected_improvement_nonnegative(
        mean in -5.0f64..5.0,
        variance in 0.0f64..4.0,
        f_best in -5.0f64..5.0,
    ) {
        prop_assert!(mergeforge::expected_improvement(mean, variance, f_best) >= 0.0);
    }
}

#[test]
fn apply_config_on_clones_returns_base_weights() {
    let layout = TensorLayout::small(2, 1, 1, 1, &[], 6);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = layout.random_model(&mut rng, 1.0);
    let candidates = vec![base.clone(), base.clone()];
    let names: Vec<String> = base.names().map(String::from).collect();
    let groups = partition_layers(&layout.schema, 1, 1, 1, &names).unwrap();
    let specs = vec![
        GroupMergeSpec::TaskArithmetic { scaling: 0.8 },
        GroupMergeSpec::Ties {
            retain_ratio: 0.4,
            scaling: 0.9,
        },
        GroupMergeSpec::Slerp {
            pair: (0, 2),
            t: 0.3,
        },
        GroupMergeSpec::Linear {
            weights: vec![0.2, 0.5, 0.3],
        },
        GroupMergeSpec::Slerp {
            pair: (1, 2),
            t: 0.77,
        },
    ];
    let config = MergeConfig {
        g_enc: 1,
        g_prompt: 1,
        g_dec: 1,
        specs,
    };
    let merged = apply_config(&base, &candidates, &config, &groups).unwrap();
    for tensor in base.tensors() {
        assert_eq!(
            merged.get(&tensor.name).unwrap().data,
            tensor.data,
            "tensor {} changed",
            tensor.name,
        );
    }
}

#[test]
fn parego_uniform_weights_need_not_be_simplex_samples() {
    // Guard the constructor contract used throughout the optimizer.
    assert!(ScalarizationWeights::new(vec![0.25; 4]).is_ok());
    assert!(ScalarizationWeights::new(vec![0.3; 4]).is_err());
}

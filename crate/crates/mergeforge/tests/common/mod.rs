//! Shared helpers for the integration suites: straight-line reference
//! implementations of the merge kernels (independent of the library's code
//! paths) and fixture builders.

// Each test binary compiles its own copy and uses a subset.
#![allow(dead_code)]

use std::collections::BTreeSet;

use mergeforge::{GroupMergeSpec, MergeConfig, ModelParams, TensorLayout};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `base + lambda * sum(taus)`, elementwise in f64.
pub fn oracle_task_arithmetic(base: &[f32], taus: &[Vec<f32>], lambda: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut total = 0.0f64;
        for tau in taus {
            total += tau[i] as f64;
        }
        out.push(base[i] as f64 + lambda * total);
    }
    out
}

/// Trim, elect sign, average aligned, scale onto base.
pub fn oracle_ties(base: &[f32], taus: &[Vec<f32>], retain: f64, lambda: f64) -> Vec<f64> {
    let n = base.len();
    let keep = ((retain * n as f64).floor() as usize).max(1);
    // Kept index set per task vector: the `keep` largest magnitudes,
    // preferring lower indices on equal magnitude.
    let mut kept_sets: Vec<BTreeSet<usize>> = Vec::new();
    for tau in taus {
        let mut by_magnitude: Vec<(f64, usize)> =
            tau.iter().enumerate().map(|(i, &v)| (v.abs() as f64, i)).collect();
        by_magnitude.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        kept_sets.push(by_magnitude.iter().take(keep).map(|&(_, i)| i).collect());
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum = 0.0f64;
        for (tau, kept) in taus.iter().zip(&kept_sets) {
            if kept.contains(&i) {
                sum += tau[i] as f64;
            }
        }
        let mut aligned: Vec<f64> = Vec::new();
        for (tau, kept) in taus.iter().zip(&kept_sets) {
            if !kept.contains(&i) {
                continue;
            }
            let v = tau[i] as f64;
            if (sum > 0.0 && v > 0.0) || (sum < 0.0 && v < 0.0) {
                aligned.push(v);
            }
        }
        let delta = if aligned.is_empty() {
            0.0
        } else {
            aligned.iter().sum::<f64>() / aligned.len() as f64
        };
        out.push(base[i] as f64 + lambda * delta);
    }
    out
}

/// Great-circle interpolation with the near-parallel lerp fallback.
pub fn oracle_slerp(a: &[f32], b: &[f32], t: f64) -> Vec<f64> {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&y| (y as f64) * (y as f64)).sum::<f64>().sqrt();
    let cos = (dot / (na * nb)).clamp(-1.0, 1.0);
    if cos.abs() > 1.0 - 1e-7 {
        return a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (1.0 - t) * x as f64 + t * y as f64)
            .collect();
    }
    let omega = cos.acos();
    let wa = ((1.0 - t) * omega).sin() / omega.sin();
    let wb = (t * omega).sin() / omega.sin();
    a.iter()
        .zip(b)
        .map(|(&x, &y)| wa * x as f64 + wb * y as f64)
        .collect()
}

/// Plain weighted sum.
pub fn oracle_linear(models: &[Vec<f32>], weights: &[f64]) -> Vec<f64> {
    let n = models[0].len();
    (0..n)
        .map(|i| {
            models
                .iter()
                .zip(weights)
                .map(|(m, &w)| w * m[i] as f64)
                .sum()
        })
        .collect()
}

/// Relative-error check against an f64 oracle.
pub fn assert_matches_oracle(actual: &[f32], oracle: &[f64], tol: f64, context: &str) {
    assert_eq!(actual.len(), oracle.len(), "{context}: length");
    for (i, (&a, &o)) in actual.iter().zip(oracle).enumerate() {
        let scale = o.abs().max(1.0);
        assert!(
            ((a as f64) - o).abs() <= tol * scale,
            "{context}: element {i}: {a} vs oracle {o}"
        );
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len)
        .map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale)
        .collect()
}

/// An 18-group configuration over the SAM ViT-B partition at granularities
/// (2, 1, 1), mixing all four methods with distinct hyperparameters per
/// group. Pool indices: 0 = base, 1..=2 = candidates. Group order follows
/// the partition: six paired encoder groups, four prompt groups, five
/// decoder groups, then patch embedding, positional embedding and neck.
pub fn sam_reference_layout() -> MergeConfig {
    use GroupMergeSpec::{Linear, Slerp, TaskArithmetic, Ties};
    MergeConfig {
        g_enc: 2,
        g_prompt: 1,
        g_dec: 1,
        specs: vec![
            // encoder pairs 0-1 .. 10-11
            Ties { retain_ratio: 0.59, scaling: 0.07 },
            TaskArithmetic { scaling: 0.30 },
            Linear { weights: vec![0.60, 0.59, 0.12] },
            TaskArithmetic { scaling: 0.06 },
            Slerp { pair: (0, 2), t: 0.93 },
            TaskArithmetic { scaling: 0.06 },
            // prompt encoder layers 0..3
            Slerp { pair: (0, 2), t: 0.95 },
            TaskArithmetic { scaling: 0.23 },
            Slerp { pair: (0, 2), t: 0.77 },
            Linear { weights: vec![0.95, 0.54, 0.57] },
            // mask decoder layers 0..4
            Linear { weights: vec![0.44, 0.30, 0.01] },
            Linear { weights: vec![0.40, 0.50, 0.50] },
            Linear { weights: vec![0.50, 0.50, 0.50] },
            Slerp { pair: (0, 1), t: 0.50 },
            Ties { retain_ratio: 0.18, scaling: 0.55 },
            // patch embedding, positional embedding, neck
            Ties { retain_ratio: 0.50, scaling: 0.50 },
            Slerp { pair: (1, 2), t: 0.59 },
            Ties { retain_ratio: 0.50, scaling: 0.50 },
        ],
    }
}

/// Random-weight models laid out like SAM ViT-B with small tensors.
pub fn sam_dummy_pool(width: usize, seed: u64) -> (TensorLayout, ModelParams, Vec<ModelParams>) {
    let layout = TensorLayout::sam_vit_b(width);
    let mut rng = rand::SeedableRng::seed_from_u64(seed);
    let base = layout.random_model(&mut rng, 0.5);
    let candidates = (0..2).map(|_| layout.random_model(&mut rng, 0.5)).collect();
    (layout, base, candidates)
}

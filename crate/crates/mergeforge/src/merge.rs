//! Merging kernels and group-wise application.
//!
//! Four methods are supported, each operating tensor by tensor on flat f32
//! slices with f64 accumulation:
//!
//! * task arithmetic: `base + scaling * sum(tau_t)` where
//!   `tau_t = fine_tuned_t - base`;
//! * TIES: each task vector is trimmed to its top-k magnitude entries, an
//!   elementwise consensus sign is elected from the kept entries, and only
//!   sign-aligned kept entries are averaged before scaling onto the base;
//! * SLERP: spherical interpolation between two whole flattened tensors,
//!   with a linear fallback when the vectors are nearly (anti-)parallel;
//! * linear: an elementwise weighted sum over the model pool. Weights are
//!   applied as given, without renormalization.
//!
//! For SLERP and linear merging the model pool is `[base, candidates...]`,
//! so pool index 0 always refers to the base model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{ModelParams, TensorRecord};
use crate::json;
use crate::par;
use crate::schema::LayerGroup;
use crate::space::MergeConfig;

/// Metadata key under which `apply_config` records the configuration.
pub const CONFIG_META_KEY: &str = "merge_config";

/// Threshold on |cos(angle)| beyond which SLERP falls back to lerp.
const SLERP_PARALLEL_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("tensor length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("tensor `{0}` missing from one of the models")]
    MissingTensor(String),
    #[error("no task vectors supplied")]
    EmptyTaskVectors,
    #[error("no candidate models supplied")]
    NoCandidates,
    #[error("{returned} weights supplied for {expected} models")]
    WeightCountMismatch { returned: usize, expected: usize },
    #[error("tensor `{0}` has zero norm, spherical interpolation is undefined")]
    ZeroNorm(String),
    #[error("config supplies {specs} group specs but the partition has {groups} groups")]
    GroupCountMismatch { specs: usize, groups: usize },
    #[error("group {group}: {reason}")]
    InvalidSpec { group: usize, reason: String },
}

/// The four merging methods, with stable small integer ids used by the
/// feature encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    TaskArithmetic,
    Ties,
    Slerp,
    Linear,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 4] = [
        MergeMethod::TaskArithmetic,
        MergeMethod::Ties,
        MergeMethod::Slerp,
        MergeMethod::Linear,
    ];

    pub fn id(self) -> usize {
        match self {
            MergeMethod::TaskArithmetic => 0,
            MergeMethod::Ties => 1,
            MergeMethod::Slerp => 2,
            MergeMethod::Linear => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::Ties => "ties",
            MergeMethod::Slerp => "slerp",
            MergeMethod::Linear => "linear",
        }
    }
}

/// Method and hyperparameters shared by one layer group.
///
/// `scaling` and `t` live in [0, 1], `retain_ratio` in (0, 1], and linear
/// `weights` (one per pool model, base first) each in [0, 1]. SLERP's `pair`
/// holds two distinct pool indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum GroupMergeSpec {
    TaskArithmetic {
        scaling: f64,
    },
    Ties {
        retain_ratio: f64,
        scaling: f64,
    },
    Slerp {
        pair: (usize, usize),
        t: f64,
    },
    Linear {
        weights: Vec<f64>,
    },
}

impl GroupMergeSpec {
    pub fn method(&self) -> MergeMethod {
        match self {
            GroupMergeSpec::TaskArithmetic { .. } => MergeMethod::TaskArithmetic,
            GroupMergeSpec::Ties { .. } => MergeMethod::Ties,
            GroupMergeSpec::Slerp { .. } => MergeMethod::Slerp,
            GroupMergeSpec::Linear { .. } => MergeMethod::Linear,
        }
    }

    /// Check all active fields against their ranges. `pool_size` is the
    /// number of mergeable models including the base.
    pub fn validate(&self, group: usize, pool_size: usize) -> Result<(), MergeError> {
        let fail = |reason: String| Err(MergeError::InvalidSpec { group, reason });
        match self {
            GroupMergeSpec::TaskArithmetic { scaling } => {
                if !(0.0..=1.0).contains(scaling) {
                    return fail(format!("scaling {scaling} outside [0, 1]"));
                }
            }
            GroupMergeSpec::Ties {
                retain_ratio,
                scaling,
            } => {
                if !(*retain_ratio > 0.0 && *retain_ratio <= 1.0) {
                    return fail(format!("retain_ratio {retain_ratio} outside (0, 1]"));
                }
                if !(0.0..=1.0).contains(scaling) {
                    return fail(format!("scaling {scaling} outside [0, 1]"));
                }
            }
            GroupMergeSpec::Slerp { pair, t } => {
                if !(0.0..=1.0).contains(t) {
                    return fail(format!("t {t} outside [0, 1]"));
                }
                if pair.0 == pair.1 {
                    return fail(format!("pair indices must differ, got {pair:?}"));
                }
                if pair.0 >= pool_size || pair.1 >= pool_size {
                    return fail(format!(
                        "pair {pair:?} outside model pool of size {pool_size}"
                    ));
                }
            }
            GroupMergeSpec::Linear { weights } => {
                if weights.len() != pool_size {
                    return Err(MergeError::WeightCountMismatch {
                        returned: weights.len(),
                        expected: pool_size,
                    });
                }
                for w in weights {
                    if !(0.0..=1.0).contains(w) {
                        return fail(format!("weight {w} outside [0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Elementwise difference between a fine-tuned model and its base.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    pub tensors: BTreeMap<String, Vec<f32>>,
}

/// Compute `fine_tuned - base` per tensor.
pub fn task_vector(fine_tuned: &ModelParams, base: &ModelParams) -> Result<TaskVector, MergeError> {
    let mut tensors = BTreeMap::new();
    for t in base.tensors() {
        let other = fine_tuned
            .get(&t.name)
            .ok_or_else(|| MergeError::MissingTensor(t.name.clone()))?;
        if other.data.len() != t.data.len() {
            return Err(MergeError::LengthMismatch {
                left: other.data.len(),
                right: t.data.len(),
            });
        }
        let diff: Vec<f32> = other
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| a - b)
            .collect();
        tensors.insert(t.name.clone(), diff);
    }
    if fine_tuned.len() != base.len() {
        let name = fine_tuned
            .names()
            .find(|n| base.get(n).is_none())
            .unwrap_or_default();
        return Err(MergeError::MissingTensor(name.to_string()));
    }
    Ok(TaskVector { tensors })
}

fn check_same_len(base: &[f32], other: &[f32]) -> Result<(), MergeError> {
    if base.len() != other.len() {
        return Err(MergeError::LengthMismatch {
            left: base.len(),
            right: other.len(),
        });
    }
    Ok(())
}

/// `base + scaling * sum(taus)` elementwise.
pub fn merge_task_arithmetic(
    base: &[f32],
    taus: &[&[f32]],
    scaling: f64,
) -> Result<Vec<f32>, MergeError> {
    for tau in taus {
        check_same_len(base, tau)?;
    }
    Ok(base
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let sum: f64 = taus.iter().map(|tau| tau[i] as f64).sum();
            (b as f64 + scaling * sum) as f32
        })
        .collect())
}

/// Per-tensor top-k count: `max(1, floor(retain_ratio * n))`.
fn ties_keep_count(retain_ratio: f64, n: usize) -> usize {
    ((retain_ratio * n as f64).floor() as usize).max(1)
}

/// TIES merge of one tensor.
///
/// Each task vector keeps its `max(1, floor(retain_ratio * n))` largest
/// magnitude entries (ties broken toward lower indices), a consensus sign is
/// taken from the elementwise sum of kept entries, and the merged delta at
/// each position is the mean of kept entries whose sign matches the
/// consensus. Positions with consensus zero, or with no aligned contributor,
/// stay zero.
pub fn merge_ties(
    base: &[f32],
    taus: &[&[f32]],
    retain_ratio: f64,
    scaling: f64,
) -> Result<Vec<f32>, MergeError> {
    if taus.is_empty() {
        return Err(MergeError::EmptyTaskVectors);
    }
    for tau in taus {
        check_same_len(base, tau)?;
    }
    let n = base.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let keep = ties_keep_count(retain_ratio, n);

    let kept: Vec<Vec<f64>> = taus
        .iter()
        .map(|tau| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                tau[b]
                    .abs()
                    .total_cmp(&tau[a].abs())
                    .then_with(|| a.cmp(&b))
            });
            let mut trimmed = vec![0.0f64; n];
            for &idx in order.iter().take(keep) {
                trimmed[idx] = tau[idx] as f64;
            }
            trimmed
        })
        .collect();

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let total: f64 = kept.iter().map(|k| k[i]).sum();
        let consensus = if total > 0.0 {
            1.0
        } else if total < 0.0 {
            -1.0
        } else {
            0.0
        };
        let mut aligned_sum = 0.0f64;
        let mut aligned_count = 0usize;
        if consensus != 0.0 {
            for k in &kept {
                if k[i] != 0.0 && k[i].signum() == consensus {
                    aligned_sum += k[i];
                    aligned_count += 1;
                }
            }
        }
        let delta = if aligned_count > 0 {
            aligned_sum / aligned_count as f64
        } else {
            0.0
        };
        out.push((base[i] as f64 + scaling * delta) as f32);
    }
    Ok(out)
}

/// Spherical interpolation between `a` and `b` at position `t`, treating
/// each tensor as one flat vector. Angles are accumulated in f64. Nearly
/// parallel or anti-parallel inputs fall back to linear interpolation; the
/// endpoints t=0 and t=1 return the inputs bit-exactly.
pub fn merge_slerp(a: &[f32], b: &[f32], t: f64) -> Result<Vec<f32>, MergeError> {
    check_same_len(a, b)?;
    let mut dot = 0.0f64;
    let mut norm_a = 0.0f64;
    let mut norm_b = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(MergeError::ZeroNorm(String::new()));
    }
    if t == 0.0 {
        return Ok(a.to_vec());
    }
    if t == 1.0 {
        return Ok(b.to_vec());
    }
    let cos = (dot / (norm_a.sqrt() * norm_b.sqrt())).clamp(-1.0, 1.0);
    if cos.abs() > 1.0 - SLERP_PARALLEL_EPS {
        // Lerp written as a + t(b - a) so interpolating a vector with itself
        // reproduces it bit-exactly.
        return Ok(a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 + t * (y as f64 - x as f64)) as f32)
            .collect());
    }
    let omega = cos.acos();
    let sin_omega = omega.sin();
    let wa = ((1.0 - t) * omega).sin() / sin_omega;
    let wb = (t * omega).sin() / sin_omega;
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32)
        .collect())
}

/// Elementwise `sum_i weights[i] * models[i]`. Weights are not renormalized.
pub fn merge_linear(models: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>, MergeError> {
    if models.len() != weights.len() {
        return Err(MergeError::WeightCountMismatch {
            returned: weights.len(),
            expected: models.len(),
        });
    }
    if models.is_empty() {
        return Err(MergeError::NoCandidates);
    }
    let n = models[0].len();
    for m in models {
        check_same_len(models[0], m)?;
    }
    Ok((0..n)
        .map(|i| {
            let sum: f64 = models
                .iter()
                .zip(weights)
                .map(|(m, &w)| w * m[i] as f64)
                .sum();
            sum as f32
        })
        .collect())
}

/// Merge one tensor under a group spec. `pool[0]` is the base model's slice.
fn merge_tensor(
    name: &str,
    pool: &[&[f32]],
    spec: &GroupMergeSpec,
) -> Result<Vec<f32>, MergeError> {
    let base = pool[0];
    match spec {
        GroupMergeSpec::TaskArithmetic { scaling } => {
            let taus: Vec<Vec<f32>> = pool[1..]
                .iter()
                .map(|cand| cand.iter().zip(base).map(|(c, b)| c - b).collect())
                .collect();
            let tau_refs: Vec<&[f32]> = taus.iter().map(Vec::as_slice).collect();
            merge_task_arithmetic(base, &tau_refs, *scaling)
        }
        GroupMergeSpec::Ties {
            retain_ratio,
            scaling,
        } => {
            let taus: Vec<Vec<f32>> = pool[1..]
                .iter()
                .map(|cand| cand.iter().zip(base).map(|(c, b)| c - b).collect())
                .collect();
            let tau_refs: Vec<&[f32]> = taus.iter().map(Vec::as_slice).collect();
            merge_ties(base, &tau_refs, *retain_ratio, *scaling)
        }
        GroupMergeSpec::Slerp { pair, t } => {
            merge_slerp(pool[pair.0], pool[pair.1], *t).map_err(|e| match e {
                MergeError::ZeroNorm(_) => MergeError::ZeroNorm(name.to_string()),
                other => other,
            })
        }
        GroupMergeSpec::Linear { weights } => merge_linear(pool, weights),
    }
}

/// Apply a full configuration: every group's tensors are merged with that
/// group's method, groups running in parallel. The output carries the base
/// model's metadata plus the configuration as canonical JSON under
/// [`CONFIG_META_KEY`].
pub fn apply_config(
    base: &ModelParams,
    candidates: &[ModelParams],
    config: &MergeConfig,
    groups: &[LayerGroup],
) -> Result<ModelParams, MergeError> {
    if candidates.is_empty() {
        return Err(MergeError::NoCandidates);
    }
    if config.specs.len() != groups.len() {
        return Err(MergeError::GroupCountMismatch {
            specs: config.specs.len(),
            groups: groups.len(),
        });
    }
    let pool_size = candidates.len() + 1;
    for (group, spec) in groups.iter().zip(&config.specs) {
        spec.validate(group.id, pool_size)?;
    }

    let work: Vec<(&LayerGroup, &GroupMergeSpec)> = groups.iter().zip(&config.specs).collect();
    type MergedGroup = Vec<(String, Vec<f32>)>;
    let merged_groups: Vec<Result<MergedGroup, MergeError>> =
        par::map_slice(&work, |(group, spec)| {
            let mut out = Vec::with_capacity(group.tensor_names.len());
            for name in &group.tensor_names {
                let base_t = base
                    .get(name)
                    .ok_or_else(|| MergeError::MissingTensor(name.clone()))?;
                let mut pool: Vec<&[f32]> = Vec::with_capacity(pool_size);
                pool.push(&base_t.data);
                for cand in candidates {
                    let t = cand
                        .get(name)
                        .ok_or_else(|| MergeError::MissingTensor(name.clone()))?;
                    check_same_len(&base_t.data, &t.data)?;
                    pool.push(&t.data);
                }
                out.push((name.clone(), merge_tensor(name, &pool, spec)?));
            }
            Ok(out)
        });

    let mut merged = ModelParams::new();
    merged.meta = base.meta.clone();
    merged.meta.insert(
        CONFIG_META_KEY.to_string(),
        json::to_canonical_string(config).expect("config serializes"),
    );
    for group_result in merged_groups {
        for (name, data) in group_result? {
            let shape = base.get(&name).expect("name from base").shape.clone();
            merged
                .insert(TensorRecord::new(name, shape, data).expect("shape preserved"))
                .expect("groups are disjoint");
        }
    }
    if merged.len() != base.len() {
        let name = base
            .names()
            .find(|n| merged.get(n).is_none())
            .unwrap_or_default();
        return Err(MergeError::MissingTensor(name.to_string()));
    }
    Ok(merged)
}

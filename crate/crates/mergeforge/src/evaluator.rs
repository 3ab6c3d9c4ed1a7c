//! Objective backends.
//!
//! Three evaluators implement the [`Evaluator`] trait:
//!
//! * [`SyntheticProblem`] — per-task hidden optima built as known convex
//!   combinations of the candidate task vectors, scored by clipped mean
//!   squared distance. The optimum is exactly representable by a linear
//!   merge, so searches can be validated against a known floor.
//! * [`ToySegmentationProblem`] — per-task linear pixel scorers over
//!   deterministic 16x16 images, scored by `1 - mean Dice`. Candidates are
//!   specialists: each matches one task's ground-truth scorer up to noise,
//!   so a merge can beat every individual model.
//! * [`ExternalEvaluator`] — shells out to a user command with the merged
//!   checkpoint path substituted for `{model}`, reading scores from the
//!   final line of stdout.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, ModelParams, TensorRecord};
use crate::merge::GroupMergeSpec;
use crate::objective::{dice, TaskLossVector};
use crate::schema::{ArchitectureSchema, Component, MembershipRule};
use crate::space::MergeConfig;

const IMAGE_SIZE: usize = 16;
const CALIBRATION_IMAGES: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("merged model incompatible with the problem: {0}")]
    Incompatible(String),
    #[error("problem construction: {0}")]
    Construction(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] crate::checkpoint::FormatError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("evaluator command exited with {status}; stderr:\n{stderr}")]
    CommandFailed { status: i32, stderr: String },
    #[error("evaluator command timed out after {0} s")]
    Timeout(f64),
    #[error("evaluator protocol: {detail}; captured output:\n{output}")]
    Protocol { detail: String, output: String },
}

/// What the search loop does when an evaluation fails.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    /// Abort the whole search (default).
    #[default]
    Abort,
    /// Record loss 1.0 on every task and continue.
    Penalize,
}

/// An objective backend: a fixed task set and a scoring function over
/// merged checkpoints. `trial_index` names per-trial artifacts for
/// out-of-process backends; in-memory backends ignore it.
pub trait Evaluator: Sync {
    fn tasks(&self) -> &[String];
    fn evaluate(&self, merged: &ModelParams, trial_index: usize)
        -> Result<TaskLossVector, EvalError>;
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn check_same_structure(merged: &ModelParams, base: &ModelParams) -> Result<(), EvalError> {
    if merged.len() != base.len() {
        return Err(EvalError::Incompatible(format!(
            "{} tensors vs the problem's {}",
            merged.len(),
            base.len()
        )));
    }
    for t in base.tensors() {
        let other = merged
            .get(&t.name)
            .ok_or_else(|| EvalError::Incompatible(format!("missing tensor `{}`", t.name)))?;
        if other.shape != t.shape {
            return Err(EvalError::Incompatible(format!(
                "tensor `{}` shape {:?} vs {:?}",
                t.name, other.shape, t.shape
            )));
        }
    }
    Ok(())
}

/// A concrete tensor naming for a schema: the bridge between an
/// [`ArchitectureSchema`] (name patterns) and generated checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorLayout {
    pub schema: ArchitectureSchema,
    /// (tensor name, shape) pairs, every name matching exactly one
    /// membership rule.
    pub shapes: Vec<(String, Vec<usize>)>,
}

impl TensorLayout {
    /// A compact layout with one flat tensor of `width` floats per layer.
    pub fn small(
        encoder: usize,
        prompt: usize,
        dec_transformer: usize,
        dec_conv: usize,
        extras: &[&str],
        width: usize,
    ) -> Self {
        let mut rules = Vec::new();
        let mut shapes = Vec::new();
        for i in 0..encoder {
            let prefix = format!("encoder.layer{i}.");
            shapes.push((format!("{prefix}weight"), vec![width]));
            rules.push(MembershipRule {
                prefix,
                component: Component::Encoder,
                layer: i,
            });
        }
        for i in 0..prompt {
            let prefix = format!("prompt.layer{i}.");
            shapes.push((format!("{prefix}weight"), vec![width]));
            rules.push(MembershipRule {
                prefix,
                component: Component::Prompt,
                layer: i,
            });
        }
        for i in 0..dec_transformer + dec_conv {
            let prefix = format!("decoder.layer{i}.");
            shapes.push((format!("{prefix}weight"), vec![width]));
            rules.push(MembershipRule {
                prefix,
                component: Component::Decoder,
                layer: i,
            });
        }
        for (i, name) in extras.iter().enumerate() {
            shapes.push((format!("{name}.weight"), vec![width]));
            rules.push(MembershipRule {
                prefix: (*name).to_string(),
                component: Component::Extra,
                layer: i,
            });
        }
        let schema = ArchitectureSchema {
            encoder_layers: encoder,
            prompt_layers: prompt,
            decoder_transformer_layers: dec_transformer,
            decoder_conv_layers: dec_conv,
            extra_groups: extras.iter().map(|s| s.to_string()).collect(),
            layer_membership: rules,
        };
        Self { schema, shapes }
    }

    /// The SAM ViT-B layer structure with small per-layer tensors: two per
    /// encoder block, one per prompt/decoder layer, one per extra group.
    pub fn sam_vit_b(width: usize) -> Self {
        let schema = ArchitectureSchema::sam_vit_b();
        let mut shapes = Vec::new();
        for i in 0..schema.encoder_layers {
            shapes.push((format!("image_encoder.blocks.{i}.attn.weight"), vec![width]));
            shapes.push((format!("image_encoder.blocks.{i}.mlp.weight"), vec![width]));
        }
        for i in 0..schema.prompt_layers {
            shapes.push((format!("prompt_encoder.layers.{i}.conv.weight"), vec![width]));
        }
        for i in 0..schema.decoder_transformer_layers {
            shapes.push((format!("mask_decoder.transformer.{i}.attn.weight"), vec![width]));
        }
        for i in 0..schema.decoder_conv_layers {
            shapes.push((format!("mask_decoder.upscaling.{i}.deconv.weight"), vec![width]));
        }
        shapes.push(("image_encoder.patch_embed.proj.weight".into(), vec![width]));
        shapes.push(("image_encoder.pos_embed".into(), vec![width]));
        shapes.push(("image_encoder.neck.conv.weight".into(), vec![width]));
        Self { schema, shapes }
    }

    pub fn total_params(&self) -> usize {
        self.shapes
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Package a flat parameter vector (lexicographic tensor order) as a
    /// checkpoint conforming to this layout.
    pub fn model_from_flat(&self, flat: &[f32]) -> Result<ModelParams, EvalError> {
        if flat.len() != self.total_params() {
            return Err(EvalError::Construction(format!(
                "flat vector holds {} params, layout needs {}",
                flat.len(),
                self.total_params()
            )));
        }
        let mut sorted = self.shapes.clone();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut model = ModelParams::new();
        let mut at = 0;
        for (name, shape) in sorted {
            let len: usize = shape.iter().product();
            let record = TensorRecord::new(name, shape, flat[at..at + len].to_vec())
                .map_err(|e| EvalError::Construction(e.to_string()))?;
            model
                .insert(record)
                .map_err(|e| EvalError::Construction(e.to_string()))?;
            at += len;
        }
        Ok(model)
    }

    /// A checkpoint with i.i.d. normal weights of the given scale.
    pub fn random_model(&self, rng: &mut ChaCha8Rng, scale: f32) -> ModelParams {
        let flat: Vec<f32> = (0..self.total_params())
            .map(|_| gaussian(rng) as f32 * scale)
            .collect();
        self.model_from_flat(&flat).expect("length matches by construction")
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestFile {
    Synthetic {
        schema: ArchitectureSchema,
        tasks: Vec<String>,
        coefficients: Vec<Vec<f64>>,
        base: String,
        candidates: Vec<String>,
    },
    ToySegmentation {
        seed: u64,
        tasks: usize,
    },
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

/// An analytic benchmark with known per-task optima.
///
/// Candidates are `base + tau_k` with random task vectors; each task's
/// hidden optimum is `base + sum_k c_k * tau_k` with stored coefficients
/// whose sum stays below one, so a single linear merge with weights
/// `(1 - sum c, c_1, .., c_K)` reaches it exactly and the analytic minimum
/// loss is zero. The loss is `||theta - theta*||^2 / n` clipped to [0, 1].
#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    base: ModelParams,
    candidates: Vec<ModelParams>,
    schema: ArchitectureSchema,
    tasks: Vec<String>,
    coefficients: Vec<Vec<f64>>,
    optima: Vec<BTreeMap<String, Vec<f32>>>,
    analytic_min: Vec<f64>,
}

/// Weight scales used by the synthetic generator.
const SYNTHETIC_BASE_SCALE: f32 = 0.3;
const SYNTHETIC_TAU_SCALE: f32 = 0.5;
/// Coefficients are scaled so each task's optimum stays a strict convex
/// combination of the pool.
const SYNTHETIC_COEFF_SUM: f64 = 0.55;

/// Build a deterministic synthetic problem with `num_candidates` candidate
/// models and `num_tasks` tasks over the given layout.
pub fn make_synthetic_problem(
    seed: u64,
    num_candidates: usize,
    layout: &TensorLayout,
    num_tasks: usize,
) -> Result<SyntheticProblem, EvalError> {
    if num_candidates < 2 {
        return Err(EvalError::Construction(
            "need at least 2 candidate models".into(),
        ));
    }
    if num_tasks < 1 {
        return Err(EvalError::Construction("need at least 1 task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = layout.random_model(&mut rng, SYNTHETIC_BASE_SCALE);
    let n = layout.total_params();
    let base_flat = base.flatten();
    let mut candidates = Vec::with_capacity(num_candidates);
    for _ in 0..num_candidates {
        let flat: Vec<f32> = base_flat
            .iter()
            .map(|&b| b + gaussian(&mut rng) as f32 * SYNTHETIC_TAU_SCALE)
            .collect();
        debug_assert_eq!(flat.len(), n);
        candidates.push(layout.model_from_flat(&flat)?);
    }
    let mut coefficients = Vec::with_capacity(num_tasks);
    for _ in 0..num_tasks {
        let raw: Vec<f64> = (0..num_candidates)
            .map(|_| 0.4 + 0.2 * rng.random::<f64>())
            .collect();
        let total: f64 = raw.iter().sum();
        coefficients.push(raw.iter().map(|u| SYNTHETIC_COEFF_SUM * u / total).collect());
    }
    let tasks = (0..num_tasks).map(|t| format!("task{t}")).collect();
    SyntheticProblem::from_parts(base, candidates, layout.schema.clone(), tasks, coefficients)
}

impl SyntheticProblem {
    /// Assemble a problem from its construction witnesses; per-task optima
    /// are recomputed from the coefficients.
    pub fn from_parts(
        base: ModelParams,
        candidates: Vec<ModelParams>,
        schema: ArchitectureSchema,
        tasks: Vec<String>,
        coefficients: Vec<Vec<f64>>,
    ) -> Result<Self, EvalError> {
        if coefficients.len() != tasks.len() {
            return Err(EvalError::Construction(format!(
                "{} coefficient rows for {} tasks",
                coefficients.len(),
                tasks.len()
            )));
        }
        for row in &coefficients {
            if row.len() != candidates.len() {
                return Err(EvalError::Construction(format!(
                    "{} coefficients for {} candidates",
                    row.len(),
                    candidates.len()
                )));
            }
        }
        for cand in &candidates {
            check_same_structure(cand, &base)?;
        }
        let mut optima = Vec::with_capacity(tasks.len());
        for row in &coefficients {
            let mut optimum = BTreeMap::new();
            for tensor in base.tensors() {
                let mut values = Vec::with_capacity(tensor.data.len());
                for (i, &b) in tensor.data.iter().enumerate() {
                    let mut v = b as f64;
                    for (c, cand) in row.iter().zip(&candidates) {
                        let cand_v = cand.get(&tensor.name).expect("structure checked").data[i];
                        v += c * (cand_v as f64 - b as f64);
                    }
                    values.push(v as f32);
                }
                optimum.insert(tensor.name.clone(), values);
            }
            optima.push(optimum);
        }
        let mut problem = Self {
            base,
            candidates,
            schema,
            tasks,
            coefficients,
            optima,
            analytic_min: Vec::new(),
        };
        problem.analytic_min = (0..problem.tasks.len())
            .map(|t| {
                let optimum = problem.optimum_as_model(t);
                evaluate_synthetic(&problem, &optimum)
                    .expect("optimum conforms")
                    .values()[t]
            })
            .collect();
        Ok(problem)
    }

    pub fn base(&self) -> &ModelParams {
        &self.base
    }

    pub fn candidates(&self) -> &[ModelParams] {
        &self.candidates
    }

    pub fn schema(&self) -> &ArchitectureSchema {
        &self.schema
    }

    pub fn coefficients(&self) -> &[Vec<f64>] {
        &self.coefficients
    }

    /// The loss value at the best representable merged point for a task.
    pub fn analytic_min(&self, task: usize) -> f64 {
        self.analytic_min[task]
    }

    /// Package a task's hidden optimum as a checkpoint.
    pub fn optimum_as_model(&self, task: usize) -> ModelParams {
        let mut model = ModelParams::new();
        for tensor in self.base.tensors() {
            let data = self.optima[task][&tensor.name].clone();
            model
                .insert(TensorRecord::new(tensor.name.clone(), tensor.shape.clone(), data).unwrap())
                .unwrap();
        }
        model
    }

    /// An all-linear configuration that reproduces a task's optimum: every
    /// group uses pool weights `(1 - sum c, c_1, .., c_K)`.
    pub fn witness_config(&self, task: usize, granularity: (usize, usize, usize)) -> MergeConfig {
        let row = &self.coefficients[task];
        let mut weights = Vec::with_capacity(row.len() + 1);
        weights.push(1.0 - row.iter().sum::<f64>());
        weights.extend_from_slice(row);
        let groups = self
            .schema
            .group_count(granularity.0, granularity.1, granularity.2);
        MergeConfig {
            g_enc: granularity.0,
            g_prompt: granularity.1,
            g_dec: granularity.2,
            specs: (0..groups)
                .map(|_| GroupMergeSpec::Linear {
                    weights: weights.clone(),
                })
                .collect(),
        }
    }

    /// Loss vector of candidate `k` evaluated as-is.
    pub fn candidate_losses(&self, k: usize) -> Result<TaskLossVector, EvalError> {
        evaluate_synthetic(self, &self.candidates[k])
    }

    /// Write checkpoints and a manifest into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, EvalError> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save_checkpoint(&self.base, dir.join("base.mrg"))?;
        let mut candidate_files = Vec::new();
        for (i, cand) in self.candidates.iter().enumerate() {
            let file = format!("candidate-{}.mrg", i + 1);
            checkpoint::save_checkpoint(cand, dir.join(&file))?;
            candidate_files.push(file);
        }
        let manifest = ManifestFile::Synthetic {
            schema: self.schema.clone(),
            tasks: self.tasks.clone(),
            coefficients: self.coefficients.clone(),
            base: "base.mrg".into(),
            candidates: candidate_files,
        };
        let path = dir.join("problem.json");
        std::fs::write(&path, crate::json::to_canonical_string(&manifest).unwrap())?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest: ManifestFile =
            serde_json::from_str(&text).map_err(|e| EvalError::Manifest(e.to_string()))?;
        let ManifestFile::Synthetic {
            schema,
            tasks,
            coefficients,
            base,
            candidates,
        } = manifest
        else {
            return Err(EvalError::Manifest("manifest is not a synthetic problem".into()));
        };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let base = checkpoint::load_checkpoint(dir.join(base))?;
        let candidates = candidates
            .iter()
            .map(|f| checkpoint::load_checkpoint(dir.join(f)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(base, candidates, schema, tasks, coefficients)
    }
}

/// Per-task clipped mean squared distance to the hidden optima.
pub fn evaluate_synthetic(
    problem: &SyntheticProblem,
    merged: &ModelParams,
) -> Result<TaskLossVector, EvalError> {
    check_same_structure(merged, &problem.base)?;
    let n = problem.base.total_params() as f64;
    let mut losses = Vec::with_capacity(problem.tasks.len());
    for (task, optimum) in problem.tasks.iter().zip(&problem.optima) {
        let mut sq = 0.0f64;
        for tensor in merged.tensors() {
            let target = &optimum[&tensor.name];
            for (&v, &o) in tensor.data.iter().zip(target) {
                let d = v as f64 - o as f64;
                sq += d * d;
            }
        }
        losses.push((task.clone(), (sq / n).clamp(0.0, 1.0)));
    }
    Ok(TaskLossVector::new(losses).expect("finite by construction"))
}

impl Evaluator for SyntheticProblem {
    fn tasks(&self) -> &[String] {
        &self.tasks
    }

    fn evaluate(
        &self,
        merged: &ModelParams,
        _trial_index: usize,
    ) -> Result<TaskLossVector, EvalError> {
        evaluate_synthetic(self, merged)
    }
}

// ---------------------------------------------------------------------------
// Toy segmentation benchmark
// ---------------------------------------------------------------------------

/// Number of pixel features; equals the parameter count of the toy layout.
const TOY_FEATURES: usize = 16;
/// Scale of the per-task deviation from the shared scorer.
const TOY_TASK_SCALE: f64 = 0.6;
/// Scale of each specialist's own noise around its task scorer.
const TOY_NOISE_SCALE: f64 = 0.5;

/// Dice-scored benchmark over deterministic 16x16 images.
///
/// The merged checkpoint's flattened parameters act as a linear pixel
/// scorer; thresholding the score at zero yields the predicted mask. Each
/// candidate is a specialist: its weights equal one task's ground-truth
/// scorer plus independent noise, so averaging candidates cancels noise and
/// a merge can beat every individual model on mean Dice.
#[derive(Clone, Debug)]
pub struct ToySegmentationProblem {
    layout: TensorLayout,
    base: ModelParams,
    candidates: Vec<ModelParams>,
    tasks: Vec<String>,
    seed: u64,
    /// features[image][pixel] -> feature vector
    features: Vec<Vec<Vec<f64>>>,
    /// ground_truth[task][image] -> mask
    ground_truth: Vec<Vec<Vec<bool>>>,
    truth_scorers: Vec<Vec<f64>>,
}

fn toy_features(image: &[f64]) -> Vec<Vec<f64>> {
    let s = IMAGE_SIZE;
    let at = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, s as isize - 1) as usize;
        let y = y.clamp(0, s as isize - 1) as usize;
        image[y * s + x]
    };
    let mut out = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let (xi, yi) = (x as isize, y as isize);
            let v = at(xi, yi);
            let xs = x as f64 / (s - 1) as f64 * 2.0 - 1.0;
            let ys = y as f64 / (s - 1) as f64 * 2.0 - 1.0;
            let mut neighborhood = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    neighborhood += at(xi + dx, yi + dy);
                }
            }
            out.push(vec![
                v,
                neighborhood / 9.0,
                v * v - 1.0 / 3.0,
                xs,
                ys,
                xs * ys,
                at(xi - 1, yi),
                at(xi + 1, yi),
                at(xi, yi - 1),
                at(xi, yi + 1),
                v.abs() - 0.5,
                (std::f64::consts::PI * xs).sin(),
                (std::f64::consts::PI * ys).sin(),
                v * xs,
                v * ys,
                xs * xs + ys * ys - 2.0 / 3.0,
            ]);
        }
    }
    out
}

fn score_mask(features: &[Vec<f64>], weights: &[f64]) -> Vec<bool> {
    features
        .iter()
        .map(|f| f.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() > 0.0)
        .collect()
}

fn mean_dice_loss(
    features: &[Vec<Vec<f64>>],
    ground_truth: &[Vec<bool>],
    weights: &[f64],
) -> f64 {
    let mut total = 0.0;
    for (image_features, gt) in features.iter().zip(ground_truth) {
        let mask = score_mask(image_features, weights);
        total += dice(&mask, gt).expect("equal pixel counts");
    }
    1.0 - total / features.len() as f64
}

/// Build the Dice benchmark: `num_tasks` tasks, one noisy specialist per
/// task. Deterministic in `seed`.
pub fn make_toy_segmentation_problem(
    seed: u64,
    num_tasks: usize,
) -> Result<ToySegmentationProblem, EvalError> {
    if num_tasks < 2 {
        return Err(EvalError::Construction("need at least 2 tasks".into()));
    }
    let layout = TensorLayout::small(1, 1, 1, 1, &[], TOY_FEATURES / 4);
    debug_assert_eq!(layout.total_params(), TOY_FEATURES);

    let mut image_rng = ChaCha8Rng::seed_from_u64(seed);
    image_rng.set_stream(1);
    let images: Vec<Vec<f64>> = (0..CALIBRATION_IMAGES)
        .map(|_| {
            (0..IMAGE_SIZE * IMAGE_SIZE)
                .map(|_| image_rng.random::<f64>() * 2.0 - 1.0)
                .collect()
        })
        .collect();
    let features: Vec<Vec<Vec<f64>>> = images.iter().map(|img| toy_features(img)).collect();

    // Retry weight draws until the construction is well-posed: nondegenerate
    // masks, competent specialists, and a pairwise linear merge that beats
    // every specialist's mean loss by a margin.
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 + attempt);
        let mut shared: Vec<f64> = (0..TOY_FEATURES).map(|_| gaussian(&mut rng)).collect();
        let norm = shared.iter().map(|v| v * v).sum::<f64>().sqrt();
        shared.iter_mut().for_each(|v| *v /= norm);

        let mut truth_scorers = Vec::with_capacity(num_tasks);
        let mut specialists = Vec::with_capacity(num_tasks);
        for _ in 0..num_tasks {
            let delta: Vec<f64> = (0..TOY_FEATURES).map(|_| gaussian(&mut rng)).collect();
            let dn = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let truth: Vec<f64> = shared
                .iter()
                .zip(&delta)
                .map(|(s, d)| s + TOY_TASK_SCALE * d / dn)
                .collect();
            let noise: Vec<f64> = (0..TOY_FEATURES).map(|_| gaussian(&mut rng)).collect();
            let nn = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
            let specialist: Vec<f64> = truth
                .iter()
                .zip(&noise)
                .map(|(t, n)| t + TOY_NOISE_SCALE * n / nn)
                .collect();
            truth_scorers.push(truth);
            specialists.push(specialist);
        }

        let ground_truth: Vec<Vec<Vec<bool>>> = truth_scorers
            .iter()
            .map(|truth| {
                features
                    .iter()
                    .map(|img| score_mask(img, truth))
                    .collect()
            })
            .collect();
        let degenerate = ground_truth.iter().flatten().any(|mask| {
            let on = mask.iter().filter(|&&b| b).count();
            on == 0 || on == mask.len()
        });
        if degenerate {
            continue;
        }

        let specialist_mean_loss: Vec<f64> = specialists
            .iter()
            .map(|w| {
                (0..num_tasks)
                    .map(|t| mean_dice_loss(&features, &ground_truth[t], w))
                    .sum::<f64>()
                    / num_tasks as f64
            })
            .collect();
        let own_task_competent = specialists.iter().enumerate().all(|(t, w)| {
            mean_dice_loss(&features, &ground_truth[t], w) < 0.3
        });
        if !own_task_competent {
            continue;
        }
        let best_specialist = specialist_mean_loss
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);

        // Pairwise grid over linear weights of two specialists.
        let mut best_merge = f64::INFINITY;
        for a in 0..num_tasks {
            for b in a + 1..num_tasks {
                for wa_step in 0..=20 {
                    for wb_step in 0..=20 {
                        let wa = wa_step as f64 / 20.0;
                        let wb = wb_step as f64 / 20.0;
                        let w: Vec<f64> = specialists[a]
                            .iter()
                            .zip(&specialists[b])
                            .map(|(x, y)| wa * x + wb * y)
                            .collect();
                        let loss = (0..num_tasks)
                            .map(|t| mean_dice_loss(&features, &ground_truth[t], &w))
                            .sum::<f64>()
                            / num_tasks as f64;
                        best_merge = best_merge.min(loss);
                    }
                }
            }
        }
        if best_merge > best_specialist - 0.02 {
            continue;
        }

        let to_f32 = |w: &[f64]| -> Vec<f32> { w.iter().map(|&v| v as f32).collect() };
        let base = layout.model_from_flat(&to_f32(&shared))?;
        let candidates = specialists
            .iter()
            .map(|w| layout.model_from_flat(&to_f32(w)))
            .collect::<Result<Vec<_>, _>>()?;
        let tasks = (0..num_tasks).map(|t| format!("seg{t}")).collect();
        return Ok(ToySegmentationProblem {
            layout,
            base,
            candidates,
            tasks,
            seed,
            features,
            ground_truth,
            truth_scorers,
        });
    }
    Err(EvalError::Construction(
        "no well-posed draw found for this seed".into(),
    ))
}

impl ToySegmentationProblem {
    pub fn base(&self) -> &ModelParams {
        &self.base
    }

    pub fn candidates(&self) -> &[ModelParams] {
        &self.candidates
    }

    pub fn schema(&self) -> &ArchitectureSchema {
        &self.layout.schema
    }

    pub fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    /// A task's ground-truth scorer packaged as a checkpoint.
    pub fn truth_scorer(&self, task: usize) -> ModelParams {
        let flat: Vec<f32> = self.truth_scorers[task].iter().map(|&v| v as f32).collect();
        self.layout.model_from_flat(&flat).expect("layout matches")
    }

    pub fn candidate_losses(&self, k: usize) -> Result<TaskLossVector, EvalError> {
        evaluate_toy_segmentation(self, &self.candidates[k])
    }

    /// Mean loss of the best pairwise linear combination of specialists on a
    /// 21x21 weight grid; an independent floor for search results.
    pub fn pairwise_grid_best(&self) -> f64 {
        let flats: Vec<Vec<f64>> = self
            .candidates
            .iter()
            .map(|c| c.flatten().iter().map(|&v| v as f64).collect())
            .collect();
        let mut best = f64::INFINITY;
        for a in 0..flats.len() {
            for b in a + 1..flats.len() {
                for wa_step in 0..=20 {
                    for wb_step in 0..=20 {
                        let wa = wa_step as f64 / 20.0;
                        let wb = wb_step as f64 / 20.0;
                        let w: Vec<f64> = flats[a]
                            .iter()
                            .zip(&flats[b])
                            .map(|(x, y)| wa * x + wb * y)
                            .collect();
                        let loss = (0..self.tasks.len())
                            .map(|t| mean_dice_loss(&self.features, &self.ground_truth[t], &w))
                            .sum::<f64>()
                            / self.tasks.len() as f64;
                        best = best.min(loss);
                    }
                }
            }
        }
        best
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, EvalError> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save_checkpoint(&self.base, dir.join("base.mrg"))?;
        for (i, cand) in self.candidates.iter().enumerate() {
            checkpoint::save_checkpoint(cand, dir.join(format!("candidate-{}.mrg", i + 1)))?;
        }
        let manifest = ManifestFile::ToySegmentation {
            seed: self.seed,
            tasks: self.tasks.len(),
        };
        let path = dir.join("problem.json");
        std::fs::write(&path, crate::json::to_canonical_string(&manifest).unwrap())?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest: ManifestFile =
            serde_json::from_str(&text).map_err(|e| EvalError::Manifest(e.to_string()))?;
        let ManifestFile::ToySegmentation { seed, tasks } = manifest else {
            return Err(EvalError::Manifest(
                "manifest is not a toy segmentation problem".into(),
            ));
        };
        make_toy_segmentation_problem(seed, tasks)
    }
}

/// Loss = `1 - mean Dice` per task over the calibration images, using the
/// merged checkpoint's flattened parameters as the pixel scorer.
pub fn evaluate_toy_segmentation(
    problem: &ToySegmentationProblem,
    merged: &ModelParams,
) -> Result<TaskLossVector, EvalError> {
    check_same_structure(merged, &problem.base)?;
    let weights: Vec<f64> = merged.flatten().iter().map(|&v| v as f64).collect();
    let losses = problem
        .tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            (
                task.clone(),
                mean_dice_loss(&problem.features, &problem.ground_truth[t], &weights),
            )
        })
        .collect::<Vec<_>>();
    Ok(TaskLossVector::new(losses).expect("finite by construction"))
}

impl Evaluator for ToySegmentationProblem {
    fn tasks(&self) -> &[String] {
        &self.tasks
    }

    fn evaluate(
        &self,
        merged: &ModelParams,
        _trial_index: usize,
    ) -> Result<TaskLossVector, EvalError> {
        evaluate_toy_segmentation(self, merged)
    }
}

// ---------------------------------------------------------------------------
// External command protocol
// ---------------------------------------------------------------------------

fn default_timeout() -> f64 {
    300.0
}

/// Out-of-process evaluation: the command template runs with `{model}`
/// replaced by the merged checkpoint path (and `{tasks}` by the
/// comma-joined task list), and must print, as the final line of stdout,
/// `{"scores": {"<task>": <value in [0,1]>, ...}}` covering exactly the
/// declared tasks. Losses are `1 - score`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalEvaluatorSpec {
    /// Executable and argument template; some argument must contain `{model}`.
    pub command: Vec<String>,
    pub tasks: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub failure_policy: FailurePolicy,
}

impl ExternalEvaluatorSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.command.is_empty() {
            return Err(EvalError::Construction("empty command template".into()));
        }
        if !self.command.iter().any(|arg| arg.contains("{model}")) {
            return Err(EvalError::Construction(
                "command template must contain the {model} placeholder".into(),
            ));
        }
        if self.tasks.is_empty() {
            return Err(EvalError::Construction("empty task list".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct ScoreLine {
    scores: BTreeMap<String, f64>,
}

/// Run the external command against an existing merged checkpoint and parse
/// the losses off its final stdout line.
pub fn evaluate_external(
    spec: &ExternalEvaluatorSpec,
    merged_path: &Path,
) -> Result<TaskLossVector, EvalError> {
    evaluate_external_in(spec, merged_path, None)
}

fn evaluate_external_in(
    spec: &ExternalEvaluatorSpec,
    merged_path: &Path,
    work_dir: Option<&Path>,
) -> Result<TaskLossVector, EvalError> {
    spec.validate()?;
    let model = merged_path.to_string_lossy();
    let tasks_arg = spec.tasks.join(",");
    let argv: Vec<String> = spec
        .command
        .iter()
        .map(|arg| arg.replace("{model}", &model).replace("{tasks}", &tasks_arg))
        .collect();

    let mut command = Command::new(&argv[0]);
    command
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = work_dir {
        command.current_dir(dir);
    }
    let mut child = command.spawn()?;

    // Drain both pipes on threads so a chatty child cannot deadlock on a
    // full pipe buffer while we poll for exit.
    let mut stdout_pipe = child.stdout.take().expect("stdout piped");
    let mut stderr_pipe = child.stderr.take().expect("stderr piped");
    let stdout_thread = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stdout_pipe.read_to_string(&mut buf);
        buf
    });
    let stderr_thread = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr_pipe.read_to_string(&mut buf);
        buf
    });

    let deadline = Instant::now() + Duration::from_secs_f64(spec.timeout_secs.max(0.0));
    let status = loop {
        match child.try_wait()? {
            Some(status) => break status,
            None => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    // Leave the drain threads detached: grandchildren may
                    // still hold the pipes open and blocking here would wait
                    // for them.
                    drop(stdout_thread);
                    drop(stderr_thread);
                    return Err(EvalError::Timeout(spec.timeout_secs));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    };
    let stdout = stdout_thread.join().unwrap_or_default();
    let stderr = stderr_thread.join().unwrap_or_default();

    if !status.success() {
        return Err(EvalError::CommandFailed {
            status: status.code().unwrap_or(-1),
            stderr,
        });
    }

    let last_line = stdout
        .trim_end()
        .lines()
        .next_back()
        .unwrap_or("")
        .to_string();
    let parsed: ScoreLine = serde_json::from_str(&last_line).map_err(|e| EvalError::Protocol {
        detail: format!("final stdout line is not a scores object: {e}"),
        output: stdout.clone(),
    })?;

    for task in &spec.tasks {
        if !parsed.scores.contains_key(task) {
            return Err(EvalError::Protocol {
                detail: format!("missing score for task `{task}`"),
                output: stdout,
            });
        }
    }
    for task in parsed.scores.keys() {
        if !spec.tasks.contains(task) {
            return Err(EvalError::Protocol {
                detail: format!("score reported for undeclared task `{task}`"),
                output: stdout,
            });
        }
    }
    let mut losses = Vec::with_capacity(spec.tasks.len());
    for (task, score) in &parsed.scores {
        if !(0.0..=1.0).contains(score) || !score.is_finite() {
            return Err(EvalError::Protocol {
                detail: format!("score {score} for task `{task}` outside [0, 1]"),
                output: stdout,
            });
        }
        losses.push((task.clone(), 1.0 - score));
    }
    Ok(TaskLossVector::new(losses).expect("nonempty and finite"))
}

/// [`Evaluator`] wrapper around the external protocol: writes each trial's
/// checkpoint as `trial-<index>.mrg` under the work directory and runs the
/// command from a per-trial subdirectory.
pub struct ExternalEvaluator {
    spec: ExternalEvaluatorSpec,
    work_dir: PathBuf,
}

impl ExternalEvaluator {
    pub fn new(spec: ExternalEvaluatorSpec, work_dir: impl Into<PathBuf>) -> Result<Self, EvalError> {
        spec.validate()?;
        let work_dir = work_dir.into();
        std::fs::create_dir_all(&work_dir)?;
        Ok(Self { spec, work_dir })
    }

    pub fn spec(&self) -> &ExternalEvaluatorSpec {
        &self.spec
    }
}

impl Evaluator for ExternalEvaluator {
    fn tasks(&self) -> &[String] {
        &self.spec.tasks
    }

    fn evaluate(
        &self,
        merged: &ModelParams,
        trial_index: usize,
    ) -> Result<TaskLossVector, EvalError> {
        let model_path = self.work_dir.join(format!("trial-{trial_index}.mrg"));
        checkpoint::save_checkpoint(merged, &model_path)?;
        let run_dir = self.work_dir.join(format!("run-{trial_index}"));
        std::fs::create_dir_all(&run_dir)?;
        // The command runs from its own directory, so the substituted model
        // path must not depend on the working directory.
        let model_path = std::path::absolute(&model_path)?;
        evaluate_external_in(&self.spec, &model_path, Some(&run_dir))
    }
}

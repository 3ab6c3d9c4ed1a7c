//! Expected-improvement search over merge configurations.
//!
//! The loop draws an initial random design, then repeatedly fits the
//! random-forest surrogate on all evaluated configurations, scores a
//! candidate pool (fresh random samples plus local mutations of the best
//! known configurations) by expected improvement, merges and evaluates the
//! argmax, and commits it to the history.
//!
//! Multi-objective mode re-draws simplex scalarization weights every
//! iteration and re-scalarizes the whole history under them before the
//! surrogate fit, maintaining a Pareto front over the raw loss vectors.
//! Single-task mode is the one-task special case (scalar = (1 + alpha) *
//! loss), so both modes share one code path.
//!
//! With `workers > 1`, proposals for a batch are generated sequentially
//! from the shared history snapshot, evaluated concurrently, and committed
//! in proposal order, so results depend only on (seed, space, problem,
//! budget, workers) and not on scheduling.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::ModelParams;
use crate::evaluator::{EvalError, Evaluator, FailurePolicy};
use crate::forest::{fit, ForestParams, SurrogateError};
use crate::merge::{apply_config, MergeError};
use crate::objective::{
    parego_scalarize, pareto_front, sample_simplex_weights, select_final, ObjectiveError,
    ScalarizationWeights, TaskLossVector,
};
use crate::par;
use crate::schema::{partition_layers, validate_compatible, CompatError, LayerGroup, SchemaError};
use crate::space::{encode, mutate, sample_config, FeatureVector, MergeConfig, SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("budget {budget} is below the initial design size {n_init}")]
    BudgetTooSmall { budget: usize, n_init: usize },
    #[error("single-task mode needs exactly one task, the evaluator exposes {0}")]
    SingleModeTaskCount(usize),
    #[error("space is built for {space} candidates but {given} were supplied")]
    CandidateCountMismatch { space: usize, given: usize },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Compat(#[from] CompatError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Single,
    Multi,
}

/// Knobs for one search run. `new` fills in the documented defaults; the
/// candidate pool sizes trade acquisition quality against per-iteration
/// cost.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchOptions {
    pub mode: SearchMode,
    /// Total number of evaluations performed.
    pub budget: usize,
    pub seed: u64,
    /// Augmentation constant of the Tchebycheff scalarization.
    pub alpha: f64,
    /// Concurrent evaluations per batch.
    pub workers: usize,
    pub failure_policy: FailurePolicy,
    pub forest: ForestParams,
    /// Random configurations scored per acquisition round.
    pub random_candidates: usize,
    /// Best historical configurations used as mutation seeds.
    pub elite_count: usize,
    /// Mutations generated per elite configuration.
    pub mutations_per_elite: usize,
}

impl SearchOptions {
    pub fn new(mode: SearchMode, budget: usize, seed: u64) -> Self {
        Self {
            mode,
            budget,
            seed,
            alpha: 0.05,
            workers: 1,
            failure_policy: FailurePolicy::default(),
            forest: ForestParams::default(),
            random_candidates: 1000,
            elite_count: 10,
            mutations_per_elite: 10,
        }
    }

    /// Random trials before the first surrogate fit.
    pub fn n_init(&self) -> usize {
        self.budget.div_ceil(10).max(8)
    }
}

/// One evaluated configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub config: MergeConfig,
    /// Surrogate features; cheap to recompute, so not serialized.
    #[serde(skip)]
    pub features: FeatureVector,
    pub losses: TaskLossVector,
    /// Scalarized value under the most recent weights.
    pub scalar: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub mode: SearchMode,
    pub seed: u64,
    pub budget: usize,
    pub best_index: usize,
    pub best_config: MergeConfig,
    /// Minimum scalar (single mode) or the selected front member's mean
    /// loss (multi mode).
    pub best_value: f64,
    pub history: Vec<TrialRecord>,
    /// History indices of the Pareto front (multi mode; empty otherwise).
    pub pareto_indices: Vec<usize>,
    /// Scalarization weights of the final iteration (multi mode).
    pub final_weights: Option<ScalarizationWeights>,
}

impl SearchResult {
    pub fn to_json(&self) -> serde_json::Result<String> {
        crate::json::to_canonical_string(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

fn erf(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn standard_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (std::f64::consts::TAU).sqrt()
}

/// Expected improvement of a Gaussian prediction over the incumbent
/// `f_best` (minimization): `E[max(f_best - f, 0)]`.
///
/// With zero variance this degenerates to `max(f_best - mean, 0)`.
///
/// # Panics
/// On NaN inputs or negative variance.
pub fn expected_improvement(mean: f64, variance: f64, f_best: f64) -> f64 {
    assert!(
        !mean.is_nan() && !variance.is_nan() && !f_best.is_nan(),
        "expected_improvement: NaN input"
    );
    assert!(variance >= 0.0, "expected_improvement: negative variance");
    let improvement = f_best - mean;
    let sigma = variance.sqrt();
    if sigma == 0.0 {
        return improvement.max(0.0);
    }
    let z = improvement / sigma;
    // The closed form is nonnegative; the erf approximation can dip a few
    // 1e-8 below zero deep in the tail, so clamp.
    (improvement * standard_normal_cdf(z) + sigma * standard_normal_pdf(z)).max(0.0)
}

/// Propose the next configuration to evaluate.
///
/// Below the initial design size this is a fresh uniform sample. Otherwise
/// the surrogate is fitted on (features, scalars), a pool of
/// `random_candidates` fresh samples plus `mutations_per_elite` mutations of
/// each of the `elite_count` best records is scored, and the expected
/// improvement argmax is returned (ties resolved toward the lower predicted
/// mean, then pool order).
pub fn propose_next(
    history: &[TrialRecord],
    space: &SearchSpace,
    options: &SearchOptions,
    rng: &mut ChaCha8Rng,
) -> Result<MergeConfig, SearchError> {
    if history.len() < options.n_init() {
        return Ok(sample_config(space, rng));
    }
    let mut pool: Vec<MergeConfig> = (0..options.random_candidates)
        .map(|_| sample_config(space, rng))
        .collect();
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| {
        history[a]
            .scalar
            .total_cmp(&history[b].scalar)
            .then_with(|| history[a].index.cmp(&history[b].index))
    });
    for &elite in order.iter().take(options.elite_count) {
        for _ in 0..options.mutations_per_elite {
            pool.push(mutate(&history[elite].config, space, rng));
        }
    }

    let x: Vec<FeatureVector> = history.iter().map(|r| r.features.clone()).collect();
    let y: Vec<f64> = history.iter().map(|r| r.scalar).collect();
    let forest_seed: u64 = rng.random();
    let forest = fit(&x, &y, &options.forest, forest_seed)?;
    let f_best = y.iter().cloned().fold(f64::INFINITY, f64::min);

    let scored: Vec<(f64, f64)> = par::map_slice(&pool, |config| {
        let fv = encode(config, space).expect("pool configs are valid for the space");
        let (mean, variance) = forest.predict(&fv).expect("feature length is fixed");
        (expected_improvement(mean, variance, f_best), mean)
    });
    let mut best = 0;
    for i in 1..pool.len() {
        let (ei, mean) = scored[i];
        let (best_ei, best_mean) = scored[best];
        if ei > best_ei || (ei == best_ei && mean < best_mean) {
            best = i;
        }
    }
    Ok(pool.swap_remove(best))
}

/// Run the full search: exactly `options.budget` merge-and-evaluate trials
/// against `evaluator`, returning the complete history plus the best
/// configuration (single mode: minimum scalar; multi mode: the Pareto front
/// member with the lowest mean loss).
pub fn run_search<E>(
    base: &ModelParams,
    candidates: &[ModelParams],
    space: &SearchSpace,
    evaluator: &E,
    options: &SearchOptions,
) -> Result<SearchResult, SearchError>
where
    E: Evaluator + ?Sized,
{
    space.validate()?;
    if candidates.len() != space.num_candidates {
        return Err(SearchError::CandidateCountMismatch {
            space: space.num_candidates,
            given: candidates.len(),
        });
    }
    let tasks = evaluator.tasks().to_vec();
    if options.mode == SearchMode::Single && tasks.len() != 1 {
        return Err(SearchError::SingleModeTaskCount(tasks.len()));
    }
    if tasks.is_empty() {
        return Err(SearchError::SingleModeTaskCount(0));
    }
    let n_init = options.n_init();
    if options.budget < n_init {
        return Err(SearchError::BudgetTooSmall {
            budget: options.budget,
            n_init,
        });
    }
    let models: Vec<&ModelParams> = std::iter::once(base).chain(candidates.iter()).collect();
    validate_compatible(&models, &space.schema)?;

    // Partitions for every reachable granularity triple, bound to the base
    // model's tensor names.
    let names: Vec<String> = base.names().map(str::to_string).collect();
    let (lo, hi) = space.granularity_range;
    let mut partitions: HashMap<(usize, usize, usize), Vec<LayerGroup>> = HashMap::new();
    for g_enc in lo..=hi {
        for g_prompt in lo..=hi {
            for g_dec in lo..=hi {
                let groups = partition_layers(&space.schema, g_enc, g_prompt, g_dec, &names)?;
                partitions.insert((g_enc, g_prompt, g_dec), groups);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut history: Vec<TrialRecord> = Vec::with_capacity(options.budget);
    let mut weights = ScalarizationWeights::uniform(tasks.len())?;
    let workers = options.workers.max(1);
    let mut evaluated = 0;

    while evaluated < options.budget {
        let batch = workers.min(options.budget - evaluated);
        if options.mode == SearchMode::Multi {
            weights = sample_simplex_weights(tasks.len(), &mut rng)?;
            for record in &mut history {
                record.scalar = parego_scalarize(&record.losses, &weights, options.alpha)?;
            }
        }
        let mut proposals = Vec::with_capacity(batch);
        for _ in 0..batch {
            proposals.push(propose_next(&history, space, options, &mut rng)?);
        }

        let outcomes: Vec<Result<(TaskLossVector, f64), SearchError>> = {
            let work: Vec<(usize, MergeConfig)> = proposals
                .iter()
                .enumerate()
                .map(|(i, c)| (evaluated + i, c.clone()))
                .collect();
            par::map_slice(&work, |(trial_index, config)| {
                let started = Instant::now();
                let groups = &partitions[&(config.g_enc, config.g_prompt, config.g_dec)];
                let merged = apply_config(base, candidates, config, groups)?;
                let losses = match evaluator.evaluate(&merged, *trial_index) {
                    Ok(losses) => losses,
                    Err(error) => match options.failure_policy {
                        FailurePolicy::Abort => return Err(error.into()),
                        FailurePolicy::Penalize => TaskLossVector::constant(&tasks, 1.0)?,
                    },
                };
                Ok((losses, started.elapsed().as_secs_f64()))
            })
        };
        for (offset, (config, outcome)) in proposals.into_iter().zip(outcomes).enumerate() {
            let (losses, seconds) = outcome?;
            let scalar = parego_scalarize(&losses, &weights, options.alpha)?;
            let features = encode(&config, space)?;
            history.push(TrialRecord {
                index: evaluated + offset,
                config,
                features,
                losses,
                scalar,
                seconds,
            });
        }
        evaluated += batch;
    }

    let (best_index, best_value, pareto_indices, final_weights) = match options.mode {
        SearchMode::Single => {
            let mut best = 0;
            for (i, record) in history.iter().enumerate() {
                if record.scalar < history[best].scalar {
                    best = i;
                }
            }
            (best, history[best].scalar, Vec::new(), None)
        }
        SearchMode::Multi => {
            let losses: Vec<TaskLossVector> = history.iter().map(|r| r.losses.clone()).collect();
            let front = pareto_front(&losses)?;
            let front_losses: Vec<TaskLossVector> =
                front.iter().map(|&i| losses[i].clone()).collect();
            let selected = select_final(&front_losses)?;
            (
                front[selected],
                front_losses[selected].mean(),
                front,
                Some(weights),
            )
        }
    };

    Ok(SearchResult {
        mode: options.mode,
        seed: options.seed,
        budget: options.budget,
        best_index,
        best_config: history[best_index].config.clone(),
        best_value,
        history,
        pareto_indices,
        final_weights,
    })
}

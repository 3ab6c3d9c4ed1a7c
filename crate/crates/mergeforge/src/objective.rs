//! Task losses and multi-objective machinery: Dice overlap, augmented
//! Tchebycheff scalarization with simplex-sampled weights, and Pareto-front
//! maintenance over minimization objectives.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("mask lengths differ: {0} vs {1}")]
    MaskShapeMismatch(usize, usize),
    #[error("{weights} weights for {tasks} tasks")]
    DimensionMismatch { weights: usize, tasks: usize },
    #[error("weights must be nonnegative and sum to 1, got sum {0}")]
    InvalidWeights(f64),
    #[error("need at least one task")]
    NoTasks,
    #[error("empty history")]
    EmptyHistory,
    #[error("loss for task `{0}` is not finite")]
    NonFiniteLoss(String),
    #[error("task sets differ across loss vectors")]
    TaskSetMismatch,
}

/// Per-task losses for one evaluated model, ordered by task name.
/// Segmentation backends report `1 - Dice`; every loss lives in [0, 1]
/// for synthetic backends as well.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskLossVector {
    losses: BTreeMap<String, f64>,
}

impl TaskLossVector {
    pub fn new(
        losses: impl IntoIterator<Item = (String, f64)>,
    ) -> Result<Self, ObjectiveError> {
        let losses: BTreeMap<String, f64> = losses.into_iter().collect();
        if losses.is_empty() {
            return Err(ObjectiveError::NoTasks);
        }
        for (task, loss) in &losses {
            if !loss.is_finite() {
                return Err(ObjectiveError::NonFiniteLoss(task.clone()));
            }
        }
        Ok(Self { losses })
    }

    /// Constant loss across a task set; used by the penalizing failure policy.
    pub fn constant(tasks: &[String], value: f64) -> Result<Self, ObjectiveError> {
        Self::new(tasks.iter().map(|t| (t.clone(), value)))
    }

    pub fn get(&self, task: &str) -> Option<f64> {
        self.losses.get(task).copied()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.losses.keys().map(String::as_str)
    }

    /// Losses in task order.
    pub fn values(&self) -> Vec<f64> {
        self.losses.values().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.losses.values().sum::<f64>() / self.losses.len() as f64
    }

    fn same_tasks(&self, other: &Self) -> bool {
        self.losses.len() == other.losses.len()
            && self.losses.keys().zip(other.losses.keys()).all(|(a, b)| a == b)
    }
}

/// Nonnegative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalarizationWeights(Vec<f64>);

impl ScalarizationWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, ObjectiveError> {
        if weights.is_empty() {
            return Err(ObjectiveError::NoTasks);
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(ObjectiveError::InvalidWeights(sum));
        }
        Ok(Self(weights))
    }

    pub fn uniform(m: usize) -> Result<Self, ObjectiveError> {
        if m == 0 {
            return Err(ObjectiveError::NoTasks);
        }
        if m == 1 {
            return Ok(Self(vec![1.0]));
        }
        Ok(Self(vec![1.0 / m as f64; m]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Dice overlap `2|A∩B| / (|A| + |B|)` between two binary masks of equal
/// size. Two empty masks count as a perfect match.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64, ObjectiveError> {
    if a.len() != b.len() {
        return Err(ObjectiveError::MaskShapeMismatch(a.len(), b.len()));
    }
    let mut intersection = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        intersection += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection as f64 / total as f64)
}

/// Augmented Tchebycheff scalarization:
/// `max_i(w_i * f_i) + alpha * sum_i(w_i * f_i)`.
pub fn parego_scalarize(
    losses: &TaskLossVector,
    weights: &ScalarizationWeights,
    alpha: f64,
) -> Result<f64, ObjectiveError> {
    if weights.len() != losses.len() {
        return Err(ObjectiveError::DimensionMismatch {
            weights: weights.len(),
            tasks: losses.len(),
        });
    }
    let mut max_term = f64::NEG_INFINITY;
    let mut sum_term = 0.0;
    for (w, f) in weights.as_slice().iter().zip(losses.values()) {
        let wf = w * f;
        max_term = max_term.max(wf);
        sum_term += wf;
    }
    Ok(max_term + alpha * sum_term)
}

/// Uniform draw from the (m-1)-simplex via normalized exponentials.
pub fn sample_simplex_weights(
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ScalarizationWeights, ObjectiveError> {
    if m == 0 {
        return Err(ObjectiveError::NoTasks);
    }
    if m == 1 {
        return Ok(ScalarizationWeights(vec![1.0]));
    }
    let draws: Vec<f64> = (0..m)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = draws.iter().sum();
    ScalarizationWeights::new(draws.iter().map(|d| d / total).collect())
}

fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

/// Indices of non-dominated loss vectors under minimization. Exact
/// duplicates keep only their earliest index.
pub fn pareto_front(history: &[TaskLossVector]) -> Result<Vec<usize>, ObjectiveError> {
    if history.is_empty() {
        return Err(ObjectiveError::EmptyHistory);
    }
    for entry in &history[1..] {
        if !entry.same_tasks(&history[0]) {
            return Err(ObjectiveError::TaskSetMismatch);
        }
    }
    let values: Vec<Vec<f64>> = history.iter().map(TaskLossVector::values).collect();
    let mut front = Vec::new();
    'outer: for i in 0..values.len() {
        for j in 0..values.len() {
            if i == j {
                continue;
            }
            if dominates(&values[j], &values[i]) {
                continue 'outer;
            }
            if j < i && values[j] == values[i] {
                continue 'outer;
            }
        }
        front.push(i);
    }
    Ok(front)
}

/// Pick the front member with the lowest mean loss; ties go to the earliest.
pub fn select_final(front: &[TaskLossVector]) -> Result<usize, ObjectiveError> {
    if front.is_empty() {
        return Err(ObjectiveError::EmptyHistory);
    }
    let mut best = 0;
    let mut best_mean = front[0].mean();
    for (i, entry) in front.iter().enumerate().skip(1) {
        let mean = entry.mean();
        if mean < best_mean {
            best = i;
            best_mean = mean;
        }
    }
    Ok(best)
}

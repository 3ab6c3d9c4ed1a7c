//! Random-forest regression over feature vectors.
//!
//! Trees are grown on bootstrap resamples with axis-aligned splits chosen to
//! maximize variance reduction over a per-node random feature subset; leaves
//! predict the mean of their training targets. The forest reports the mean
//! and the cross-tree population variance of the per-tree predictions, which
//! the optimizer uses as an uncertainty estimate.
//!
//! Each tree derives its own rng stream from (seed, tree index), so building
//! trees in parallel cannot change the fitted model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;
use crate::space::FeatureVector;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("no training data")]
    EmptyTrainingSet,
    #[error("{x} feature rows but {y} targets")]
    RowCountMismatch { x: usize, y: usize },
    #[error("target at row {0} is not finite")]
    NonFiniteTarget(usize),
    #[error("feature length {found} does not match the forest's {expected}")]
    FeatureLengthMismatch { expected: usize, found: usize },
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Fraction of features considered at each split.
    pub feature_subsample: f64,
    /// Minimum training points per leaf.
    pub min_leaf: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 50,
            feature_subsample: 0.8,
            min_leaf: 3,
        }
    }
}

#[derive(Clone, Debug)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf(value) => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
}

/// Fit a forest on feature rows `x` and targets `y`; deterministic in `seed`.
pub fn fit(
    x: &[FeatureVector],
    y: &[f64],
    params: &ForestParams,
    seed: u64,
) -> Result<Forest, SurrogateError> {
    if x.is_empty() {
        return Err(SurrogateError::EmptyTrainingSet);
    }
    if x.len() != y.len() {
        return Err(SurrogateError::RowCountMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if let Some(row) = y.iter().position(|v| !v.is_finite()) {
        return Err(SurrogateError::NonFiniteTarget(row));
    }
    if params.n_trees == 0 {
        return Err(SurrogateError::InvalidParams("n_trees must be >= 1".into()));
    }
    if params.min_leaf == 0 {
        return Err(SurrogateError::InvalidParams("min_leaf must be >= 1".into()));
    }
    if !(params.feature_subsample > 0.0 && params.feature_subsample <= 1.0) {
        return Err(SurrogateError::InvalidParams(
            "feature_subsample must be in (0, 1]".into(),
        ));
    }
    let n_features = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != n_features {
            return Err(SurrogateError::FeatureLengthMismatch {
                expected: n_features,
                found: x[i].len(),
            });
        }
    }

    let trees = par::map_range(params.n_trees, |tree_idx| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(tree_idx as u64 + 1);
        grow_tree(x, y, params, &mut rng)
    });
    Ok(Forest { trees, n_features })
}

impl Forest {
    /// Predictive mean and cross-tree population variance at `x`.
    pub fn predict(&self, x: &FeatureVector) -> Result<(f64, f64), SurrogateError> {
        if x.len() != self.n_features {
            return Err(SurrogateError::FeatureLengthMismatch {
                expected: self.n_features,
                found: x.len(),
            });
        }
        let preds: Vec<f64> = self.trees.iter().map(|t| t.predict(&x.0)).collect();
        let mean = preds.iter().sum::<f64>() / preds.len() as f64;
        let variance = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>()
            / preds.len() as f64;
        Ok((mean, variance))
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }
}

fn grow_tree(x: &[FeatureVector], y: &[f64], params: &ForestParams, rng: &mut ChaCha8Rng) -> Tree {
    let n = x.len();
    let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let mut nodes = Vec::new();
    build_node(x, y, sample, params, rng, &mut nodes);
    Tree { nodes }
}

/// Depth-first construction; returns the index of the created node.
fn build_node(
    x: &[FeatureVector],
    y: &[f64],
    rows: Vec<usize>,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
    if rows.len() < 2 * params.min_leaf {
        nodes.push(Node::Leaf(mean));
        return nodes.len() - 1;
    }
    let spread = rows
        .iter()
        .map(|&r| (y[r] - mean) * (y[r] - mean))
        .sum::<f64>();
    if spread == 0.0 {
        nodes.push(Node::Leaf(mean));
        return nodes.len() - 1;
    }

    let n_features = x[0].len();
    let subset = feature_subset(n_features, params.feature_subsample, rng);
    let mut best: Option<(f64, usize, f64)> = None; // (gain proxy, feature, threshold)
    let mut scratch: Vec<(f64, f64)> = Vec::with_capacity(rows.len());
    for &feature in &subset {
        scratch.clear();
        scratch.extend(rows.iter().map(|&r| (x[r].0[feature], y[r])));
        scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = scratch.iter().map(|(_, t)| t).sum();
        let count = scratch.len();
        let mut left_sum = 0.0;
        for i in 0..count - 1 {
            left_sum += scratch[i].1;
            let left_n = i + 1;
            let right_n = count - left_n;
            if left_n < params.min_leaf || right_n < params.min_leaf {
                continue;
            }
            if scratch[i].0 == scratch[i + 1].0 {
                continue; // no threshold separates equal values
            }
            let right_sum = total - left_sum;
            // Maximizing variance reduction is equivalent to maximizing
            // sum_left^2/n_left + sum_right^2/n_right.
            let gain =
                left_sum * left_sum / left_n as f64 + right_sum * right_sum / right_n as f64;
            let threshold = 0.5 * (scratch[i].0 + scratch[i + 1].0);
            if best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, feature, threshold));
            }
        }
    }

    let Some((_, feature, threshold)) = best else {
        nodes.push(Node::Leaf(mean));
        return nodes.len() - 1;
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.into_iter().partition(|&r| x[r].0[feature] <= threshold);
    let here = nodes.len();
    nodes.push(Node::Leaf(f64::NAN)); // placeholder until children exist
    let left = build_node(x, y, left_rows, params, rng, nodes);
    let right = build_node(x, y, right_rows, params, rng, nodes);
    nodes[here] = Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    here
}

fn feature_subset(n_features: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let m = ((n_features as f64 * ratio).ceil() as usize).clamp(1, n_features);
    let mut all: Vec<usize> = (0..n_features).collect();
    for i in 0..m {
        let j = rng.random_range(i..n_features);
        all.swap(i, j);
    }
    all.truncate(m);
    all
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector(values.to_vec())
    }

    #[test]
    fn constant_targets_predict_the_constant() {
        let x: Vec<FeatureVector> = (0..20).map(|i| fv(&[i as f64, -(i as f64)])).collect();
        let y = vec![3.25; 20];
        let forest = fit(&x, &y, &ForestParams::default(), 1).unwrap();
        for probe in &x {
            let (mean, variance) = forest.predict(probe).unwrap();
            assert_eq!(mean, 3.25);
            assert_eq!(variance, 0.0);
        }
    }

    #[test]
    fn fitting_is_seed_deterministic() {
        let x: Vec<FeatureVector> = (0..40)
            .map(|i| fv(&[(i % 7) as f64, (i % 5) as f64, i as f64 / 40.0]))
            .collect();
        let y: Vec<f64> = x.iter().map(|r| r.0.iter().sum::<f64>()).collect();
        let f1 = fit(&x, &y, &ForestParams::default(), 99).unwrap();
        let f2 = fit(&x, &y, &ForestParams::default(), 99).unwrap();
        for probe in &x {
            assert_eq!(f1.predict(probe).unwrap(), f2.predict(probe).unwrap());
        }
    }

    #[test]
    fn fits_additive_function_with_high_r2() {
        // 200-point grid, target = sum of coordinates.
        let mut x = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..2 {
                    x.push(fv(&[i as f64 / 9.0, j as f64 / 9.0, k as f64]));
                }
            }
        }
        let y: Vec<f64> = x.iter().map(|r| r.0.iter().sum::<f64>()).collect();
        let forest = fit(&x, &y, &ForestParams::default(), 7).unwrap();
        let mean_y = y.iter().sum::<f64>() / y.len() as f64;
        let mut sse = 0.0;
        let mut sst = 0.0;
        for (row, target) in x.iter().zip(&y) {
            let (pred, _) = forest.predict(row).unwrap();
            sse += (pred - target) * (pred - target);
            sst += (target - mean_y) * (target - mean_y);
        }
        let r2 = 1.0 - sse / sst;
        assert!(r2 >= 0.9, "training R^2 {r2} below 0.9");
    }

    #[test]
    fn single_tree_has_zero_variance() {
        let x: Vec<FeatureVector> = (0..12).map(|i| fv(&[i as f64])).collect();
        let y: Vec<f64> = (0..12).map(|i| (i * i) as f64).collect();
        let params = ForestParams {
            n_trees: 1,
            ..Default::default()
        };
        let forest = fit(&x, &y, &params, 5).unwrap();
        let (_, variance) = forest.predict(&fv(&[4.0])).unwrap();
        assert_eq!(variance, 0.0);
    }

    #[test]
    fn two_leaf_forest_mean_and_variance_by_hand() {
        let forest = Forest {
            trees: vec![
                Tree {
                    nodes: vec![Node::Leaf(1.0)],
                },
                Tree {
                    nodes: vec![Node::Leaf(3.0)],
                },
            ],
            n_features: 1,
        };
        let (mean, variance) = forest.predict(&fv(&[0.0])).unwrap();
        assert_eq!(mean, 2.0);
        assert_eq!(variance, 1.0);
    }

    #[test]
    fn predictions_bounded_by_training_targets() {
        let x: Vec<FeatureVector> = (0..50).map(|i| fv(&[(i as f64).sin(), i as f64])).collect();
        let y: Vec<f64> = (0..50).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let (lo, hi) = (
            y.iter().cloned().fold(f64::INFINITY, f64::min),
            y.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        let forest = fit(&x, &y, &ForestParams::default(), 13).unwrap();
        for i in 0..100 {
            let probe = fv(&[(i as f64 * 0.37).sin(), i as f64 * 0.61]);
            let (mean, variance) = forest.predict(&probe).unwrap();
            assert!(variance >= 0.0);
            assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        }
    }

    #[test]
    fn empty_and_nan_inputs_rejected() {
        assert!(matches!(
            fit(&[], &[], &ForestParams::default(), 0),
            Err(SurrogateError::EmptyTrainingSet)
        ));
        let x = vec![fv(&[0.0])];
        assert!(matches!(
            fit(&x, &[f64::NAN], &ForestParams::default(), 0),
            Err(SurrogateError::NonFiniteTarget(0))
        ));
    }

    #[test]
    fn predict_rejects_wrong_length() {
        let x = vec![fv(&[0.0, 1.0]), fv(&[1.0, 0.0])];
        let y = vec![0.0, 1.0];
        let forest = fit(&x, &y, &ForestParams::default(), 0).unwrap();
        assert!(matches!(
            forest.predict(&fv(&[0.0])),
            Err(SurrogateError::FeatureLengthMismatch { .. })
        ));
    }
}

//! The search space of merge configurations: sampling, mutation, and a
//! fixed-length feature encoding for the surrogate model.
//!
//! A configuration holds one granularity per component plus one
//! [`GroupMergeSpec`] per realized group. Because the number of groups
//! varies with granularity, feature vectors are laid out over the maximum
//! possible group count and dimensions that are inactive for a given
//! configuration are imputed with -1, a value outside every active range.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merge::{GroupMergeSpec, MergeMethod};
use crate::schema::ArchitectureSchema;

/// Imputation value for inactive feature dimensions.
pub const INACTIVE: f64 = -1.0;

/// Standard deviation of the Gaussian used for local continuous moves.
const MUTATION_SIGMA: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("granularity {0} outside the allowed range [{1}, {2}]")]
    GranularityOutOfRange(usize, usize, usize),
    #[error("config has {specs} specs but granularities imply {expected} groups")]
    SpecCountMismatch { specs: usize, expected: usize },
    #[error("group {group}: {reason}")]
    InvalidSpec { group: usize, reason: String },
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("config JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-method hyperparameter intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperRanges {
    /// Scaling for task arithmetic and TIES, inclusive.
    pub scaling: (f64, f64),
    /// TIES retain ratio; the lower bound is exclusive.
    pub retain: (f64, f64),
    /// SLERP interpolation position, inclusive.
    pub t: (f64, f64),
    /// Linear per-model weight, inclusive.
    pub weight: (f64, f64),
}

impl Default for HyperRanges {
    fn default() -> Self {
        Self {
            scaling: (0.0, 1.0),
            retain: (0.0, 1.0),
            t: (0.0, 1.0),
            weight: (0.0, 1.0),
        }
    }
}

/// Everything that defines the space of reachable configurations.
#[derive(Clone, Debug)]
pub struct SearchSpace {
    pub schema: ArchitectureSchema,
    /// Inclusive granularity interval, the same for all three components.
    pub granularity_range: (usize, usize),
    /// Available merging methods.
    pub methods: Vec<MergeMethod>,
    /// Number of candidate models (the pool adds the base on top).
    pub num_candidates: usize,
    pub ranges: HyperRanges,
}

impl SearchSpace {
    pub fn new(schema: ArchitectureSchema, num_candidates: usize) -> Self {
        Self {
            schema,
            granularity_range: (1, 4),
            methods: MergeMethod::ALL.to_vec(),
            num_candidates,
            ranges: HyperRanges::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.methods.is_empty() {
            return Err(SpaceError::InvalidSpace("no methods available".into()));
        }
        if self.num_candidates == 0 {
            return Err(SpaceError::InvalidSpace("need at least one candidate".into()));
        }
        let (lo, hi) = self.granularity_range;
        if lo == 0 || lo > hi {
            return Err(SpaceError::InvalidSpace(format!(
                "bad granularity range [{lo}, {hi}]"
            )));
        }
        self.schema
            .validate()
            .map_err(|e| SpaceError::InvalidSpace(e.to_string()))?;
        Ok(())
    }

    /// Mergeable models including the base.
    pub fn pool_size(&self) -> usize {
        self.num_candidates + 1
    }

    /// Slots per group in the feature layout:
    /// method id, scaling, retain, t, pair id, one weight per pool model.
    pub fn group_slot_len(&self) -> usize {
        5 + self.pool_size()
    }

    /// Largest group count over the granularity range.
    pub fn max_groups(&self) -> usize {
        let (lo, _) = self.granularity_range;
        self.schema.group_count(lo, lo, lo)
    }

    /// Feature vectors have this length for every configuration.
    pub fn feature_len(&self) -> usize {
        3 + self.max_groups() * self.group_slot_len()
    }

    pub fn group_count(&self, g_enc: usize, g_prompt: usize, g_dec: usize) -> usize {
        self.schema.group_count(g_enc, g_prompt, g_dec)
    }

    /// Check a configuration against this space.
    pub fn validate_config(&self, config: &MergeConfig) -> Result<(), SpaceError> {
        let (lo, hi) = self.granularity_range;
        for g in [config.g_enc, config.g_prompt, config.g_dec] {
            if g < lo || g > hi {
                return Err(SpaceError::GranularityOutOfRange(g, lo, hi));
            }
        }
        let expected = self.group_count(config.g_enc, config.g_prompt, config.g_dec);
        if config.specs.len() != expected {
            return Err(SpaceError::SpecCountMismatch {
                specs: config.specs.len(),
                expected,
            });
        }
        for (i, spec) in config.specs.iter().enumerate() {
            spec.validate(i + 1, self.pool_size())
                .map_err(|e| SpaceError::InvalidSpec {
                    group: i + 1,
                    reason: e.to_string(),
                })?;
            if !self.methods.contains(&spec.method()) {
                return Err(SpaceError::InvalidSpec {
                    group: i + 1,
                    reason: format!("method {} not in this space", spec.method().name()),
                });
            }
        }
        Ok(())
    }
}

/// A full merge configuration: the search point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub g_enc: usize,
    pub g_prompt: usize,
    pub g_dec: usize,
    pub specs: Vec<GroupMergeSpec>,
}

impl MergeConfig {
    /// Canonical JSON (sorted keys); this exact form is embedded in merged
    /// checkpoint metadata and accepted back by configuration loaders.
    pub fn to_canonical_json(&self) -> String {
        crate::json::to_canonical_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, SpaceError> {
        Ok(serde_json::from_str(s)?)
    }

    /// Rescale every linear group's weights to sum to one, restoring convex
    /// combinations. Groups whose weights sum to zero are left untouched.
    pub fn normalize_linear_weights(&mut self) {
        for spec in &mut self.specs {
            if let GroupMergeSpec::Linear { weights } = spec {
                let total: f64 = weights.iter().sum();
                if total > 0.0 {
                    for w in weights.iter_mut() {
                        *w /= total;
                    }
                }
            }
        }
    }
}

/// Fixed-length real encoding of a configuration. The layout is
/// `[g_enc, g_prompt, g_dec]` followed by one slot block per possible
/// group; slots beyond the realized group count, and fields that the
/// group's method does not use, hold [`INACTIVE`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn sample_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

/// Uniform over (lo, hi]: the lower bound is excluded so TIES never sees a
/// zero retain ratio.
fn sample_in_half_open(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    range.1 - (range.1 - range.0) * rng.random::<f64>()
}

fn sample_pair(rng: &mut ChaCha8Rng, pool_size: usize) -> (usize, usize) {
    let i = rng.random_range(0..pool_size);
    let j = rng.random_range(0..pool_size - 1);
    let j = if j >= i { j + 1 } else { j };
    (i, j)
}

fn sample_spec(space: &SearchSpace, rng: &mut ChaCha8Rng) -> GroupMergeSpec {
    let method = space.methods[rng.random_range(0..space.methods.len())];
    match method {
        MergeMethod::TaskArithmetic => GroupMergeSpec::TaskArithmetic {
            scaling: sample_in(rng, space.ranges.scaling),
        },
        MergeMethod::Ties => GroupMergeSpec::Ties {
            retain_ratio: sample_in_half_open(rng, space.ranges.retain),
            scaling: sample_in(rng, space.ranges.scaling),
        },
        MergeMethod::Slerp => GroupMergeSpec::Slerp {
            pair: sample_pair(rng, space.pool_size()),
            t: sample_in(rng, space.ranges.t),
        },
        MergeMethod::Linear => GroupMergeSpec::Linear {
            weights: (0..space.pool_size())
                .map(|_| sample_in(rng, space.ranges.weight))
                .collect(),
        },
    }
}

/// Draw a uniform configuration: granularities uniform over the range, each
/// group's method uniform over the available set, hyperparameters uniform
/// over their intervals.
pub fn sample_config(space: &SearchSpace, rng: &mut ChaCha8Rng) -> MergeConfig {
    let (lo, hi) = space.granularity_range;
    let g_enc = rng.random_range(lo..=hi);
    let g_prompt = rng.random_range(lo..=hi);
    let g_dec = rng.random_range(lo..=hi);
    let groups = space.group_count(g_enc, g_prompt, g_dec);
    let specs = (0..groups).map(|_| sample_spec(space, rng)).collect();
    MergeConfig {
        g_enc,
        g_prompt,
        g_dec,
        specs,
    }
}

/// Encode a configuration as a fixed-length feature vector.
pub fn encode(config: &MergeConfig, space: &SearchSpace) -> Result<FeatureVector, SpaceError> {
    space.validate_config(config)?;
    let slot = space.group_slot_len();
    let mut values = vec![INACTIVE; space.feature_len()];
    values[0] = config.g_enc as f64;
    values[1] = config.g_prompt as f64;
    values[2] = config.g_dec as f64;
    for (i, spec) in config.specs.iter().enumerate() {
        let at = 3 + i * slot;
        values[at] = spec.method().id() as f64;
        match spec {
            GroupMergeSpec::TaskArithmetic { scaling } => {
                values[at + 1] = *scaling;
            }
            GroupMergeSpec::Ties {
                retain_ratio,
                scaling,
            } => {
                values[at + 1] = *scaling;
                values[at + 2] = *retain_ratio;
            }
            GroupMergeSpec::Slerp { pair, t } => {
                values[at + 3] = *t;
                values[at + 4] = (pair.0 * space.pool_size() + pair.1) as f64;
            }
            GroupMergeSpec::Linear { weights } => {
                for (k, w) in weights.iter().enumerate() {
                    values[at + 5 + k] = *w;
                }
            }
        }
    }
    Ok(FeatureVector(values))
}

/// Identifies one continuous field of one group.
enum ContinuousField {
    Scaling(usize),
    Retain(usize),
    T(usize),
    Weight(usize, usize),
}

fn continuous_fields(config: &MergeConfig) -> Vec<ContinuousField> {
    let mut fields = Vec::new();
    for (i, spec) in config.specs.iter().enumerate() {
        match spec {
            GroupMergeSpec::TaskArithmetic { .. } => fields.push(ContinuousField::Scaling(i)),
            GroupMergeSpec::Ties { .. } => {
                fields.push(ContinuousField::Retain(i));
                fields.push(ContinuousField::Scaling(i));
            }
            GroupMergeSpec::Slerp { .. } => fields.push(ContinuousField::T(i)),
            GroupMergeSpec::Linear { weights } => {
                for k in 0..weights.len() {
                    fields.push(ContinuousField::Weight(i, k));
                }
            }
        }
    }
    fields
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; 1 - U keeps the log argument in (0, 1].
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Return a neighbor of `config`. Half the time one active continuous field
/// is perturbed with clipped Gaussian noise; otherwise either one group's
/// method is resampled together with its hyperparameters, or one granularity
/// is resampled, in which case the affected component is re-partitioned and
/// its groups receive fresh specs while the other components keep theirs.
pub fn mutate(config: &MergeConfig, space: &SearchSpace, rng: &mut ChaCha8Rng) -> MergeConfig {
    let mut next = config.clone();
    if rng.random_bool(0.5) {
        let fields = continuous_fields(&next);
        if !fields.is_empty() {
            let field = &fields[rng.random_range(0..fields.len())];
            let noise = MUTATION_SIGMA * gaussian(rng);
            match field {
                ContinuousField::Scaling(i) => {
                    match &mut next.specs[*i] {
                        GroupMergeSpec::TaskArithmetic { scaling }
                        | GroupMergeSpec::Ties { scaling, .. } => {
                            let r = space.ranges.scaling;
                            *scaling = (*scaling + noise).clamp(r.0, r.1);
                        }
                        _ => unreachable!("field enumeration matches spec variants"),
                    }
                }
                ContinuousField::Retain(i) => {
                    if let GroupMergeSpec::Ties { retain_ratio, .. } = &mut next.specs[*i] {
                        let r = space.ranges.retain;
                        // Keep strictly above the exclusive lower bound.
                        *retain_ratio = (*retain_ratio + noise).clamp(r.0 + 1e-9, r.1);
                    }
                }
                ContinuousField::T(i) => {
                    if let GroupMergeSpec::Slerp { t, .. } = &mut next.specs[*i] {
                        let r = space.ranges.t;
                        *t = (*t + noise).clamp(r.0, r.1);
                    }
                }
                ContinuousField::Weight(i, k) => {
                    if let GroupMergeSpec::Linear { weights } = &mut next.specs[*i] {
                        let r = space.ranges.weight;
                        weights[*k] = (weights[*k] + noise).clamp(r.0, r.1);
                    }
                }
            }
        }
        return next;
    }

    let groups = next.specs.len();
    let target = rng.random_range(0..groups + 3);
    if target < groups {
        next.specs[target] = sample_spec(space, rng);
        return next;
    }

    // Granularity move: resample one of the three, rebuild that component's
    // spec block.
    let (lo, hi) = space.granularity_range;
    let schema = &space.schema;
    let old_enc = schema.encoder_layers.div_ceil(next.g_enc);
    let old_prompt = schema.prompt_layers.div_ceil(next.g_prompt);
    let old_dec = schema.decoder_layers().div_ceil(next.g_dec);
    let which = target - groups;
    match which {
        0 => next.g_enc = rng.random_range(lo..=hi),
        1 => next.g_prompt = rng.random_range(lo..=hi),
        _ => next.g_dec = rng.random_range(lo..=hi),
    }
    let new_enc = schema.encoder_layers.div_ceil(next.g_enc);
    let new_prompt = schema.prompt_layers.div_ceil(next.g_prompt);
    let new_dec = schema.decoder_layers().div_ceil(next.g_dec);
    let (start, old_len, new_len) = match which {
        0 => (0, old_enc, new_enc),
        1 => (old_enc, old_prompt, new_prompt),
        _ => (old_enc + old_prompt, old_dec, new_dec),
    };
    let fresh: Vec<GroupMergeSpec> = (0..new_len).map(|_| sample_spec(space, rng)).collect();
    next.specs.splice(start..start + old_len, fresh);
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_space() -> SearchSpace {
        let mut schema = ArchitectureSchema::sam_vit_b();
        schema.encoder_layers = 4;
        schema.prompt_layers = 2;
        schema.layer_membership.clear();
        schema.extra_groups = vec!["neck".into()];
        SearchSpace::new(schema, 2)
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let space = small_space();
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(sample_config(&space, &mut a), sample_config(&space, &mut b));
    }

    #[test]
    fn sampled_configs_validate_and_cover_methods() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            let config = sample_config(&space, &mut rng);
            space.validate_config(&config).unwrap();
            for spec in &config.specs {
                seen.insert(spec.method().id());
            }
        }
        assert_eq!(seen.len(), 4, "every method should appear across samples");
    }

    #[test]
    fn restricted_method_set_is_respected() {
        let mut space = small_space();
        space.methods = vec![MergeMethod::Linear];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let config = sample_config(&space, &mut rng);
            assert!(config
                .specs
                .iter()
                .all(|s| s.method() == MergeMethod::Linear));
        }
    }

    #[test]
    fn encode_has_constant_length_and_imputes_trailing_groups() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let len = space.feature_len();
        for _ in 0..100 {
            let config = sample_config(&space, &mut rng);
            let fv = encode(&config, &space).unwrap();
            assert_eq!(fv.len(), len);
            assert!(fv.0.iter().all(|v| v.is_finite()));
        }
        // Max granularity means fewest groups, so trailing slots stay imputed.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut config = sample_config(&space, &mut rng);
        config.g_enc = 4;
        config.g_prompt = 4;
        config.g_dec = 4;
        let groups = space.group_count(4, 4, 4);
        config.specs = (0..groups)
            .map(|_| GroupMergeSpec::TaskArithmetic { scaling: 0.5 })
            .collect();
        let fv = encode(&config, &space).unwrap();
        let slot = space.group_slot_len();
        for v in &fv.0[3 + groups * slot..] {
            assert_eq!(*v, INACTIVE);
        }
    }

    #[test]
    fn single_field_difference_changes_one_coordinate() {
        let space = small_space();
        let groups = space.group_count(2, 2, 2);
        let make = |lambda: f64| MergeConfig {
            g_enc: 2,
            g_prompt: 2,
            g_dec: 2,
            specs: (0..groups)
                .map(|i| {
                    if i == 1 {
                        GroupMergeSpec::TaskArithmetic { scaling: lambda }
                    } else {
                        GroupMergeSpec::Linear {
                            weights: vec![0.3, 0.3, 0.3],
                        }
                    }
                })
                .collect(),
        };
        let a = encode(&make(0.2), &space).unwrap();
        let b = encode(&make(0.9), &space).unwrap();
        let diffs: Vec<usize> = (0..a.len()).filter(|&i| a.0[i] != b.0[i]).collect();
        assert_eq!(diffs.len(), 1);
    }

    #[test]
    fn encode_is_injective_over_random_configs() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut seen = std::collections::HashMap::new();
        for _ in 0..500 {
            let config = sample_config(&space, &mut rng);
            let fv = encode(&config, &space).unwrap();
            let key = fv
                .0
                .iter()
                .map(|v| format!("{v:.17e}"))
                .collect::<Vec<_>>()
                .join(",");
            if let Some(previous) = seen.insert(key, config.clone()) {
                assert_eq!(previous, config, "distinct configs encoded identically");
            }
        }
    }

    #[test]
    fn mutation_stays_valid_and_is_reproducible() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = sample_config(&space, &mut rng);
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let m1 = mutate(&base, &space, &mut r1);
            let m2 = mutate(&base, &space, &mut r2);
            assert_eq!(m1, m2);
            space.validate_config(&m1).unwrap();
        }
    }

    #[test]
    fn mutations_reach_granularity_and_method_moves() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = sample_config(&space, &mut rng);
        let mut granularity_moved = 0;
        let mut method_moved = 0;
        for _ in 0..1000 {
            let m = mutate(&base, &space, &mut rng);
            if (m.g_enc, m.g_prompt, m.g_dec) != (base.g_enc, base.g_prompt, base.g_dec) {
                granularity_moved += 1;
            } else if m.specs.len() == base.specs.len() {
                for (a, b) in m.specs.iter().zip(&base.specs) {
                    if a.method() != b.method() {
                        method_moved += 1;
                        break;
                    }
                }
            }
        }
        assert!(granularity_moved >= 1, "no granularity mutation in 1000 draws");
        assert!(method_moved >= 1, "no method mutation in 1000 draws");
    }

    #[test]
    fn canonical_json_roundtrips() {
        let space = small_space();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let config = sample_config(&space, &mut rng);
        let rendered = config.to_canonical_json();
        let back = MergeConfig::from_json(&rendered).unwrap();
        assert_eq!(back, config);
        assert_eq!(back.to_canonical_json(), rendered);
    }

    #[test]
    fn normalize_linear_weights_restores_convexity() {
        let mut config = MergeConfig {
            g_enc: 1,
            g_prompt: 1,
            g_dec: 1,
            specs: vec![GroupMergeSpec::Linear {
                weights: vec![0.6, 0.59, 0.12],
            }],
        };
        config.normalize_linear_weights();
        if let GroupMergeSpec::Linear { weights } = &config.specs[0] {
            let total: f64 = weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        } else {
            unreachable!();
        }
    }
}

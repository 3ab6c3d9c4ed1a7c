//! Layer-wise checkpoint merging with surrogate-guided configuration search.
//!
//! The crate merges a pool of fine-tuned checkpoints (all sharing one base
//! architecture) by assigning a merging method and hyperparameters to each
//! group of consecutive layers, then searches that configuration space with
//! a random-forest surrogate and expected improvement. Single-objective and
//! multi-objective (augmented Tchebycheff scalarization) searches are
//! supported, along with pluggable evaluation backends.

pub mod checkpoint;
pub mod evaluator;
pub mod forest;
pub mod json;
pub mod merge;
pub mod objective;
pub mod optimizer;
pub(crate) mod par;
pub mod schema;
pub mod space;

pub use checkpoint::{load_checkpoint, save_checkpoint, FormatError, ModelParams, TensorRecord};
pub use evaluator::{
    evaluate_external, evaluate_synthetic, evaluate_toy_segmentation, make_synthetic_problem,
    make_toy_segmentation_problem, EvalError, Evaluator, ExternalEvaluator,
    ExternalEvaluatorSpec, FailurePolicy, SyntheticProblem, TensorLayout, ToySegmentationProblem,
};
pub use forest::{Forest, ForestParams, SurrogateError};
pub use merge::{
    apply_config, merge_linear, merge_slerp, merge_task_arithmetic, merge_ties, task_vector,
    GroupMergeSpec, MergeError, MergeMethod, TaskVector,
};
pub use objective::{
    dice, parego_scalarize, pareto_front, sample_simplex_weights, select_final, ObjectiveError,
    ScalarizationWeights, TaskLossVector,
};
pub use optimizer::{
    expected_improvement, propose_next, run_search, SearchError, SearchMode, SearchOptions,
    SearchResult, TrialRecord,
};
pub use schema::{
    partition_layers, validate_compatible, ArchitectureSchema, CompatError, Component, LayerGroup,
    MembershipRule, SchemaError,
};
pub use space::{encode, mutate, sample_config, FeatureVector, MergeConfig, SearchSpace, SpaceError};

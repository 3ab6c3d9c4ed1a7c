//! The structured run-configuration file consumed by `search` and `eval`.
//!
//! Relative paths inside the file resolve against the file's own directory,
//! so a generated problem directory stays relocatable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mergeforge::{
    ArchitectureSchema, Evaluator, ExternalEvaluator, ExternalEvaluatorSpec, FailurePolicy,
    ForestParams, MergeMethod, SearchMode, SyntheticProblem, ToySegmentationProblem,
};

use crate::CliError;

/// Schema field: either a named preset or an inline definition.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaRef {
    Preset(String),
    Inline(ArchitectureSchema),
}

impl SchemaRef {
    pub fn resolve(&self) -> Result<ArchitectureSchema, CliError> {
        match self {
            SchemaRef::Preset(name) if name == "sam-vit-b" => Ok(ArchitectureSchema::sam_vit_b()),
            SchemaRef::Preset(name) => Err(CliError::Usage(format!(
                "unknown schema preset `{name}` (available: sam-vit-b)"
            ))),
            SchemaRef::Inline(schema) => {
                schema
                    .validate()
                    .map_err(|e| CliError::Usage(format!("invalid schema: {e}")))?;
                Ok(schema.clone())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorConfig {
    /// Analytic benchmark generated by `bench --kind synthetic`.
    Synthetic { problem: PathBuf },
    /// Dice benchmark generated by `bench --kind toy-seg`.
    ToySegmentation { problem: PathBuf },
    /// External command protocol.
    External {
        command: Vec<String>,
        tasks: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default)]
        failure_policy: FailurePolicy,
    },
}

fn default_timeout() -> f64 {
    300.0
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: SchemaRef,
    pub base: PathBuf,
    pub candidates: Vec<PathBuf>,
    pub mode: SearchMode,
    /// Defaults to 120 in single mode, 200 in multi mode.
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub surrogate: ForestParams,
    pub evaluator: EvaluatorConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Optional restriction of the available merging methods.
    #[serde(default)]
    pub methods: Option<Vec<MergeMethod>>,
    /// Optional inclusive granularity interval (default [1, 4]).
    #[serde(default)]
    pub granularity_range: Option<(usize, usize)>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read run config {path:?}: {e}")))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("run config {path:?}: {e}")))?;
        let root = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        Ok((config, root))
    }

    pub fn resolved_budget(&self) -> usize {
        self.budget.unwrap_or(match self.mode {
            SearchMode::Single => 120,
            SearchMode::Multi => 200,
        })
    }

    /// Check invariants that must hold before any work starts.
    pub fn validate(&self, root: &Path) -> Result<(), CliError> {
        if self.alpha <= 0.0 {
            return Err(CliError::Usage(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.candidates.is_empty() {
            return Err(CliError::Usage("no candidate checkpoints listed".into()));
        }
        if self.methods.as_ref().is_some_and(|m| m.is_empty()) {
            return Err(CliError::Usage("methods list is empty".into()));
        }
        let mut referenced: Vec<PathBuf> = vec![self.base.clone()];
        referenced.extend(self.candidates.iter().cloned());
        match &self.evaluator {
            EvaluatorConfig::Synthetic { problem }
            | EvaluatorConfig::ToySegmentation { problem } => referenced.push(problem.clone()),
            EvaluatorConfig::External { command, tasks, .. } => {
                if !command.iter().any(|a| a.contains("{model}")) {
                    return Err(CliError::Usage(
                        "external evaluator command must contain the {model} placeholder".into(),
                    ));
                }
                if tasks.is_empty() {
                    return Err(CliError::Usage("external evaluator lists no tasks".into()));
                }
            }
        }
        for path in referenced {
            let resolved = resolve(root, &path);
            if !resolved.exists() {
                return Err(CliError::Usage(format!(
                    "referenced file {resolved:?} does not exist"
                )));
            }
        }
        Ok(())
    }

    pub fn build_evaluator(
        &self,
        root: &Path,
        output_dir: &Path,
    ) -> Result<Box<dyn Evaluator>, CliError> {
        match &self.evaluator {
            EvaluatorConfig::Synthetic { problem } => {
                let problem = SyntheticProblem::load(&resolve(root, problem))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                Ok(Box::new(problem))
            }
            EvaluatorConfig::ToySegmentation { problem } => {
                let problem = ToySegmentationProblem::load(&resolve(root, problem))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                Ok(Box::new(problem))
            }
            EvaluatorConfig::External {
                command,
                tasks,
                timeout_secs,
                failure_policy,
            } => {
                let spec = ExternalEvaluatorSpec {
                    command: command.clone(),
                    tasks: tasks.clone(),
                    timeout_secs: *timeout_secs,
                    failure_policy: *failure_policy,
                };
                let evaluator = ExternalEvaluator::new(spec, output_dir.join("work"))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                Ok(Box::new(evaluator))
            }
        }
    }

    pub fn failure_policy(&self) -> FailurePolicy {
        match &self.evaluator {
            EvaluatorConfig::External { failure_policy, .. } => *failure_policy,
            _ => FailurePolicy::default(),
        }
    }
}

/// Resolve a possibly relative path against the run file's directory.
pub fn resolve(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

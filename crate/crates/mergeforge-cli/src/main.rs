//! `mergeforge`: merge checkpoints, search merge configurations, evaluate
//! and inspect the results.
//!
//! Exit codes: 0 on success, 2 on usage/configuration errors, 1 on runtime
//! failures.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mergeforge::{
    apply_config, json::canonical, load_checkpoint, make_synthetic_problem,
    make_toy_segmentation_problem, partition_layers, run_search, save_checkpoint,
    validate_compatible, ArchitectureSchema, MergeConfig, ModelParams, SearchMode, SearchOptions,
    SearchResult, SearchSpace, TensorLayout,
};

use config::{resolve, EvaluatorConfig, RunConfig, SchemaRef};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    mergeforge::FormatError,
    mergeforge::SchemaError,
    mergeforge::CompatError,
    mergeforge::MergeError,
    mergeforge::SpaceError,
    mergeforge::EvalError,
    mergeforge::SearchError,
    serde_json::Error
);

#[derive(Parser)]
#[command(
    name = "mergeforge",
    version,
    about = "Layer-wise checkpoint merging with surrogate-guided search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a merge configuration to a model pool and write the result.
    Merge(MergeArgs),
    /// Search merge configurations against a configured evaluator.
    Search(SearchArgs),
    /// Score an existing checkpoint with the run config's evaluator.
    Eval(EvalArgs),
    /// Print a checkpoint's tensor table and embedded merge metadata.
    Inspect(InspectArgs),
    /// Generate a benchmark problem (checkpoints + manifest + run config).
    Bench(BenchArgs),
}

#[derive(clap::Args)]
struct MergeArgs {
    /// Base checkpoint path.
    #[arg(long)]
    base: PathBuf,
    /// Candidate checkpoints, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<PathBuf>,
    /// Merge configuration JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Schema preset name or path to a schema JSON file.
    #[arg(long, default_value = "sam-vit-b")]
    schema: String,
    /// Rescale linear weights to sum to one before merging.
    #[arg(long)]
    normalize_linear: bool,
}

#[derive(clap::Args)]
struct SearchArgs {
    /// Run configuration file.
    #[arg(long)]
    run: PathBuf,
    /// Override the config's trial budget.
    #[arg(long)]
    budget: Option<usize>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Concurrent evaluations (default: config file, then MERGEFORGE_WORKERS, then 1).
    #[arg(long)]
    workers: Option<usize>,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Multi,
}

impl From<ModeArg> for SearchMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Single => SearchMode::Single,
            ModeArg::Multi => SearchMode::Multi,
        }
    }
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint to score.
    #[arg(long)]
    model: PathBuf,
    /// Run configuration providing the evaluator.
    #[arg(long)]
    run: PathBuf,
}

#[derive(clap::Args)]
struct InspectArgs {
    /// Checkpoint to inspect.
    #[arg(long)]
    model: PathBuf,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Benchmark family.
    #[arg(long, value_enum)]
    kind: BenchKind,
    /// Output directory for checkpoints, manifest and run config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Candidate models (synthetic only; toy-seg uses one per task).
    #[arg(long, default_value_t = 3)]
    candidates: usize,
    /// Number of tasks.
    #[arg(long, default_value_t = 1)]
    tasks: usize,
    /// Tensor layout for synthetic problems.
    #[arg(long, value_enum, default_value_t = LayoutArg::Small)]
    layout: LayoutArg,
    /// Per-tensor width for synthetic problems.
    #[arg(long, default_value_t = 16)]
    width: usize,
    /// Budget written into the generated run config.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchKind {
    Synthetic,
    ToySeg,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Small,
    SamVitB,
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Merge(args) => cmd_merge(args),
        Command::Search(args) => cmd_search(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn load_schema_arg(arg: &str) -> Result<ArchitectureSchema, CliError> {
    if arg == "sam-vit-b" {
        return Ok(ArchitectureSchema::sam_vit_b());
    }
    let path = Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let schema: ArchitectureSchema = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("schema file {path:?}: {e}")))?;
        schema
            .validate()
            .map_err(|e| CliError::Usage(format!("schema file {path:?}: {e}")))?;
        return Ok(schema);
    }
    Err(CliError::Usage(format!(
        "`{arg}` is neither a schema preset (sam-vit-b) nor an existing file"
    )))
}

fn load_pool(base: &Path, models: &[PathBuf]) -> Result<(ModelParams, Vec<ModelParams>), CliError> {
    let base = load_checkpoint(base)?;
    let candidates = models
        .iter()
        .map(load_checkpoint)
        .collect::<Result<Vec<_>, _>>()?;
    Ok((base, candidates))
}

fn cmd_merge(args: MergeArgs) -> Result<(), CliError> {
    let schema = load_schema_arg(&args.schema)?;
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {:?}: {e}", args.config)))?;
    let mut config = MergeConfig::from_json(&text)
        .map_err(|e| CliError::Usage(format!("merge config {:?}: {e}", args.config)))?;
    if args.normalize_linear {
        config.normalize_linear_weights();
    }
    let (base, candidates) = load_pool(&args.base, &args.models)?;
    let models: Vec<&ModelParams> = std::iter::once(&base).chain(candidates.iter()).collect();
    validate_compatible(&models, &schema)?;
    let names: Vec<String> = base.names().map(String::from).collect();
    let groups = partition_layers(&schema, config.g_enc, config.g_prompt, config.g_dec, &names)?;
    if groups.len() != config.specs.len() {
        return Err(CliError::Usage(format!(
            "config supplies {} group specs but granularities ({}, {}, {}) partition the schema into {} groups",
            config.specs.len(),
            config.g_enc,
            config.g_prompt,
            config.g_dec,
            groups.len()
        )));
    }
    let merged = apply_config(&base, &candidates, &config, &groups)?;
    save_checkpoint(&merged, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn env_workers() -> Option<usize> {
    std::env::var("MERGEFORGE_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
}

fn cmd_search(args: SearchArgs) -> Result<(), CliError> {
    let (mut run, root) = RunConfig::load(&args.run)?;
    // Flags override file fields.
    if let Some(budget) = args.budget {
        run.budget = Some(budget);
    }
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    if let Some(mode) = args.mode {
        run.mode = mode.into();
    }
    if let Some(workers) = args.workers {
        run.workers = Some(workers);
    }
    if let Some(out_dir) = &args.out_dir {
        run.output_dir = out_dir.clone();
    }
    run.validate(&root)?;

    let schema = run.schema.resolve()?;
    let base = load_checkpoint(resolve(&root, &run.base))?;
    let candidates: Vec<ModelParams> = run
        .candidates
        .iter()
        .map(|p| load_checkpoint(resolve(&root, p)))
        .collect::<Result<_, _>>()?;
    let models: Vec<&ModelParams> = std::iter::once(&base).chain(candidates.iter()).collect();
    validate_compatible(&models, &schema)?;

    let mut space = SearchSpace::new(schema.clone(), candidates.len());
    if let Some(methods) = &run.methods {
        space.methods = methods.clone();
    }
    if let Some(range) = run.granularity_range {
        space.granularity_range = range;
    }
    space.validate()?;

    let output_dir = resolve(&root, &run.output_dir);
    std::fs::create_dir_all(&output_dir)?;
    let evaluator = run.build_evaluator(&root, &output_dir)?;

    let workers = run.workers.or_else(env_workers).unwrap_or(1).max(1);
    let mut options = SearchOptions::new(run.mode, run.resolved_budget(), run.seed);
    options.alpha = run.alpha;
    options.workers = workers;
    options.forest = run.surrogate;
    options.failure_policy = run.failure_policy();

    let result = run_search(&base, &candidates, &space, &*evaluator, &options)?;

    // Effective configuration, for reproducibility.
    run.budget = Some(options.budget);
    run.workers = Some(workers);
    let report_path = output_dir.join("report.json");
    std::fs::write(&report_path, render_report(&run, &result)?)?;

    let best = &result.best_config;
    let names: Vec<String> = base.names().map(String::from).collect();
    let groups = partition_layers(&schema, best.g_enc, best.g_prompt, best.g_dec, &names)?;
    let merged = apply_config(&base, &candidates, best, &groups)?;
    let best_path = output_dir.join("best.mrg");
    save_checkpoint(&merged, &best_path)?;

    println!("wrote {}", report_path.display());
    println!("wrote {}", best_path.display());
    println!(
        "best value {:.6} at trial {} ({} trials)",
        result.best_value,
        result.best_index,
        result.history.len()
    );
    Ok(())
}

fn render_report(run: &RunConfig, result: &SearchResult) -> Result<String, CliError> {
    let best = &result.history[result.best_index];
    let report = json!({
        "config": serde_json::to_value(run)?,
        "trials": serde_json::to_value(&result.history)?,
        "best": {
            "index": result.best_index,
            "config": serde_json::to_value(&result.best_config)?,
            "value": result.best_value,
            "losses": serde_json::to_value(&best.losses)?,
        },
        "pareto": result.pareto_indices,
        "seed": result.seed,
        "mode": serde_json::to_value(result.mode)?,
        "final_weights": serde_json::to_value(&result.final_weights)?,
    });
    Ok(canonical(&report))
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (run, root) = RunConfig::load(&args.run)?;
    run.validate(&root)?;
    let output_dir = resolve(&root, &run.output_dir);
    std::fs::create_dir_all(&output_dir)?;
    let evaluator = run.build_evaluator(&root, &output_dir)?;
    let model = load_checkpoint(&args.model)?;
    let losses = evaluator.evaluate(&model, 0)?;
    let scores: std::collections::BTreeMap<String, f64> = losses
        .tasks()
        .map(|t| (t.to_string(), 1.0 - losses.get(t).unwrap()))
        .collect();
    let output = json!({
        "losses": serde_json::to_value(&losses)?,
        "scores": scores,
    });
    println!("{}", canonical(&output));
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&args.model)?;
    let name_width = model
        .names()
        .map(str::len)
        .max()
        .unwrap_or(6)
        .max("tensor".len());
    println!("{:<name_width$}  {:>12}  shape", "tensor", "params");
    for tensor in model.tensors() {
        println!(
            "{:<name_width$}  {:>12}  {:?}",
            tensor.name,
            tensor.data.len(),
            tensor.shape
        );
    }
    println!(
        "total: {} tensors, {} params",
        model.len(),
        model.total_params()
    );
    if !model.meta.is_empty() {
        println!("\nmetadata:");
        for (key, value) in &model.meta {
            if key == mergeforge::merge::CONFIG_META_KEY {
                let pretty = serde_json::from_str::<serde_json::Value>(value)
                    .and_then(|v| serde_json::to_string_pretty(&v))
                    .unwrap_or_else(|_| value.clone());
                println!("  {key}:\n{pretty}");
            } else {
                println!("  {key}: {value}");
            }
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), CliError> {
    if args.tasks == 0 {
        return Err(CliError::Usage("need at least one task".into()));
    }
    std::fs::create_dir_all(&args.out)?;
    let (schema, candidate_files, tasks) = match args.kind {
        BenchKind::Synthetic => {
            let layout = match args.layout {
                LayoutArg::Small => TensorLayout::small(4, 2, 1, 1, &["neck"], args.width),
                LayoutArg::SamVitB => TensorLayout::sam_vit_b(args.width),
            };
            if args.candidates < 2 {
                return Err(CliError::Usage(
                    "synthetic problems need at least 2 candidates".into(),
                ));
            }
            let problem = make_synthetic_problem(args.seed, args.candidates, &layout, args.tasks)?;
            problem.save(&args.out)?;
            let files = (1..=args.candidates)
                .map(|i| PathBuf::from(format!("candidate-{i}.mrg")))
                .collect();
            (problem.schema().clone(), files, args.tasks)
        }
        BenchKind::ToySeg => {
            let tasks = args.tasks.max(2);
            let problem = make_toy_segmentation_problem(args.seed, tasks)?;
            problem.save(&args.out)?;
            let files = (1..=tasks)
                .map(|i| PathBuf::from(format!("candidate-{i}.mrg")))
                .collect();
            (problem.schema().clone(), files, tasks)
        }
    };
    let mode = if tasks == 1 {
        SearchMode::Single
    } else {
        SearchMode::Multi
    };
    let evaluator = match args.kind {
        BenchKind::Synthetic => EvaluatorConfig::Synthetic {
            problem: "problem.json".into(),
        },
        BenchKind::ToySeg => EvaluatorConfig::ToySegmentation {
            problem: "problem.json".into(),
        },
    };
    let run = RunConfig {
        schema: SchemaRef::Inline(schema),
        base: "base.mrg".into(),
        candidates: candidate_files,
        mode,
        budget: args.budget,
        seed: args.seed,
        alpha: 0.05,
        surrogate: Default::default(),
        evaluator,
        output_dir: "out".into(),
        workers: None,
        methods: None,
        granularity_range: None,
    };
    let run_path = args.out.join("run.json");
    std::fs::write(&run_path, canonical(&serde_json::to_value(&run)?))?;
    println!("wrote {}", args.out.join("problem.json").display());
    println!("wrote {}", run_path.display());
    Ok(())
}

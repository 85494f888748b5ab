//! Operator entry point: reproducible batch runs driven by a single JSON
//! config, with subcommands for linear rollouts, the full branching
//! pipeline, analysis, tree inspection and snapshot pruning.
//!
//! Exit codes: 0 success, 1 run-level errors, 2 usage or configuration
//! errors. Every run writes a manifest (config hash, seed, schema and
//! template versions) next to its outputs, so a manifest fully determines a
//! run.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis;
use crate::core::{read_trajectories_file, write_trajectories_file, Trajectory};
use crate::envsim::{load_task_suite, TaskSuite};
use crate::orchestrator::RunConfig;
use crate::pipeline::{
    run_divert, CandidateSetRecord, ContinuationRecord, DivertBudget, DivertRun, PipelineOptions,
    Sampling, CANDIDATE_TEMPLATE, CANDIDATE_TEMPLATE_VERSION, JUNCTION_TEMPLATE,
    JUNCTION_TEMPLATE_VERSION,
};
use crate::providers::{
    ChatProvider, Embedder, HashedBowEmbedder, HttpChatProvider, HttpEmbedder, HttpProviderConfig,
    MockChatProvider, RoleTag,
};
use crate::snapshots::FsSnapshotStore;

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const CONTINUATIONS_FILE: &str = "continuations.jsonl";
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "analysis_summary.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    /// "mock" or "http".
    pub kind: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Environment variable holding the API key for http providers.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    pub agent_model: String,
    pub user_model: String,
    /// Model used for junction selection, candidate generation and judging.
    pub framework_model: String,
    #[serde(default = "default_embedding_model")]
    pub embedding_model: String,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_api_key_env() -> String {
    "DIVERT_API_KEY".to_string()
}

fn default_embedding_model() -> String {
    "hashed-bow".to_string()
}

fn default_timeout_secs() -> u64 {
    120
}

/// The single JSON document describing a run. Relative paths resolve
/// against the config file's directory.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub suite_path: String,
    pub base_dir: String,
    pub output_dir: String,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub budget: DivertBudget,
}

#[derive(Parser, Debug)]
#[command(
    name = "divert",
    version,
    about = "Coverage-guided, snapshot-based evaluation of multi-turn tool-using agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured rollouts per task.
    #[arg(long)]
    rollouts: Option<u32>,
    /// Concurrent tasks.
    #[arg(long)]
    parallel: Option<usize>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DivertArgs {
    #[command(flatten)]
    base: RunArgs,
    /// Override the configured branches per task.
    #[arg(long)]
    branches: Option<u32>,
    /// Override the configured candidates per junction.
    #[arg(long)]
    candidates: Option<u32>,
    /// Branch by natural continuation instead of directed generation.
    #[arg(long)]
    no_directed_generation: bool,
    /// Take candidate 1 instead of the most divergent candidate.
    #[arg(long)]
    no_diverse_selection: bool,
    /// Parent sampling policy.
    #[arg(long, value_enum, default_value = "round-robin")]
    sampling: SamplingArg,
    /// Continue every candidate and record suffix similarities.
    #[arg(long)]
    validate_diversity: bool,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum SamplingArg {
    RoundRobin,
    Uniform,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Linear rollouts only (no branching).
    Run(RunArgs),
    /// Full pipeline: rollouts plus directed branching.
    Divert(DivertArgs),
    /// Compute metrics and write the four analysis CSVs for a pool.
    Analyze {
        /// Directory containing a run's outputs.
        #[arg(long)]
        pool: PathBuf,
        /// Output directory for CSVs (default: the pool directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Judge intent preservation of branched messages (needs --config).
        #[arg(long, requires = "config")]
        judge_intent: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the experiment tree reconstructed from the snapshot store.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to one task.
        #[arg(long)]
        task: Option<String>,
    },
    /// Delete the snapshots of an iteration label and its descendants.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        label: String,
    },
}

/// Parses argv and executes; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with success
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct LoadedConfig {
    config: CliConfig,
    config_bytes: Vec<u8>,
    suite: TaskSuite,
    suite_path: PathBuf,
    base_dir: PathBuf,
    output_dir: PathBuf,
}

fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let config_bytes = fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config: CliConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if config.provider.kind != "mock" && config.provider.kind != "http" {
        return Err(CliError::Config(format!(
            "provider.kind must be \"mock\" or \"http\", got {:?}",
            config.provider.kind
        )));
    }
    if config.provider.kind == "http" && config.provider.endpoint.is_none() {
        return Err(CliError::Config(
            "provider.endpoint is required when provider.kind is \"http\"".into(),
        ));
    }
    let config_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let suite_path = resolve(&config_dir, &config.suite_path);
    let suite =
        load_task_suite(&suite_path).map_err(|e| CliError::Config(format!("suite_path: {e}")))?;
    let base_dir = resolve(&config_dir, &config.base_dir);
    let output_dir = resolve(&config_dir, &config.output_dir);
    Ok(LoadedConfig {
        config,
        config_bytes,
        suite,
        suite_path,
        base_dir,
        output_dir,
    })
}

type ProviderPair = (Arc<dyn ChatProvider>, Arc<dyn Embedder>);

fn build_providers(loaded: &LoadedConfig, seed: u64) -> Result<ProviderPair, CliError> {
    let provider = &loaded.config.provider;
    match provider.kind.as_str() {
        "mock" => {
            let chat = Arc::new(MockChatProvider::simulator(&loaded.suite, seed));
            let dim = provider
                .embedding_dim
                .unwrap_or(crate::providers::embed::DEFAULT_EMBEDDING_DIM);
            Ok((chat, Arc::new(HashedBowEmbedder::new(dim))))
        }
        "http" => {
            let endpoint = provider.endpoint.clone().expect("validated by load_config");
            let api_key = std::env::var(&provider.api_key_env).ok();
            let mut models = BTreeMap::new();
            models.insert(RoleTag::Agent, provider.agent_model.clone());
            models.insert(RoleTag::User, provider.user_model.clone());
            models.insert(RoleTag::Junction, provider.framework_model.clone());
            models.insert(RoleTag::Candidate, provider.framework_model.clone());
            models.insert(RoleTag::Judge, provider.framework_model.clone());
            let http_config = HttpProviderConfig {
                endpoint,
                api_key,
                models,
                embedding_model: provider.embedding_model.clone(),
                timeout: std::time::Duration::from_secs(provider.timeout_secs),
            };
            let chat = HttpChatProvider::new(http_config.clone())
                .map_err(|e| CliError::Config(e.to_string()))?;
            let embedder = HttpEmbedder::new(http_config, loaded.config.run.max_retries)
                .map_err(|e| CliError::Config(e.to_string()))?;
            Ok((Arc::new(chat), Arc::new(embedder)))
        }
        other => Err(CliError::Config(format!("unknown provider kind {other:?}"))),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_manifest(
    loaded: &LoadedConfig,
    run_config: &RunConfig,
    budget: &DivertBudget,
    options: &PipelineOptions,
    out_dir: &Path,
) -> Result<(), CliError> {
    let manifest = serde_json::json!({
        "app_version": env!("CARGO_PKG_VERSION"),
        "config_sha256": sha256_hex(&loaded.config_bytes),
        "suite_sha256": sha256_hex(&fs::read(&loaded.suite_path).map_err(run_err)?),
        "config": loaded.config,
        "effective": {
            "run": run_config,
            "budget": budget,
            "directed_generation": options.directed_generation,
            "diverse_selection": options.diverse_selection,
            "sampling": match options.sampling {
                Sampling::RoundRobin => "round-robin",
                Sampling::Uniform => "uniform",
            },
            "parallel": options.parallel,
        },
        "seed": run_config.seed,
        "schema_versions": {
            "suite": crate::envsim::SUITE_SCHEMA_VERSION,
            "snapshot_state": crate::snapshots::STATE_SCHEMA_VERSION,
        },
        "templates": {
            "junction": {
                "version": JUNCTION_TEMPLATE_VERSION,
                "sha256": sha256_hex(JUNCTION_TEMPLATE.as_bytes()),
            },
            "candidate": {
                "version": CANDIDATE_TEMPLATE_VERSION,
                "sha256": sha256_hex(CANDIDATE_TEMPLATE.as_bytes()),
            },
            "judge": {
                "version": analysis::JUDGE_TEMPLATE_VERSION,
                "sha256": sha256_hex(analysis::JUDGE_SYSTEM_TEMPLATE.as_bytes()),
            },
        },
    });
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(run_err)?;
    fs::write(&path, text + "\n").map_err(run_err)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(run_err)?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).map_err(run_err)?;
        w.write_all(line.as_bytes()).map_err(run_err)?;
        w.write_all(b"\n").map_err(run_err)?;
    }
    w.flush().map_err(run_err)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = fs::read_to_string(path).map_err(run_err)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line)
            .map_err(|e| CliError::Run(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// What a completed run produced; returned by the programmatic entry points.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub trajectories: usize,
    pub failures: usize,
    pub output_dir: PathBuf,
}

/// Programmatic equivalent of `divert run` / `divert divert` with default
/// flags; used by the C ABI.
pub fn run_config_file(config_path: &Path, full_pipeline: bool) -> Result<RunSummary, CliError> {
    let args = RunArgs {
        config: config_path.to_path_buf(),
        seed: None,
        rollouts: None,
        parallel: None,
        out: None,
    };
    if full_pipeline {
        let divert_args = DivertArgs {
            base: args.clone(),
            branches: None,
            candidates: None,
            no_directed_generation: false,
            no_diverse_selection: false,
            sampling: SamplingArg::RoundRobin,
            validate_diversity: false,
        };
        execute_pipeline(&args, Some(&divert_args))
    } else {
        execute_pipeline(&args, None)
    }
}

/// Programmatic equivalent of `divert analyze`; used by the C ABI.
pub fn analyze_pool_dir(pool_dir: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    execute_analyze(pool_dir, out, false, None)
}

fn execute_pipeline(
    args: &RunArgs,
    divert_args: Option<&DivertArgs>,
) -> Result<RunSummary, CliError> {
    let loaded = load_config(&args.config)?;
    let mut run_config = loaded.config.run;
    let mut budget = loaded.config.budget;
    if let Some(seed) = args.seed {
        run_config.seed = seed;
    }
    if let Some(rollouts) = args.rollouts {
        budget.rollouts = rollouts;
    }
    let mut options = PipelineOptions {
        parallel: args.parallel.unwrap_or(1),
        ..PipelineOptions::default()
    };
    match divert_args {
        None => budget.branches = 0,
        Some(d) => {
            if let Some(branches) = d.branches {
                budget.branches = branches;
            }
            if let Some(candidates) = d.candidates {
                budget.candidates_per_junction = candidates;
            }
            options.directed_generation = !d.no_directed_generation;
            options.diverse_selection = !d.no_diverse_selection;
            options.sampling = match d.sampling {
                SamplingArg::RoundRobin => Sampling::RoundRobin,
                SamplingArg::Uniform => Sampling::Uniform,
            };
            options.record_continuations = d.validate_diversity;
        }
    }
    run_config
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    budget
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;

    let out_dir = args.out.clone().unwrap_or(loaded.output_dir.clone());
    fs::create_dir_all(&out_dir).map_err(run_err)?;
    fs::create_dir_all(&loaded.base_dir).map_err(run_err)?;

    let (chat, embedder) = build_providers(&loaded, run_config.seed)?;
    let store = FsSnapshotStore::new(&loaded.base_dir, &loaded.config.provider.agent_model);

    let run: DivertRun = run_divert(
        &loaded.suite,
        &budget,
        &run_config,
        chat.as_ref(),
        embedder.as_ref(),
        &store,
        &options,
    )
    .map_err(run_err)?;

    write_manifest(&loaded, &run_config, &budget, &options, &out_dir)?;
    write_trajectories_file(&out_dir.join(TRAJECTORIES_FILE), &run.pool).map_err(run_err)?;
    write_jsonl(&out_dir.join(CANDIDATES_FILE), &run.candidate_sets)?;
    if options.record_continuations {
        write_jsonl(&out_dir.join(CONTINUATIONS_FILE), &run.continuations)?;
    }
    let report_text = serde_json::to_string_pretty(&run.report).map_err(run_err)?;
    fs::write(out_dir.join(RUN_REPORT_FILE), report_text + "\n").map_err(run_err)?;

    let failures = run.pool.iter().filter(|t| t.outcome.is_failed()).count();
    println!(
        "wrote {} trajectories ({} failed) across {} task(s) to {}",
        run.pool.len(),
        failures,
        loaded.suite.tasks.len(),
        out_dir.display()
    );
    for task in &run.report.tasks {
        if task.branches_failed > 0 {
            println!(
                "  {}: {} branch attempt(s) failed: {}",
                task.task_id,
                task.branches_failed,
                task.reasons.join("; ")
            );
        }
    }
    Ok(RunSummary {
        trajectories: run.pool.len(),
        failures,
        output_dir: out_dir,
    })
}

fn execute_analyze(
    pool_dir: &Path,
    out: Option<PathBuf>,
    judge: bool,
    config_path: Option<PathBuf>,
) -> Result<(), CliError> {
    let out_dir = out.unwrap_or_else(|| pool_dir.to_path_buf());
    fs::create_dir_all(&out_dir).map_err(run_err)?;
    let pool: Vec<Trajectory> =
        read_trajectories_file(&pool_dir.join(TRAJECTORIES_FILE)).map_err(run_err)?;
    let candidates_path = pool_dir.join(CANDIDATES_FILE);
    let candidate_sets: Vec<CandidateSetRecord> = if candidates_path.exists() {
        read_jsonl(&candidates_path)?
    } else {
        Vec::new()
    };
    let continuations_path = pool_dir.join(CONTINUATIONS_FILE);
    let continuations: Option<Vec<ContinuationRecord>> = if continuations_path.exists() {
        Some(read_jsonl(&continuations_path)?)
    } else {
        None
    };
    let candidates_per_junction = read_manifest_k(pool_dir).unwrap_or(3);

    let metrics = analysis::metrics_report(&pool).map_err(run_err)?;
    let curve = analysis::coverage_curve(&pool);
    let prefix = analysis::shared_prefix_fraction(&pool);
    let diversity = analysis::diversity_rank_report(&candidate_sets, continuations.as_deref());
    let overhead = analysis::overhead_report(&pool, candidates_per_junction);

    let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> Result<(), analysis::AnalysisError>| {
        let mut buf = Vec::new();
        f(&mut buf).map_err(run_err)?;
        fs::write(out_dir.join(name), buf).map_err(run_err)
    };
    write("metrics.csv", &|w| analysis::write_metrics_csv(&pool, w))?;
    write("coverage.csv", &|w| analysis::write_coverage_csv(&curve, w))?;
    write("prefix.csv", &|w| analysis::write_prefix_csv(&prefix, w))?;
    write("diversity.csv", &|w| {
        analysis::write_diversity_csv(&diversity, w)
    })?;

    let summary = serde_json::json!({
        "metrics": metrics,
        "prefix": {
            "regular_aggregate": prefix.regular_aggregate,
            "branch_aggregate": prefix.branch_aggregate,
        },
        "diversity": diversity,
        "overhead": overhead,
    });
    let summary_text = serde_json::to_string_pretty(&summary).map_err(run_err)?;
    fs::write(out_dir.join(SUMMARY_FILE), summary_text + "\n").map_err(run_err)?;

    println!(
        "errors_per_100k: {:.4}  task_failure_count: {}  agent_tokens: {}  overhead_tokens: {}",
        metrics.errors_per_100k,
        metrics.task_failure_count,
        metrics.total_agent_tokens,
        metrics.total_overhead_tokens
    );
    println!(
        "prefix sharing: regular {:.4}  branch families {:.4}",
        prefix.regular_aggregate, prefix.branch_aggregate
    );

    if judge {
        let config_path = config_path.expect("clap enforces --config with --judge-intent");
        let loaded = load_config(&config_path)?;
        let (chat, _) = build_providers(&loaded, loaded.config.run.seed)?;
        let purposes: BTreeMap<&str, &str> = loaded
            .suite
            .tasks
            .iter()
            .map(|t| (t.task_id.as_str(), t.purpose.as_str()))
            .collect();
        let mut buf = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["task_id", "child_label", "kind", "verdict"])
                .map_err(run_err)?;
            for set in &candidate_sets {
                let Some(purpose) = purposes.get(set.task_id.as_str()) else {
                    continue;
                };
                let modified = set
                    .selected_index
                    .and_then(|i| set.candidates.get(i))
                    .map(|c| c.text.as_str())
                    .unwrap_or_default();
                for (kind, message) in [
                    ("original", set.original_message.as_str()),
                    ("modified", modified),
                ] {
                    let verdict = analysis::judge_intent(
                        purpose,
                        message,
                        chat.as_ref(),
                        loaded.config.run.max_retries,
                    )
                    .map_err(run_err)?;
                    let verdict = match verdict {
                        analysis::IntentVerdict::Preserved => "preserved",
                        analysis::IntentVerdict::Missed => "missed",
                    };
                    w.write_record([
                        set.task_id.as_str(),
                        set.child_label.as_str(),
                        kind,
                        verdict,
                    ])
                    .map_err(run_err)?;
                }
            }
            w.flush().map_err(run_err)?;
        }
        fs::write(out_dir.join("intent.csv"), buf).map_err(run_err)?;
        println!(
            "wrote intent.csv for {} candidate set(s)",
            candidate_sets.len()
        );
    }
    Ok(())
}

fn read_manifest_k(pool_dir: &Path) -> Option<u32> {
    let bytes = fs::read(pool_dir.join(MANIFEST_FILE)).ok()?;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes).ok()?;
    manifest["effective"]["budget"]["candidates_per_junction"]
        .as_u64()
        .map(|v| v as u32)
}

fn execute_inspect(config_path: &Path, task: Option<String>) -> Result<(), CliError> {
    let loaded = load_config(config_path)?;
    let store = FsSnapshotStore::new(&loaded.base_dir, &loaded.config.provider.agent_model);
    for t in &loaded.suite.tasks {
        if let Some(only) = &task {
            if &t.task_id != only {
                continue;
            }
        }
        let tree = store.list_tree(&t.domain, &t.task_id).map_err(run_err)?;
        println!("{} ({}):", t.task_id, t.domain);
        let rendered = tree.render();
        if rendered.is_empty() {
            println!("  (no snapshots)");
        } else {
            for line in rendered.lines() {
                println!("  {line}");
            }
        }
    }
    Ok(())
}

fn execute_prune(config_path: &Path, task: &str, label: &str) -> Result<(), CliError> {
    let loaded = load_config(config_path)?;
    let store = FsSnapshotStore::new(&loaded.base_dir, &loaded.config.provider.agent_model);
    let domain = loaded
        .suite
        .tasks
        .iter()
        .find(|t| t.task_id == task)
        .map(|t| t.domain.clone())
        .ok_or_else(|| CliError::Config(format!("unknown task {task:?} in suite")))?;
    let removed = store.prune(&domain, task, label).map_err(run_err)?;
    println!(
        "pruned {} snapshot directory(ies) under label {label}",
        removed.len()
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => execute_pipeline(&args, None).map(|_| ()),
        Command::Divert(args) => execute_pipeline(&args.base.clone(), Some(&args)).map(|_| ()),
        Command::Analyze {
            pool,
            out,
            judge_intent,
            config,
        } => execute_analyze(&pool, out, judge_intent, config),
        Command::Inspect { config, task } => execute_inspect(&config, task),
        Command::Prune {
            config,
            task,
            label,
        } => execute_prune(&config, &task, &label),
    }
}

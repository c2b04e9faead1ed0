//! Operator surface: run cases, mine preferences, train the desk-scale
//! policy, evaluate reports, and drive the synthetic end-to-end demo.
//!
//! Exit codes are a stable contract: 0 success, 1 config/usage error,
//! 2 partial case failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationParams, HttpBackend, HttpBackendConfig, ScriptedBackend};
use crate::compo::{
    save_policy_file, train, CompoConfig, Outcome, PolicyFile, ScoredPair, TokenTablePolicy,
    TrainOutcome, TrainablePolicy, POLICY_SCHEMA,
};
use crate::domain::LabelSet;
use crate::manifest::{
    config_hash, execute_run, read_cases_jsonl, CaseStatus, RunManifest, RunOptions,
};
use crate::metrics::{evaluate, BleuAggregation, EvalRecord, MetricReport};
use crate::orchestrator::{ExecMode, Orchestrator, PromptLibrary};
use crate::preference::{self, PreferenceDataset};

mod demo;

pub use demo::{run_demo, DemoSummary};

/// Usage/config failures exit with code 1 and a message naming the field.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "claw",
    about = "Cooperative-competitive chest X-ray diagnostic workflow engine",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run both diagnostic pathways over a case dataset.
    Run(RunArgs),
    /// Mine preference pairs from a run manifest.
    BuildPrefs(BuildPrefsArgs),
    /// Train the desk-scale policy on mined preference pairs.
    Train(TrainArgs),
    /// Score predictions against references.
    Eval(EvalArgs),
    /// Generate a synthetic corpus and run the full pipeline end to end.
    Demo(DemoArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scripted backend: path to a completion script (JSONL).
    #[arg(long)]
    backend_script: Option<PathBuf>,
    /// HTTP backend: OpenAI-compatible base URL.
    #[arg(long)]
    backend_http_url: Option<String>,
    /// Model name for the HTTP backend.
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    /// Case dataset (JSONL).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    conflict_threshold: Option<u32>,
    #[arg(long)]
    budget_per_case: Option<u32>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    n_best: Option<u32>,
    /// Run flows sequentially instead of concurrently.
    #[arg(long)]
    sequential: bool,
    /// Directory of prompt template overrides.
    #[arg(long)]
    prompts_dir: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct BuildPrefsArgs {
    /// Run manifest produced by `claw run`.
    #[arg(long)]
    manifest: PathBuf,
    /// The case dataset the run consumed.
    #[arg(long)]
    dataset: PathBuf,
    /// Output preference JSONL path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Preference dataset (JSONL with schema header).
    #[arg(long)]
    prefs: PathBuf,
    /// Output directory for policy.json and loss.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
enum BleuModeArg {
    #[default]
    Corpus,
    MeanOverCases,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predictions JSONL: {case_id, candidate, pred_labels}.
    #[arg(long)]
    predictions: PathBuf,
    /// References JSONL: {case_id, references, gt_labels}.
    #[arg(long)]
    references: PathBuf,
    /// Output MetricReport JSON path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = BleuModeArg::Corpus)]
    bleu_mode: BleuModeArg,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct DemoArgs {
    /// Output directory for every pipeline artifact.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 24)]
    cases: usize,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long)]
    force: bool,
}

/// Entry point used by the `claw` binary.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::BuildPrefs(args) => cmd_build_prefs(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Demo(args) => demo::cmd_demo(args.out, args.seed, args.cases, args.steps, args.force),
    }
}

/// Refuse to overwrite an existing output unless --force was given.
fn guard_out(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        return Err(usage(format!(
            "out: refusing to overwrite {} (pass --force)",
            path.display()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
enum BackendSpec {
    Scripted {
        path: PathBuf,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

/// Resolved run configuration: config file merged with flag overrides.
#[derive(Debug, Clone, Deserialize, Serialize)]
struct ResolvedRunConfig {
    backend: BackendSpec,
    dataset: PathBuf,
    out: PathBuf,
    generation: GenerationParams,
    conflict_threshold: u32,
    budget_per_case: u32,
    workers: usize,
    seed: u64,
    mode: ExecMode,
    #[serde(default)]
    prompts_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
struct FileRunConfig {
    backend: Option<BackendSpec>,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    generation: Option<GenerationParams>,
    conflict_threshold: Option<u32>,
    budget_per_case: Option<u32>,
    workers: Option<usize>,
    seed: Option<u64>,
    mode: Option<ExecMode>,
    prompts_dir: Option<PathBuf>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(8)
}

fn resolve_run_config(args: &RunArgs) -> anyhow::Result<ResolvedRunConfig> {
    let file: FileRunConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("config: cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| usage(format!("config: {}: {e}", path.display())))?
        }
        None => FileRunConfig::default(),
    };

    let flag_backend = match (&args.backend_script, &args.backend_http_url) {
        (Some(_), Some(_)) => {
            return Err(usage(
                "backend: give either --backend-script or --backend-http-url, not both",
            ))
        }
        (Some(path), None) => Some(BackendSpec::Scripted { path: path.clone() }),
        (None, Some(url)) => Some(BackendSpec::Http {
            base_url: url.clone(),
            model: args
                .model
                .clone()
                .ok_or_else(|| usage("model: --backend-http-url requires --model"))?,
            api_key_env: args.api_key_env.clone(),
        }),
        (None, None) => None,
    };
    let backend = flag_backend
        .or(file.backend)
        .ok_or_else(|| usage("backend: exactly one backend spec is required"))?;

    let dataset = args
        .dataset
        .clone()
        .or(file.dataset)
        .ok_or_else(|| usage("dataset: required"))?;
    let out = args
        .out
        .clone()
        .or(file.out)
        .ok_or_else(|| usage("out: required"))?;

    let mut generation = file.generation.unwrap_or_default();
    if let Some(v) = args.max_tokens {
        generation.max_tokens = v;
    }
    if let Some(v) = args.temperature {
        generation.temperature = v;
    }
    if let Some(v) = args.n_best {
        generation.n_best = v;
    }

    Ok(ResolvedRunConfig {
        backend,
        dataset,
        out,
        generation,
        conflict_threshold: args.conflict_threshold.or(file.conflict_threshold).unwrap_or(1),
        budget_per_case: args.budget_per_case.or(file.budget_per_case).unwrap_or(64),
        workers: args.workers.or(file.workers).unwrap_or_else(default_workers),
        seed: args.seed.or(file.seed).unwrap_or(0),
        mode: if args.sequential {
            ExecMode::Sequential
        } else {
            file.mode.unwrap_or_default()
        },
        prompts_dir: args.prompts_dir.clone().or(file.prompts_dir),
    })
}

/// Validate paths and build the backend; no network before this point.
fn build_backend(spec: &BackendSpec) -> anyhow::Result<Box<dyn Backend>> {
    match spec {
        BackendSpec::Scripted { path } => {
            let backend = ScriptedBackend::from_file(path)
                .map_err(|e| usage(format!("backend.scripted.path: {e}")))?;
            Ok(Box::new(backend))
        }
        BackendSpec::Http {
            base_url,
            model,
            api_key_env,
        } => {
            let mut config = HttpBackendConfig::new(base_url.clone(), model.clone());
            if let Some(env) = api_key_env {
                config = config.with_api_key_env(env.clone());
            }
            let backend =
                HttpBackend::new(config).map_err(|e| usage(format!("backend.http.base_url: {e}")))?;
            Ok(Box::new(backend))
        }
    }
}

fn build_orchestrator(config: &ResolvedRunConfig) -> anyhow::Result<Orchestrator> {
    let prompts = match &config.prompts_dir {
        Some(dir) => PromptLibrary::from_dir(dir)
            .map_err(|e| usage(format!("prompts_dir: {e}")))?,
        None => PromptLibrary::builtin(),
    };
    Ok(Orchestrator::new(prompts, config.generation.clone())
        .with_conflict_threshold(config.conflict_threshold)
        .with_budget_per_case(config.budget_per_case))
}

pub(crate) fn run_dataset_to_manifest(
    config_text: String,
    orchestrator: &Orchestrator,
    cases: &[crate::domain::CaseRecord],
    backend: &dyn Backend,
    mode: ExecMode,
    workers: usize,
) -> RunManifest {
    let hash = config_hash(&config_text);
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let options = RunOptions {
        mode,
        workers,
        run_id: format!("run-{hash}-{stamp}"),
        config_hash: hash,
    };
    execute_run(orchestrator, cases, backend, &options)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<u8> {
    let config = resolve_run_config(&args)?;
    if !config.dataset.exists() {
        return Err(usage(format!(
            "dataset: no such file: {}",
            config.dataset.display()
        )));
    }
    std::fs::create_dir_all(&config.out)
        .map_err(|e| usage(format!("out: cannot create {}: {e}", config.out.display())))?;
    let manifest_path = config.out.join("manifest.json");
    guard_out(&manifest_path, args.force)?;

    let cases = read_cases_jsonl(&config.dataset).map_err(|e| usage(format!("dataset: {e}")))?;
    if cases.is_empty() {
        return Err(usage("dataset: no cases found"));
    }
    let backend = build_backend(&config.backend)?;
    let orchestrator = build_orchestrator(&config)?;

    let config_text =
        serde_json::to_string(&config).expect("resolved config serializes");
    let manifest = run_dataset_to_manifest(
        config_text,
        &orchestrator,
        &cases,
        backend.as_ref(),
        config.mode,
        config.workers,
    );
    manifest.save(&manifest_path)?;

    println!(
        "run {}: {} case(s), {} succeeded, {} failed, {} conflict(s)",
        manifest.run_id,
        manifest.summary.cases,
        manifest.summary.succeeded,
        manifest.summary.failed,
        manifest.summary.conflicts
    );
    for case in &manifest.cases {
        if case.status == CaseStatus::Failed {
            let detail = case
                .error
                .as_ref()
                .map(|e| format!("{}: {}", e.stage, e.message))
                .unwrap_or_else(|| "unknown".into());
            println!("  failed {}: {detail}", case.case_id);
        }
    }
    println!("manifest: {}", manifest_path.display());
    Ok(if manifest.summary.failed > 0 { 2 } else { 0 })
}

// ---------------------------------------------------------------------------
// build-prefs
// ---------------------------------------------------------------------------

fn cmd_build_prefs(args: BuildPrefsArgs) -> anyhow::Result<u8> {
    guard_out(&args.out, args.force)?;
    let manifest = RunManifest::load(&args.manifest)
        .map_err(|e| usage(format!("manifest: {e}")))?;
    let cases = read_cases_jsonl(&args.dataset).map_err(|e| usage(format!("dataset: {e}")))?;

    let dataset = build_prefs_from_manifest(&manifest, &cases)?;
    preference::persist(&dataset, &args.out)?;
    println!(
        "prefs: conflicts {}, ties discarded {}, pairs {} (coop wins {}, comp wins {})",
        dataset.counts.conflicts,
        dataset.counts.ties_discarded,
        dataset.counts.pairs,
        dataset.counts.coop_wins,
        dataset.counts.comp_wins
    );
    println!("written: {}", args.out.display());
    Ok(0)
}

pub(crate) fn build_prefs_from_manifest(
    manifest: &RunManifest,
    cases: &[crate::domain::CaseRecord],
) -> anyhow::Result<PreferenceDataset> {
    let case_index: BTreeMap<&str, &crate::domain::CaseRecord> =
        cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let manifest_ids: Vec<&str> = manifest.cases.iter().map(|c| c.case_id.as_str()).collect();

    let dataset_orphans: Vec<&str> = case_index
        .keys()
        .filter(|id| !manifest_ids.contains(*id))
        .copied()
        .collect();
    let manifest_orphans: Vec<&str> = manifest_ids
        .iter()
        .filter(|id| !case_index.contains_key(**id))
        .copied()
        .collect();
    if !dataset_orphans.is_empty() || !manifest_orphans.is_empty() {
        return Err(usage(format!(
            "case ids differ between manifest and dataset; only in dataset: {dataset_orphans:?}, only in manifest: {manifest_orphans:?}"
        )));
    }

    let mut sorted: Vec<&crate::manifest::CaseReport> = manifest.cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    let items = sorted.iter().filter_map(|report| {
        match (&report.coop, &report.comp) {
            (Some(coop), Some(comp)) => Some((case_index[report.case_id.as_str()], coop, comp)),
            _ => None,
        }
    });
    Ok(preference::build_dataset(
        items,
        manifest.conflict_threshold,
        manifest.run_id.clone(),
    )?)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Map the mined pairs onto prompt ids and token-sequence outcomes.
pub(crate) fn scored_pairs(
    dataset: &PreferenceDataset,
) -> anyhow::Result<(Vec<String>, Vec<ScoredPair>)> {
    let mut prompts: Vec<String> = dataset.pairs.iter().map(|p| p.prompt_x.clone()).collect();
    prompts.sort();
    prompts.dedup();
    let prompt_id = |text: &str| prompts.iter().position(|p| p == text).expect("prompt indexed");

    let mut pairs = Vec::with_capacity(dataset.pairs.len());
    for pair in &dataset.pairs {
        if pair.y_w.token_seq.is_empty() || pair.y_l.token_seq.is_empty() {
            return Err(usage(format!(
                "prefs: pair for case {} lacks token sequences",
                pair.case_id
            )));
        }
        pairs.push(ScoredPair {
            prompt: prompt_id(&pair.prompt_x),
            win: Outcome::Seq(pair.y_w.token_seq.clone()),
            lose: Outcome::Seq(pair.y_l.token_seq.clone()),
        });
    }
    Ok((prompts, pairs))
}

pub(crate) fn train_on_pairs(
    prompts: Vec<String>,
    pairs: &[ScoredPair],
    config: &CompoConfig,
) -> anyhow::Result<(PolicyFile, TrainOutcome<TokenTablePolicy>, TokenTablePolicy)> {
    let vocab_size = pairs
        .iter()
        .flat_map(|p| [&p.win, &p.lose])
        .filter_map(|o| match o {
            Outcome::Seq(seq) => seq.iter().max().copied(),
            Outcome::Id(_) => None,
        })
        .max()
        .map(|m| m as usize + 1)
        .ok_or_else(|| usage("prefs: no token ids found in pairs"))?;

    let mut policy = TokenTablePolicy::uniform(prompts.len(), vocab_size);
    let outcome = train(&mut policy, pairs, config)?;

    let rows = |table: &TokenTablePolicy| -> Vec<Vec<f64>> {
        table
            .params()
            .chunks(vocab_size)
            .map(|row| row.to_vec())
            .collect()
    };
    let config_text = serde_json::to_string(config).expect("config serializes");
    let file = PolicyFile {
        schema: POLICY_SCHEMA.to_string(),
        config_hash: config_hash(&config_text),
        beta: config.beta,
        prompts,
        vocab_size,
        policy_logits: rows(&policy),
        reference_logits: rows(&outcome.reference),
    };
    Ok((file, outcome, policy))
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<u8> {
    std::fs::create_dir_all(&args.out)
        .map_err(|e| usage(format!("out: cannot create {}: {e}", args.out.display())))?;
    let policy_path = args.out.join("policy.json");
    let trace_path = args.out.join("loss.csv");
    guard_out(&policy_path, args.force)?;
    guard_out(&trace_path, args.force)?;

    let dataset = preference::load(&args.prefs).map_err(|e| usage(format!("prefs: {e}")))?;
    if dataset.pairs.is_empty() {
        return Err(usage("prefs: dataset has no pairs"));
    }
    let config = CompoConfig {
        beta: args.beta,
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        steps: args.steps,
        seed: args.seed,
    };
    config.validate()?;

    let (prompts, pairs) = scored_pairs(&dataset)?;
    let (file, outcome, _policy) = train_on_pairs(prompts, &pairs, &config)?;

    save_policy_file(&policy_path, &file)?;
    std::fs::write(&trace_path, crate::compo::trace_to_csv(&outcome.trace))?;

    println!(
        "train: {} pair(s), {} step(s), final loss {:.6}, preference accuracy {:.4}, mean margin {:.6}",
        pairs.len(),
        args.steps,
        outcome.final_loss,
        outcome.preference_accuracy,
        outcome.final_mean_margin
    );
    println!("policy: {}", policy_path.display());
    println!("trace: {}", trace_path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Prediction-side record joined against references by case id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub candidate: String,
    pub pred_labels: LabelSet,
}

/// Reference-side record joined against predictions by case id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub case_id: String,
    pub references: Vec<String>,
    pub gt_labels: LabelSet,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(line)
            .map_err(|e| usage(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(value);
    }
    Ok(out)
}

pub(crate) fn join_eval_records(
    predictions: Vec<PredictionRecord>,
    references: Vec<ReferenceRecord>,
) -> anyhow::Result<Vec<EvalRecord>> {
    let mut reference_index: BTreeMap<String, ReferenceRecord> = references
        .into_iter()
        .map(|r| (r.case_id.clone(), r))
        .collect();
    let mut records = Vec::with_capacity(predictions.len());
    let mut missing = Vec::new();
    for prediction in predictions {
        match reference_index.remove(&prediction.case_id) {
            Some(reference) => records.push(EvalRecord {
                case_id: prediction.case_id,
                candidate: prediction.candidate,
                references: reference.references,
                pred_labels: prediction.pred_labels,
                gt_labels: reference.gt_labels,
            }),
            None => missing.push(prediction.case_id),
        }
    }
    let unmatched: Vec<String> = reference_index.into_keys().collect();
    if !missing.is_empty() || !unmatched.is_empty() {
        return Err(usage(format!(
            "case ids not aligned; predictions without references: {missing:?}, references without predictions: {unmatched:?}"
        )));
    }
    records.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    Ok(records)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<u8> {
    guard_out(&args.out, args.force)?;
    let predictions: Vec<PredictionRecord> = read_jsonl(&args.predictions)?;
    let references: Vec<ReferenceRecord> = read_jsonl(&args.references)?;
    let records = join_eval_records(predictions, references)?;
    if records.is_empty() {
        return Err(usage("predictions: no records"));
    }
    let mode = match args.bleu_mode {
        BleuModeArg::Corpus => BleuAggregation::Corpus,
        BleuModeArg::MeanOverCases => BleuAggregation::MeanOverCases,
    };
    let report = evaluate(&records, mode)?;
    write_metric_report(&args.out, &report)?;
    print!("{}", report.display_table());
    println!("report: {}", args.out.display());
    Ok(0)
}

pub(crate) fn write_metric_report(path: &Path, report: &MetricReport) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json)?;
    Ok(())
}

//! The `kgqd` command line: knowledge-graph extraction, method runs, dataset
//! builds, grading reports, and survey aggregation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 unparseable knowledge graph
//! (`kg` command only), 64 usage error. Artifacts go to stdout or `--out`
//! paths; logs go to stderr. Configuration precedence is flags, then
//! environment (`KGQD_*`, `LLM_API_KEY`), then `--config` JSON file.

use crate::dataset::{self, BuildConfig, Category};
use crate::eval::{self, GradeSpec, JudgePolicy, ReportFormat, SurveyGroupBy};
use crate::kg;
use crate::pipeline::{self, Method, PipelineConfig, PipelineError};
use crate::prompt::PromptLibrary;
use crate::provider::{
    self, CompletionProvider, HttpProvider, RecordProvider, ReplayProvider, RetryPolicy,
    API_KEY_ENV,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

const EXIT_OK: i32 = 0;
const EXIT_RUNTIME: i32 = 1;
const EXIT_KG_UNPARSEABLE: i32 = 2;
const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "kgqd", version, about = "Knowledge-graph-guided question decomposition")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalOpts {
    /// JSON config file; flags and environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Transport: live HTTP, cassette replay, record-through, or a scripted
    /// response file.
    #[arg(long, global = true, value_enum)]
    provider: Option<ProviderMode>,
    /// Chat-completions endpoint base URL (live/record).
    #[arg(long, global = true)]
    base_url: Option<String>,
    /// Model identifier sent with every request.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Cassette path (replay/record).
    #[arg(long, global = true)]
    cassette: Option<PathBuf>,
    /// Scripted-responses file (JSON Lines), scripted provider only.
    #[arg(long, global = true)]
    script: Option<PathBuf>,
    /// Directory of prompt template files overriding the built-ins.
    #[arg(long, global = true)]
    templates_dir: Option<PathBuf>,
    /// Corrective reprompts allowed after an unparseable KG completion.
    #[arg(long, global = true)]
    kg_retry_budget: Option<u32>,
    /// Questions processed concurrently (dataset build).
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Relative tolerance for numeric grading.
    #[arg(long, global = true)]
    rel_tol: Option<f64>,
    /// Absolute tolerance for numeric grading.
    #[arg(long, global = true)]
    abs_tol: Option<f64>,
    /// Compare numeric answers without units.
    #[arg(long, global = true)]
    ignore_units: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProviderMode {
    Live,
    Replay,
    Record,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Standard,
    Decomp,
    DecompKg,
    All,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Standard => vec![Method::Standard],
            MethodArg::Decomp => vec![Method::DecompNoKg],
            MethodArg::DecompKg => vec![Method::DecompWithKg],
            MethodArg::All => Method::all().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportArg {
    Md,
    Csv,
}

impl From<ReportArg> for ReportFormat {
    fn from(value: ReportArg) -> Self {
        match value {
            ReportArg::Md => ReportFormat::Markdown,
            ReportArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the knowledge graph for one question and print it as
    /// canonical JSON.
    Kg {
        /// File containing the question text.
        question_file: Option<PathBuf>,
        /// Question text given inline.
        #[arg(long)]
        text: Option<String>,
    },
    /// Run reasoning methods over a question bank, writing one trace file
    /// per question and method.
    Run {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        method: MethodArg,
        /// Directory that receives runs/{run_id}/ trace files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "run")]
        run_id: String,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Build (or resume) the KG + sub-query dataset for a question bank.
    DatasetBuild {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        journal: PathBuf,
    },
    /// Grade persisted traces against gold answers and emit a success-rate
    /// report.
    Eval {
        /// Directory of trace files (searched recursively).
        #[arg(long)]
        runs: PathBuf,
        /// Question bank supplying gold answers and categories.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        report: ReportArg,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write graded outcomes as JSON Lines.
        #[arg(long)]
        outcomes: Option<PathBuf>,
    },
    /// Aggregate a survey CSV into mean ratings per method.
    Survey {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        report: ReportArg,
        /// Group columns by question set or by category.
        #[arg(long, value_enum, default_value = "category")]
        group_by: GroupByArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GroupByArg {
    Set,
    Category,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("knowledge graph unparseable: {0}")]
    KgUnparseable(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::KgUnparseable(_) => EXIT_KG_UNPARSEABLE,
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
    crate::provider::ProviderError,
    crate::dataset::DatasetError,
    crate::eval::EvalError,
    crate::prompt::PromptError,
    crate::kg::KgError
);

/// File-backed configuration; every field optional, overridden by
/// environment and flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    provider: Option<String>,
    base_url: Option<String>,
    model: Option<String>,
    cassette: Option<PathBuf>,
    script: Option<PathBuf>,
    templates_dir: Option<PathBuf>,
    kg_retry_budget: Option<u32>,
    concurrency: Option<usize>,
    rel_tol: Option<f64>,
    abs_tol: Option<f64>,
    ignore_units: Option<bool>,
    temperature: Option<f64>,
    max_output_tokens: Option<u32>,
    retry_max_attempts: Option<u32>,
    retry_base_delay_ms: Option<u64>,
    retry_multiplier: Option<f64>,
}

/// Fully resolved run configuration.
struct RunConfig {
    provider_mode: ProviderMode,
    base_url: String,
    cassette: Option<PathBuf>,
    script: Option<PathBuf>,
    concurrency: usize,
    grade: GradeSpec,
    pipeline: PipelineConfig,
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn resolve_config(opts: &GlobalOpts) -> Result<RunConfig, CliError> {
    let file: ConfigFile = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("config {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Runtime(format!("config {}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };

    let provider_name = opts
        .provider
        .map(|p| {
            match p {
                ProviderMode::Live => "live",
                ProviderMode::Replay => "replay",
                ProviderMode::Record => "record",
                ProviderMode::Scripted => "scripted",
            }
            .to_string()
        })
        .or_else(|| env_var("KGQD_PROVIDER"))
        .or(file.provider)
        .unwrap_or_else(|| "replay".to_string());
    let provider_mode = match provider_name.as_str() {
        "live" => ProviderMode::Live,
        "replay" => ProviderMode::Replay,
        "record" => ProviderMode::Record,
        "scripted" => ProviderMode::Scripted,
        other => return Err(CliError::Usage(format!("unknown provider mode \"{other}\""))),
    };

    let prompts = match opts
        .templates_dir
        .clone()
        .or_else(|| env_var("KGQD_TEMPLATES_DIR").map(PathBuf::from))
        .or(file.templates_dir)
    {
        Some(dir) => PromptLibrary::from_dir(&dir).map_err(|e| CliError::Runtime(e.to_string()))?,
        None => PromptLibrary::builtin(),
    };

    let mut pipeline = PipelineConfig {
        prompts: Arc::new(prompts),
        ..PipelineConfig::default()
    };
    if let Some(model) = opts
        .model
        .clone()
        .or_else(|| env_var("KGQD_MODEL"))
        .or(file.model)
    {
        pipeline.model = model;
    }
    if let Some(budget) = opts.kg_retry_budget.or(file.kg_retry_budget) {
        pipeline.kg_retry_budget = budget;
    }
    if let Some(t) = file.temperature {
        pipeline.temperature = t;
    }
    if let Some(m) = file.max_output_tokens {
        pipeline.max_output_tokens = m;
    }
    pipeline.retry = RetryPolicy {
        max_attempts: file.retry_max_attempts.unwrap_or(3),
        base_delay_ms: file.retry_base_delay_ms.unwrap_or(100),
        multiplier: file.retry_multiplier.unwrap_or(2.0),
    };

    let grade = GradeSpec {
        numeric_rel_tol: opts.rel_tol.or(file.rel_tol).unwrap_or(0.005),
        numeric_abs_tol: opts.abs_tol.or(file.abs_tol).unwrap_or(1e-9),
        ignore_units: opts.ignore_units || file.ignore_units.unwrap_or(false),
        judge: JudgePolicy::None,
    };

    Ok(RunConfig {
        provider_mode,
        base_url: opts
            .base_url
            .clone()
            .or_else(|| env_var("KGQD_BASE_URL"))
            .or(file.base_url)
            .unwrap_or_else(|| "https://api.openai.com/v1".to_string()),
        cassette: opts
            .cassette
            .clone()
            .or_else(|| env_var("KGQD_CASSETTE").map(PathBuf::from))
            .or(file.cassette),
        script: opts.script.clone().or(file.script),
        concurrency: opts.concurrency.or(file.concurrency).unwrap_or(1),
        grade,
        pipeline,
    })
}

fn make_provider(config: &RunConfig) -> Result<Box<dyn CompletionProvider>, CliError> {
    match config.provider_mode {
        ProviderMode::Live => {
            let provider = HttpProvider::from_env(&config.base_url)
                .map_err(|e| CliError::Runtime(format!("live provider: {e} (set {API_KEY_ENV})")))?;
            Ok(Box::new(provider))
        }
        ProviderMode::Replay => {
            let path = config.cassette.as_ref().ok_or_else(|| {
                CliError::Usage("replay mode requires --cassette".to_string())
            })?;
            Ok(Box::new(ReplayProvider::open(path)?))
        }
        ProviderMode::Record => {
            let path = config.cassette.as_ref().ok_or_else(|| {
                CliError::Usage("record mode requires --cassette".to_string())
            })?;
            let inner = HttpProvider::from_env(&config.base_url)
                .map_err(|e| CliError::Runtime(format!("record provider: {e} (set {API_KEY_ENV})")))?;
            Ok(Box::new(RecordProvider::open(path, inner)?))
        }
        ProviderMode::Scripted => {
            let path = config
                .script
                .as_ref()
                .ok_or_else(|| CliError::Usage("scripted mode requires --script".to_string()))?;
            Ok(Box::new(provider::scripted_from_file(path)?))
        }
    }
}

fn cmd_kg(
    config: &RunConfig,
    question_file: Option<&Path>,
    text: Option<&str>,
) -> Result<(), CliError> {
    let question = match (question_file, text) {
        (Some(_), Some(_)) => {
            return Err(CliError::Usage(
                "give either a question file or --text, not both".into(),
            ))
        }
        (Some(path), None) => std::fs::read_to_string(path)?,
        (None, Some(t)) => t.to_string(),
        (None, None) => {
            return Err(CliError::Usage(
                "a question file or --text is required".into(),
            ))
        }
    };
    if question.trim().is_empty() {
        return Err(CliError::Usage("question text is empty".into()));
    }
    let provider = make_provider(config)?;
    match pipeline::kg_stage_with_repair(question.trim(), provider.as_ref(), &config.pipeline) {
        Ok(pipeline::KgOutcome::Parsed(stage)) => {
            println!("{}", kg::serialize_graph(&stage.graph)?);
            Ok(())
        }
        Ok(pipeline::KgOutcome::Unparseable(failure)) => Err(CliError::KgUnparseable(format!(
            "no parseable graph after {} attempts: {}",
            failure.attempts, failure.last_error
        ))),
        Err(PipelineError::Provider { stage, source }) => Err(CliError::Runtime(format!(
            "provider failed at stage {stage}: {source}"
        ))),
        Err(e) => Err(CliError::Runtime(e.to_string())),
    }
}

fn cmd_run(
    config: &RunConfig,
    bank_path: &Path,
    method_arg: MethodArg,
    out: &Path,
    run_id: &str,
    force: bool,
) -> Result<(), CliError> {
    let bank = dataset::ingest_question_bank(bank_path)?;
    let run_dir = out.join(run_id);
    if run_dir.exists() && !force {
        return Err(CliError::Runtime(format!(
            "run directory {} already exists (use --force to overwrite)",
            run_dir.display()
        )));
    }
    let provider = make_provider(config)?;
    let methods = method_arg.methods();

    let mut traces = 0usize;
    let mut errors = 0usize;
    let mut verdicts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut any_gold = false;
    for question in &bank {
        for &method in &methods {
            let trace = match pipeline::run_method(question, method, provider.as_ref(), &config.pipeline)
            {
                Ok(trace) => trace,
                Err(PipelineError::KgUnparseable { trace, last_error, .. }) => {
                    log::warn!("{}/{}: kg unparseable: {last_error}", question.id, method);
                    errors += 1;
                    // The partial trace is still worth keeping.
                    pipeline::persist_trace(out, run_id, &trace)?;
                    continue;
                }
                Err(PipelineError::Io(e)) => return Err(e.into()),
                Err(e) => {
                    log::warn!("{}/{}: {e}", question.id, method);
                    errors += 1;
                    continue;
                }
            };
            pipeline::persist_trace(out, run_id, &trace)?;
            traces += 1;
            if question.gold_answer.is_some() {
                any_gold = true;
                let outcome = eval::grade(&trace, question, &config.grade);
                *verdicts
                    .entry(method.slug().to_string())
                    .or_default()
                    .entry(outcome.verdict.to_string())
                    .or_default() += 1;
            }
        }
    }

    let mut summary = serde_json::json!({
        "run_id": run_id,
        "traces": traces,
        "errors": errors,
    });
    if any_gold {
        summary["verdicts"] = serde_json::to_value(&verdicts).expect("map serializes");
    }
    println!("{summary}");
    Ok(())
}

fn cmd_dataset_build(
    config: &RunConfig,
    bank_path: &Path,
    out: &Path,
    journal: &Path,
) -> Result<(), CliError> {
    let bank = dataset::ingest_question_bank(bank_path)?;
    let provider = make_provider(config)?;
    let build = BuildConfig {
        journal_path: journal.to_path_buf(),
        out_path: out.to_path_buf(),
        concurrency: config.concurrency,
        timestamp: None,
        pipeline: config.pipeline.clone(),
    };
    let summary = dataset::build_dataset(&bank, provider.as_ref(), &build)?;
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );
    Ok(())
}

fn emit_or_write(text: &str, out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_eval(
    config: &RunConfig,
    runs: &Path,
    gold: &Path,
    format: ReportFormat,
    out: Option<&Path>,
    outcomes_path: Option<&Path>,
) -> Result<(), CliError> {
    let bank = dataset::ingest_question_bank(gold)?;
    let questions: BTreeMap<String, _> =
        bank.into_iter().map(|q| (q.id.clone(), q)).collect();
    let categories: BTreeMap<String, Category> = questions
        .iter()
        .map(|(id, q)| (id.clone(), q.category))
        .collect();

    let mut trace_files = Vec::new();
    collect_json_files(runs, &mut trace_files)?;
    trace_files.sort();
    if trace_files.is_empty() {
        return Err(CliError::Runtime(format!(
            "no trace files under {}",
            runs.display()
        )));
    }
    let mut outcomes = Vec::new();
    for path in &trace_files {
        let trace = pipeline::load_trace(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let Some(question) = questions.get(&trace.question_id) else {
            log::warn!("{}: question {} not in gold bank", path.display(), trace.question_id);
            continue;
        };
        outcomes.push(eval::grade(&trace, question, &config.grade));
    }
    if let Some(path) = outcomes_path {
        eval::write_outcomes(path, &outcomes)?;
    }
    let table = eval::success_table(&outcomes, &categories)?;
    let ungradable = eval::ungradable_counts(&outcomes, &categories)?;
    let mut text = eval::emit_report(&table, format);
    if format == ReportFormat::Markdown {
        let total: usize = ungradable.values().sum();
        if total > 0 {
            text.push_str(&format!("\nUngradable outcomes excluded: {total}\n"));
        }
    }
    emit_or_write(&text, out)
}

fn collect_json_files(dir: &Path, into: &mut Vec<PathBuf>) -> Result<(), CliError> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_json_files(&path, into)?;
        } else if path.extension().is_some_and(|ext| ext == "json") {
            into.push(path);
        }
    }
    Ok(())
}

fn cmd_survey(
    csv_path: &Path,
    format: ReportFormat,
    group_by: GroupByArg,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let responses = eval::read_survey_csv(csv_path)?;
    let grouping = match group_by {
        GroupByArg::Set => SurveyGroupBy::Set,
        GroupByArg::Category => SurveyGroupBy::default_categories(),
    };
    let table = eval::survey_means(&responses, &grouping);
    emit_or_write(&eval::emit_report(&table, format), out)
}

/// Parse arguments and run; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let config = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Kg {
            question_file,
            text,
        } => cmd_kg(&config, question_file.as_deref(), text.as_deref()),
        Command::Run {
            bank,
            method,
            out,
            run_id,
            force,
        } => cmd_run(&config, bank, *method, out, run_id, *force),
        Command::DatasetBuild { bank, out, journal } => {
            cmd_dataset_build(&config, bank, out, journal)
        }
        Command::Eval {
            runs,
            gold,
            report,
            out,
            outcomes,
        } => cmd_eval(
            &config,
            runs,
            gold,
            (*report).into(),
            out.as_deref(),
            outcomes.as_deref(),
        ),
        Command::Survey {
            csv,
            report,
            group_by,
            out,
        } => cmd_survey(csv, (*report).into(), *group_by, out.as_deref()),
    }
}

//! The three reasoning methods, end to end, with full tracing.
//!
//! Every run produces a [`ReasoningTrace`] carrying each stage's prompt, raw
//! completion, parsed payload, attempt count, and latency — enough to audit
//! any answer back to the exact text that produced it. Under a replay or
//! scripted provider a run is a pure function of (question, cassette, config).

use crate::dataset::{Category, QuestionRecord};
use crate::extract::{self, ChoiceAnswer, Quantity};
use crate::kg::{self, KnowledgeGraph};
use crate::prompt::{FewShotBank, PromptError, PromptLibrary};
use crate::provider::{
    with_retries, ChatRequest, CompletionProvider, Message, ProviderError, RetryPolicy,
};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

/// The three reasoning methods under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "decomp")]
    DecompNoKg,
    #[serde(rename = "decomp-kg")]
    DecompWithKg,
}

impl Method {
    pub fn all() -> [Method; 3] {
        [Method::Standard, Method::DecompNoKg, Method::DecompWithKg]
    }

    /// Short identifier used in file names and CLI flags.
    pub fn slug(&self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::DecompNoKg => "decomp",
            Method::DecompWithKg => "decomp-kg",
        }
    }

    /// Human-readable row label for report tables.
    pub fn label(&self) -> &'static str {
        match self {
            Method::Standard => "Standard Prompting",
            Method::DecompNoKg => "Decomposition without KG",
            Method::DecompWithKg => "Decomposition with KG",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Method::Standard),
            "decomp" | "decomp-no-kg" => Ok(Method::DecompNoKg),
            "decomp-kg" | "decomp-with-kg" => Ok(Method::DecompWithKg),
            other => Err(format!("unknown method \"{other}\"")),
        }
    }
}

/// Stage identity within a trace. Serialized as a string: `kg`, `subqueries`,
/// `answer[i]`, `synthesis`, `direct`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageName {
    Kg,
    Subqueries,
    Answer(usize),
    Synthesis,
    Direct,
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageName::Kg => f.write_str("kg"),
            StageName::Subqueries => f.write_str("subqueries"),
            StageName::Answer(i) => write!(f, "answer[{i}]"),
            StageName::Synthesis => f.write_str("synthesis"),
            StageName::Direct => f.write_str("direct"),
        }
    }
}

impl FromStr for StageName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kg" => Ok(StageName::Kg),
            "subqueries" => Ok(StageName::Subqueries),
            "synthesis" => Ok(StageName::Synthesis),
            "direct" => Ok(StageName::Direct),
            other => other
                .strip_prefix("answer[")
                .and_then(|rest| rest.strip_suffix(']'))
                .and_then(|idx| idx.parse().ok())
                .map(StageName::Answer)
                .ok_or_else(|| format!("unknown stage name \"{other}\"")),
        }
    }
}

impl Serialize for StageName {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for StageName {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(D::Error::custom)
    }
}

/// One provider exchange within a trace. `attempts` counts transport attempts
/// for this completion; a reprompted stage (kg self-repair) appears as
/// multiple records with the same stage name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageName,
    pub prompt: String,
    pub raw_completion: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_payload: Option<serde_json::Value>,
    pub attempts: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubAnswer {
    pub subquery: String,
    pub answer_text: String,
}

/// The complete per-question artifact chain for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub question_id: String,
    pub method: Method,
    pub template_version: String,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg: Option<KnowledgeGraph>,
    #[serde(default)]
    pub subqueries: Vec<String>,
    #[serde(default)]
    pub subanswers: Vec<SubAnswer>,
    pub final_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_quantity: Option<Quantity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_choice: Option<ChoiceAnswer>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ReasoningTrace {
    fn new(question_id: &str, method: Method, template_version: &str) -> Self {
        ReasoningTrace {
            question_id: question_id.to_string(),
            method,
            template_version: template_version.to_string(),
            stages: Vec::new(),
            kg: None,
            subqueries: Vec::new(),
            subanswers: Vec::new(),
            final_text: String::new(),
            final_quantity: None,
            final_choice: None,
            warnings: Vec::new(),
        }
    }

    /// Stage-name sequence with consecutive repeats collapsed (reprompts of
    /// the same stage count once).
    pub fn stage_shape(&self) -> Vec<String> {
        let mut shape: Vec<String> = Vec::new();
        for record in &self.stages {
            let name = record.stage.to_string();
            if shape.last() != Some(&name) {
                shape.push(name);
            }
        }
        shape
    }

    /// Total provider calls recorded in this trace.
    pub fn provider_calls(&self) -> u32 {
        self.stages.iter().map(|s| s.attempts).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("provider failed at stage {stage}: {source}")]
    Provider {
        stage: String,
        #[source]
        source: ProviderError,
    },
    #[error("knowledge graph unparseable after {attempts} attempts: {last_error}")]
    KgUnparseable {
        attempts: u32,
        last_error: String,
        /// The partial trace, retained for auditability.
        trace: Box<ReasoningTrace>,
    },
    #[error("failed to persist trace: {0}")]
    Io(#[from] std::io::Error),
}

/// Knobs for one pipeline run. Temperature defaults to 0 so cassettes replay
/// bit-for-bit.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Corrective reprompts allowed after an unparseable KG completion.
    pub kg_retry_budget: u32,
    /// Hard cap on sub-queries per question; excess is truncated with a
    /// trace warning.
    pub max_subqueries: usize,
    /// Few-shot exemplars injected into each answering prompt.
    pub answer_shots: usize,
    pub retry: RetryPolicy,
    /// Run the graph-free decomposition as one mega-completion instead of
    /// separate decompose/answer/synthesize calls.
    pub decomp_single_completion: bool,
    /// Worker threads for sub-query answering (1 = sequential).
    pub answer_parallelism: usize,
    pub prompts: Arc<PromptLibrary>,
    pub shots: Arc<FewShotBank>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: "gpt-4".to_string(),
            temperature: 0.0,
            max_output_tokens: 1024,
            kg_retry_budget: 2,
            max_subqueries: 8,
            answer_shots: 2,
            retry: RetryPolicy::default(),
            decomp_single_completion: false,
            answer_parallelism: 1,
            prompts: Arc::new(PromptLibrary::builtin()),
            shots: Arc::new(FewShotBank::builtin()),
        }
    }
}

fn complete_stage(
    provider: &dyn CompletionProvider,
    config: &PipelineConfig,
    stage: StageName,
    messages: Vec<Message>,
) -> Result<(StageRecord, String), PipelineError> {
    let prompt = messages
        .last()
        .map(|m| m.content.clone())
        .unwrap_or_default();
    let request = ChatRequest {
        model: config.model.clone(),
        messages,
        temperature: config.temperature,
        max_output_tokens: config.max_output_tokens,
    };
    let fingerprint = request.fingerprint();
    let completion =
        with_retries(provider, &request, &config.retry).map_err(|source| {
            PipelineError::Provider {
                stage: stage.to_string(),
                source,
            }
        })?;
    let record = StageRecord {
        stage,
        prompt,
        raw_completion: completion.response.text.clone(),
        parsed_payload: None,
        attempts: completion.attempts,
        latency_ms: completion.response.latency_ms,
    };
    Ok((record, fingerprint))
}

/// Outcome of the KG-generation stage, including every repair attempt.
pub struct KgStage {
    pub graph: KnowledgeGraph,
    pub records: Vec<StageRecord>,
    pub fingerprint: String,
}

/// What the KG stage produced when no attempt parsed.
pub struct KgFailure {
    pub records: Vec<StageRecord>,
    pub attempts: u32,
    pub last_error: String,
}

pub enum KgOutcome {
    Parsed(KgStage),
    Unparseable(KgFailure),
}

/// Generate and parse a knowledge graph with up to `kg_retry_budget`
/// corrective reprompts; each reprompt embeds the parse error.
pub fn kg_stage_with_repair(
    question_text: &str,
    provider: &dyn CompletionProvider,
    config: &PipelineConfig,
) -> Result<KgOutcome, PipelineError> {
    let initial = config.prompts.render_kg_prompt(question_text)?;
    let mut messages = vec![Message::user(initial)];
    let mut records = Vec::new();
    let mut last_error = String::new();
    for _attempt in 0..=config.kg_retry_budget {
        let (mut record, fingerprint) =
            complete_stage(provider, config, StageName::Kg, messages.clone())?;
        let completion_text = record.raw_completion.clone();
        let parsed = extract::extract_json_block(&completion_text)
            .map_err(|e| e.to_string())
            .and_then(|span| kg::parse_graph(span).map_err(|e| e.to_string()));
        match parsed {
            Ok(graph) => {
                record.parsed_payload = Some(
                    serde_json::to_value(&graph).expect("graph serialization cannot fail"),
                );
                records.push(record);
                return Ok(KgOutcome::Parsed(KgStage {
                    graph,
                    records,
                    fingerprint,
                }));
            }
            Err(error) => {
                records.push(record);
                messages.push(Message::assistant(completion_text));
                messages.push(Message::user(config.prompts.render_kg_corrective(&error)?));
                last_error = error;
            }
        }
    }
    Ok(KgOutcome::Unparseable(KgFailure {
        attempts: config.kg_retry_budget + 1,
        records,
        last_error,
    }))
}

/// Outcome of the sub-query derivation stage.
pub struct SubqueryStage {
    pub subqueries: Vec<String>,
    pub record: StageRecord,
    pub fingerprint: String,
    pub truncated: bool,
}

/// Derive sub-queries from the question, guided by the graph when present.
pub fn subquery_stage(
    question_text: &str,
    graph: Option<&KnowledgeGraph>,
    provider: &dyn CompletionProvider,
    config: &PipelineConfig,
) -> Result<SubqueryStage, PipelineError> {
    let prompt = match graph {
        Some(g) => config.prompts.render_subquery_prompt(question_text, g)?,
        None => config.prompts.render_subquery_prompt_direct(question_text)?,
    };
    let (mut record, fingerprint) = complete_stage(
        provider,
        config,
        StageName::Subqueries,
        vec![Message::user(prompt)],
    )?;
    let mut subqueries = extract::extract_subqueries(&record.raw_completion);
    let truncated = subqueries.len() > config.max_subqueries;
    subqueries.truncate(config.max_subqueries);
    record.parsed_payload = Some(serde_json::json!(subqueries));
    Ok(SubqueryStage {
        subqueries,
        record,
        fingerprint,
        truncated,
    })
}

fn answer_stages(
    subqueries: &[String],
    topic: &str,
    provider: &dyn CompletionProvider,
    config: &PipelineConfig,
) -> Result<Vec<(StageRecord, SubAnswer)>, PipelineError> {
    let run_one = |i: usize, subquery: &String| -> Result<(StageRecord, SubAnswer), PipelineError> {
        let shots = config.shots.select(topic, config.answer_shots);
        let prompt = config.prompts.render_answer_prompt(subquery, &shots)?;
        let (record, _) = complete_stage(
            provider,
            config,
            StageName::Answer(i),
            vec![Message::user(prompt)],
        )?;
        let answer = SubAnswer {
            subquery: subquery.clone(),
            answer_text: record.raw_completion.trim().to_string(),
        };
        Ok((record, answer))
    };

    if config.answer_parallelism <= 1 || subqueries.len() <= 1 {
        return subqueries
            .iter()
            .enumerate()
            .map(|(i, sq)| run_one(i, sq))
            .collect();
    }

    // Bounded fan-out; results land back in positional order.
    type Slot = std::sync::Mutex<Option<Result<(StageRecord, SubAnswer), PipelineError>>>;
    let slots: Vec<Slot> = (0..subqueries.len())
        .map(|_| std::sync::Mutex::new(None))
        .collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let workers = config.answer_parallelism.min(subqueries.len());
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= subqueries.len() {
                    break;
                }
                let result = run_one(i, &subqueries[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// Fill in `final_quantity`/`final_choice` from the final text, according to
/// the question category. Numerical questions get the concluding quantity;
/// conceptual ones go through three choice-normalization tiers: explicit
/// letters, ordinal references ("option 2", "Scenario 1"), then alignment
/// against the options enumerated in the question text.
fn finalize(trace: &mut ReasoningTrace, question: &QuestionRecord) {
    match question.category {
        Category::Numerical => match extract::extract_numeric_answer(&trace.final_text) {
            Ok(quantity) => trace.final_quantity = Some(quantity),
            Err(e) => trace.warnings.push(format!("final answer: {e}")),
        },
        Category::Conceptual => {
            let choice = extract::extract_choice_answer(&trace.final_text)
                .ok()
                .or_else(|| extract::extract_choice_ordinal(&trace.final_text))
                .or_else(|| {
                    let options = extract::enumerate_options(&question.text);
                    extract::align_choice_with_options(&trace.final_text, &options)
                });
            match choice {
                Some(c) => trace.final_choice = Some(c),
                None => trace
                    .warnings
                    .push("final answer: no answer choice found in text".to_string()),
            }
        }
    }
}

/// Method 1: the question goes straight to the model in one completion.
pub fn run_standard(
    question: &QuestionRecord,
    provider: &dyn CompletionProvider,
    config: &PipelineConfig,
) -> Result<ReasoningTrace, PipelineError> {
    let mut trace = ReasoningTrace::new(&question.id, Method::Standard, config.prompts.version());
    let prompt = config.prompts.render_standard_prompt(&question.text)?;
    let (record, _) = complete_stage(
        provider,
        config,
        StageName::Direct,
        vec![Message::user(prompt)],
    )?;
    trace.final_text = record.raw_completion.clone();
    trace.stages.push(record);
    finalize(&mut trace, question);
    Ok(trace)
}

/// Methods 2 and 3: decompose (optionally KG-guided), answer each sub-query
/// independently, then synthesize from the sub-answers given as facts.
pub fn run_decomposition(
    question: &QuestionRecord,
    provider: &dyn CompletionProvider,
    config: &PipelineConfig,
    use_kg: bool,
) -> Result<ReasoningTrace, PipelineError> {
    let method = if use_kg {
        Method::DecompWithKg
    } else {
        Method::DecompNoKg
    };
    let mut trace = ReasoningTrace::new(&question.id, method, config.prompts.version());

    if !use_kg && config.decomp_single_completion {
        // One completion carries decomposition, solving, and synthesis.
        let prompt = config.prompts.render_decomp_no_kg_prompt(&question.text)?;
        let (record, _) = complete_stage(
            provider,
            config,
            StageName::Direct,
            vec![Message::user(prompt)],
        )?;
        trace.final_text = record.raw_completion.clone();
        trace.subqueries = extract::extract_subqueries(&record.raw_completion);
        trace.stages.push(record);
        finalize(&mut trace, question);
        return Ok(trace);
    }

    if use_kg {
        match kg_stage_with_repair(&question.text, provider, config)? {
            KgOutcome::Parsed(stage) => {
                trace.stages.extend(stage.records);
                trace.kg = Some(stage.graph);
            }
            KgOutcome::Unparseable(failure) => {
                trace.stages.extend(failure.records);
                return Err(PipelineError::KgUnparseable {
                    attempts: failure.attempts,
                    last_error: failure.last_error,
                    trace: Box::new(trace),
                });
            }
        }
    }

    let stage = subquery_stage(&question.text, trace.kg.as_ref(), provider, config)?;
    if stage.truncated {
        trace.warnings.push(format!(
            "sub-query list truncated to {}",
            config.max_subqueries
        ));
    }
    if stage.subqueries.is_empty() {
        trace
            .warnings
            .push("no sub-queries extracted; synthesis runs on the bare question".to_string());
    }
    trace.subqueries = stage.subqueries.clone();
    trace.stages.push(stage.record);

    let answers = answer_stages(&trace.subqueries, &question.topic, provider, config)?;
    for (record, answer) in answers {
        trace.stages.push(record);
        trace.subanswers.push(answer);
    }

    let facts: Vec<(String, String)> = trace
        .subanswers
        .iter()
        .map(|sa| (sa.subquery.clone(), sa.answer_text.clone()))
        .collect();
    let prompt = config.prompts.render_synthesis_prompt(&question.text, &facts)?;
    let (record, _) = complete_stage(
        provider,
        config,
        StageName::Synthesis,
        vec![Message::user(prompt)],
    )?;
    trace.final_text = record.raw_completion.clone();
    trace.stages.push(record);
    finalize(&mut trace, question);
    Ok(trace)
}

/// Dispatch a question through one of the three methods.
pub fn run_method(
    question: &QuestionRecord,
    method: Method,
    provider: &dyn CompletionProvider,
    config: &PipelineConfig,
) -> Result<ReasoningTrace, PipelineError> {
    match method {
        Method::Standard => run_standard(question, provider, config),
        Method::DecompNoKg => run_decomposition(question, provider, config, false),
        Method::DecompWithKg => run_decomposition(question, provider, config, true),
    }
}

/// Trace file location: `{runs_root}/{run_id}/{question_id}.{method}.json`.
pub fn trace_path(runs_root: &Path, run_id: &str, question_id: &str, method: Method) -> PathBuf {
    runs_root
        .join(run_id)
        .join(format!("{question_id}.{}.json", method.slug()))
}

/// Persist a trace as pretty-printed JSON; returns the path written.
pub fn persist_trace(
    runs_root: &Path,
    run_id: &str,
    trace: &ReasoningTrace,
) -> Result<PathBuf, std::io::Error> {
    let path = trace_path(runs_root, run_id, &trace.question_id, trace.method);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(trace).expect("trace serialization cannot fail");
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn load_trace(path: &Path) -> Result<ReasoningTrace, std::io::Error> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

//! Question-bank ingestion and the resumable dataset build.
//!
//! The build walks a question bank, generates a knowledge graph and
//! sub-queries per question, and appends provenance-stamped records. Progress
//! lives in an append-only journal (fsync'd per entry) so an interrupted
//! build loses at most the in-flight question; completed records are staged
//! in `<out>.partial` and merged into an id-sorted output file at the end,
//! which makes reruns byte-identical to a clean pass.

use crate::extract::ChoiceAnswer;
use crate::kg::KnowledgeGraph;
use crate::pipeline::{kg_stage_with_repair, subquery_stage, KgOutcome, PipelineConfig, PipelineError};
use crate::provider::CompletionProvider;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Numerical,
    Conceptual,
}

impl Category {
    pub fn label(&self) -> &'static str {
        match self {
            Category::Numerical => "Numerical Solving",
            Category::Conceptual => "Conceptual Reasoning",
        }
    }
}

/// Reference answer attached to a bank question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum GoldAnswer {
    Quantity { value: f64, unit: String },
    /// Letters ("A", "AC") or a 1-based option number ("1").
    Choice { choice: String },
    Text { text: String },
}

impl GoldAnswer {
    pub fn as_choice(&self) -> Option<ChoiceAnswer> {
        match self {
            GoldAnswer::Choice { choice } => ChoiceAnswer::parse_token(choice),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub text: String,
    pub category: Category,
    #[serde(default)]
    pub topic: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<GoldAnswer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{}: {}", error.line_no, error.reason)]
    Line { path: String, error: LineError },
    #[error("question bank is empty")]
    EmptyBank,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Deserialize)]
struct RawQuestion {
    id: String,
    text: String,
    #[serde(default)]
    category: Option<Category>,
    #[serde(default)]
    topic: Option<String>,
    #[serde(default)]
    gold_answer: Option<GoldAnswer>,
}

fn finalize_question(raw: RawQuestion) -> Result<QuestionRecord, String> {
    if raw.id.trim().is_empty() {
        return Err("question id is empty".into());
    }
    if raw.text.trim().is_empty() {
        return Err("question text is empty".into());
    }
    if let Some(GoldAnswer::Choice { choice }) = &raw.gold_answer {
        if ChoiceAnswer::parse_token(choice).is_none() {
            return Err(format!("gold choice token \"{choice}\" is not valid"));
        }
    }
    // Absent category: numerical iff the gold answer is a quantity.
    let category = raw.category.unwrap_or(match raw.gold_answer {
        Some(GoldAnswer::Quantity { .. }) => Category::Numerical,
        _ => Category::Conceptual,
    });
    Ok(QuestionRecord {
        id: raw.id,
        text: raw.text,
        category,
        topic: raw.topic.unwrap_or_else(|| "general".to_string()),
        gold_answer: raw.gold_answer,
    })
}

/// Read a JSON Lines question bank, collecting per-line problems instead of
/// stopping at the first one.
pub fn try_ingest_question_bank(
    path: &Path,
) -> Result<(Vec<QuestionRecord>, Vec<LineError>), DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<RawQuestion, _> = serde_json::from_str(&line);
        match parsed.map_err(|e| e.to_string()).and_then(finalize_question) {
            Ok(record) => {
                if seen.contains(&record.id) {
                    errors.push(LineError {
                        line_no,
                        reason: format!("duplicate question id \"{}\"", record.id),
                    });
                } else {
                    seen.insert(record.id.clone());
                    records.push(record);
                }
            }
            Err(reason) => errors.push(LineError { line_no, reason }),
        }
    }
    Ok((records, errors))
}

/// Strict ingestion: the first bad line fails the whole read.
pub fn ingest_question_bank(path: &Path) -> Result<Vec<QuestionRecord>, DatasetError> {
    let (records, errors) = try_ingest_question_bank(path)?;
    if let Some(error) = errors.into_iter().next() {
        return Err(DatasetError::Line {
            path: path.display().to_string(),
            error,
        });
    }
    Ok(records)
}

/// Where a dataset record came from: model, template set, and the
/// fingerprints of the two completions behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub template_version: String,
    pub created_at: String,
    pub kg_fingerprint: String,
    pub subquery_fingerprint: String,
}

/// One dataset entry: the question, its graph (canonical form), and the
/// derived sub-queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub question: QuestionRecord,
    pub kg: KnowledgeGraph,
    pub subqueries: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JournalStatus {
    Generated,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub question_id: String,
    pub status: JournalStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kg_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subquery_fingerprint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildSummary {
    pub generated: usize,
    pub skipped: usize,
    pub failed: usize,
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub journal_path: PathBuf,
    pub out_path: PathBuf,
    /// Worker threads over questions.
    pub concurrency: usize,
    /// Fixed record timestamp; falls back to the provider's origin timestamp,
    /// then to the current time. Fixing it keeps reruns byte-identical.
    pub timestamp: Option<String>,
    pub pipeline: PipelineConfig,
}

impl BuildConfig {
    pub fn new(journal_path: &Path, out_path: &Path) -> Self {
        BuildConfig {
            journal_path: journal_path.to_path_buf(),
            out_path: out_path.to_path_buf(),
            concurrency: 1,
            timestamp: None,
            pipeline: PipelineConfig::default(),
        }
    }
}

const SCHEMA_HEADER: &str = "{\"schema_version\":1}";

fn load_journal(path: &Path) -> Result<Vec<JournalEntry>, DatasetError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: JournalEntry = serde_json::from_str(&line).map_err(|e| DatasetError::Line {
            path: path.display().to_string(),
            error: LineError {
                line_no: i + 1,
                reason: e.to_string(),
            },
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

fn load_records(path: &Path, skip_header: bool) -> Result<Vec<DatasetRecord>, DatasetError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() || (skip_header && i == 0) {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Line {
            path: path.display().to_string(),
            error: LineError {
                line_no: i + 1,
                reason: e.to_string(),
            },
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Append one JSON line and fsync, so a crash cannot lose acknowledged work.
fn append_line<T: Serialize>(file: &mut File, value: &T) -> std::io::Result<()> {
    writeln!(file, "{}", serde_json::to_string(value).expect("serialization cannot fail"))?;
    file.sync_data()
}

struct BuildIo {
    journal: File,
    partial: File,
}

/// Run one question through the KG and sub-query stages.
fn generate_record(
    question: &QuestionRecord,
    provider: &dyn CompletionProvider,
    config: &BuildConfig,
    created_at: &str,
) -> Result<DatasetRecord, String> {
    let kg_outcome = kg_stage_with_repair(&question.text, provider, &config.pipeline)
        .map_err(|e| e.to_string())?;
    let kg_stage = match kg_outcome {
        KgOutcome::Parsed(stage) => stage,
        KgOutcome::Unparseable(failure) => {
            return Err(format!("KG_UNPARSEABLE: {}", failure.last_error))
        }
    };
    // A graph with no nodes cannot guide decomposition; treat as failure.
    if kg_stage.graph.is_empty() {
        return Err("EMPTY_KG: knowledge graph has no nodes".to_string());
    }
    let sq_stage = subquery_stage(&question.text, Some(&kg_stage.graph), provider, &config.pipeline)
        .map_err(|e| e.to_string())?;
    if sq_stage.subqueries.is_empty() {
        return Err("EMPTY_SUBQUERIES: no sub-queries extracted".to_string());
    }
    Ok(DatasetRecord {
        question: question.clone(),
        kg: kg_stage.graph,
        subqueries: sq_stage.subqueries,
        provenance: Provenance {
            model: config.pipeline.model.clone(),
            template_version: config.pipeline.prompts.version().to_string(),
            created_at: created_at.to_string(),
            kg_fingerprint: kg_stage.fingerprint,
            subquery_fingerprint: sq_stage.fingerprint,
        },
    })
}

/// Build (or resume) the dataset for a question bank. Questions already
/// journaled as generated are skipped; failed ones are retried. Per-question
/// failures never abort the batch; I/O failures do.
pub fn build_dataset(
    bank: &[QuestionRecord],
    provider: &dyn CompletionProvider,
    config: &BuildConfig,
) -> Result<BuildSummary, DatasetError> {
    if bank.is_empty() {
        return Err(DatasetError::EmptyBank);
    }
    let created_at = config
        .timestamp
        .clone()
        .or_else(|| provider.origin_timestamp())
        .unwrap_or_else(|| {
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        });

    let done: BTreeSet<String> = load_journal(&config.journal_path)?
        .into_iter()
        .filter(|e| e.status == JournalStatus::Generated)
        .map(|e| e.question_id)
        .collect();

    // Records that survived earlier runs: the sorted output plus anything
    // staged before an interruption.
    let partial_path = config.out_path.with_extension("partial");
    let mut existing: BTreeMap<String, DatasetRecord> = BTreeMap::new();
    for record in load_records(&config.out_path, true)? {
        existing.insert(record.question.id.clone(), record);
    }
    for record in load_records(&partial_path, false)? {
        existing.insert(record.question.id.clone(), record);
    }

    let pending: Vec<&QuestionRecord> = bank.iter().filter(|q| !done.contains(&q.id)).collect();
    let skipped = bank.len() - pending.len();

    crate::provider::ensure_parent_dir(&config.journal_path).map_err(|e| io_err(&config.journal_path, e))?;
    crate::provider::ensure_parent_dir(&config.out_path).map_err(|e| io_err(&config.out_path, e))?;
    let journal = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&config.journal_path)
        .map_err(|e| io_err(&config.journal_path, e))?;
    let partial = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&partial_path)
        .map_err(|e| io_err(&partial_path, e))?;
    let io = Mutex::new(BuildIo { journal, partial });

    let generated = Mutex::new(Vec::<DatasetRecord>::new());
    let failed = Mutex::new(0usize);
    let io_failure = Mutex::new(None::<std::io::Error>);

    let process = |question: &QuestionRecord| {
        match generate_record(question, provider, config, &created_at) {
            Ok(record) => {
                let mut io = io.lock().unwrap();
                // Record data lands before the journal acknowledges it.
                let wrote = append_line(&mut io.partial, &record).and_then(|_| {
                    append_line(
                        &mut io.journal,
                        &JournalEntry {
                            question_id: question.id.clone(),
                            status: JournalStatus::Generated,
                            reason: None,
                            kg_fingerprint: Some(record.provenance.kg_fingerprint.clone()),
                            subquery_fingerprint: Some(
                                record.provenance.subquery_fingerprint.clone(),
                            ),
                        },
                    )
                });
                match wrote {
                    Ok(()) => generated.lock().unwrap().push(record),
                    Err(e) => *io_failure.lock().unwrap() = Some(e),
                }
            }
            Err(reason) => {
                let mut io = io.lock().unwrap();
                let wrote = append_line(
                    &mut io.journal,
                    &JournalEntry {
                        question_id: question.id.clone(),
                        status: JournalStatus::Failed,
                        reason: Some(reason),
                        kg_fingerprint: None,
                        subquery_fingerprint: None,
                    },
                );
                match wrote {
                    Ok(()) => *failed.lock().unwrap() += 1,
                    Err(e) => *io_failure.lock().unwrap() = Some(e),
                }
            }
        }
    };

    let workers = config.concurrency.max(1).min(pending.len().max(1));
    if workers <= 1 {
        for question in &pending {
            process(question);
            if io_failure.lock().unwrap().is_some() {
                break;
            }
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= pending.len() || io_failure.lock().unwrap().is_some() {
                        break;
                    }
                    process(pending[i]);
                });
            }
        });
    }

    if let Some(e) = io_failure.into_inner().unwrap() {
        return Err(io_err(&config.out_path, e));
    }

    let new_records = generated.into_inner().unwrap();
    let generated_count = new_records.len();
    for record in new_records {
        existing.insert(record.question.id.clone(), record);
    }

    // Sort-merge into the final file, atomically.
    let tmp_path = config.out_path.with_extension("tmp");
    {
        let mut tmp = File::create(&tmp_path).map_err(|e| io_err(&tmp_path, e))?;
        writeln!(tmp, "{SCHEMA_HEADER}").map_err(|e| io_err(&tmp_path, e))?;
        for record in existing.values() {
            writeln!(
                tmp,
                "{}",
                serde_json::to_string(record).expect("serialization cannot fail")
            )
            .map_err(|e| io_err(&tmp_path, e))?;
        }
        tmp.sync_all().map_err(|e| io_err(&tmp_path, e))?;
    }
    std::fs::rename(&tmp_path, &config.out_path).map_err(|e| io_err(&config.out_path, e))?;
    std::fs::remove_file(&partial_path).map_err(|e| io_err(&partial_path, e))?;

    Ok(BuildSummary {
        generated: generated_count,
        skipped,
        failed: failed.into_inner().unwrap(),
    })
}

/// Read a finished dataset file (schema header plus records).
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    load_records(path, true)
}

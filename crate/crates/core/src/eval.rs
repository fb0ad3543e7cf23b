//! Grading and report aggregation: per-question verdicts, success-rate
//! tables by method and category, and survey rating means.
//!
//! Numeric answers grade against a relative/absolute tolerance band with
//! canonical unit comparison (no dimensional algebra). Choice answers grade
//! by letter-set equality. Free-text golds go to an external judge command
//! when configured, otherwise exact match decides "correct" and everything
//! else queues for manual grading.

use crate::dataset::{Category, GoldAnswer, QuestionRecord};
use crate::extract::canonicalize_unit;
use crate::pipeline::{Method, ReasoningTrace};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Csv {
        path: String,
        line: usize,
        message: String,
    },
    #[error("no category known for question {0}")]
    MissingCategory(String),
    #[error("judge command failed: {0}")]
    Judge(String),
    #[error("cannot parse table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
    Ungradable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Verdict::Correct => "correct",
            Verdict::Incorrect => "incorrect",
            Verdict::Ungradable => "ungradable",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraderKind {
    Numeric,
    Choice,
    TextExact,
    Judge,
    Manual,
}

/// Per-question grading outcome; these are the rows of the outcomes file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedOutcome {
    pub question_id: String,
    pub method: Method,
    pub verdict: Verdict,
    pub grader: GraderKind,
    pub detail: String,
}

/// External judge: a command that receives `{question, gold, prediction}` as
/// JSON on stdin and prints a verdict token (`correct` / `incorrect` /
/// `ungradable`). No judging logic ships in this crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum JudgePolicy {
    None,
    Command { argv: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeSpec {
    pub numeric_rel_tol: f64,
    pub numeric_abs_tol: f64,
    pub ignore_units: bool,
    pub judge: JudgePolicy,
}

impl Default for GradeSpec {
    fn default() -> Self {
        GradeSpec {
            numeric_rel_tol: 0.005,
            numeric_abs_tol: 1e-9,
            ignore_units: false,
            judge: JudgePolicy::None,
        }
    }
}

fn run_judge(argv: &[String], question: &str, gold: &str, prediction: &str) -> Result<Verdict, EvalError> {
    let program = argv.first().ok_or_else(|| EvalError::Judge("empty judge command".into()))?;
    let payload = serde_json::json!({
        "question": question,
        "gold": gold,
        "prediction": prediction,
    });
    let mut child = std::process::Command::new(program)
        .args(&argv[1..])
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .map_err(|e| EvalError::Judge(format!("spawn {program}: {e}")))?;
    child
        .stdin
        .take()
        .expect("stdin is piped")
        .write_all(payload.to_string().as_bytes())
        .map_err(|e| EvalError::Judge(e.to_string()))?;
    let output = child
        .wait_with_output()
        .map_err(|e| EvalError::Judge(e.to_string()))?;
    let token = String::from_utf8_lossy(&output.stdout);
    match token.trim() {
        "correct" => Ok(Verdict::Correct),
        "incorrect" => Ok(Verdict::Incorrect),
        "ungradable" => Ok(Verdict::Ungradable),
        other => Err(EvalError::Judge(format!("unrecognized verdict \"{other}\""))),
    }
}

fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .trim_end_matches(['.', '!'])
        .to_string()
}

/// Grade one trace against the question's gold answer. Questions without a
/// gold answer are ungradable by definition.
pub fn grade(trace: &ReasoningTrace, question: &QuestionRecord, spec: &GradeSpec) -> GradedOutcome {
    let outcome = |verdict, grader, detail: String| GradedOutcome {
        question_id: trace.question_id.clone(),
        method: trace.method,
        verdict,
        grader,
        detail,
    };
    let Some(gold) = &question.gold_answer else {
        return outcome(
            Verdict::Ungradable,
            GraderKind::Manual,
            "no gold answer on record".into(),
        );
    };
    match gold {
        GoldAnswer::Quantity { value, unit } => {
            let Some(pred) = &trace.final_quantity else {
                return outcome(
                    Verdict::Ungradable,
                    GraderKind::Numeric,
                    "no numeric prediction extracted".into(),
                );
            };
            let gold_unit = canonicalize_unit(unit);
            if !spec.ignore_units && !gold_unit.is_empty() && pred.unit != gold_unit {
                return outcome(
                    Verdict::Incorrect,
                    GraderKind::Numeric,
                    format!("UNIT_MISMATCH: predicted \"{}\" vs gold \"{gold_unit}\"", pred.unit),
                );
            }
            let tolerance = spec.numeric_abs_tol.max(spec.numeric_rel_tol * value.abs());
            let diff = (pred.value - value).abs();
            if diff <= tolerance {
                outcome(
                    Verdict::Correct,
                    GraderKind::Numeric,
                    format!("|{} - {}| = {diff:.6} <= {tolerance:.6}", pred.value, value),
                )
            } else {
                outcome(
                    Verdict::Incorrect,
                    GraderKind::Numeric,
                    format!("|{} - {}| = {diff:.6} > {tolerance:.6}", pred.value, value),
                )
            }
        }
        GoldAnswer::Choice { choice } => {
            let Some(gold_choice) = gold.as_choice() else {
                return outcome(
                    Verdict::Ungradable,
                    GraderKind::Choice,
                    format!("gold choice token \"{choice}\" is not parseable"),
                );
            };
            let Some(pred) = &trace.final_choice else {
                return outcome(
                    Verdict::Ungradable,
                    GraderKind::Choice,
                    "no choice prediction extracted".into(),
                );
            };
            if pred.letters == gold_choice.letters {
                outcome(Verdict::Correct, GraderKind::Choice, format!("{pred} == {gold_choice}"))
            } else {
                outcome(
                    Verdict::Incorrect,
                    GraderKind::Choice,
                    format!("{pred} != {gold_choice}"),
                )
            }
        }
        GoldAnswer::Text { text } => match &spec.judge {
            JudgePolicy::Command { argv } => {
                match run_judge(argv, &question.text, text, &trace.final_text) {
                    Ok(verdict) => outcome(verdict, GraderKind::Judge, "external judge".into()),
                    Err(e) => outcome(Verdict::Ungradable, GraderKind::Judge, e.to_string()),
                }
            }
            JudgePolicy::None => {
                if normalize_text(&trace.final_text) == normalize_text(text) {
                    outcome(Verdict::Correct, GraderKind::TextExact, "exact match".into())
                } else {
                    outcome(
                        Verdict::Ungradable,
                        GraderKind::Manual,
                        "queued for manual grading".into(),
                    )
                }
            }
        },
    }
}

// ---------------------------------------------------------------------------
// Tables and reports
// ---------------------------------------------------------------------------

/// A rectangular report: header row plus string cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub const EMPTY_CELL: &str = "—";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format \"{other}\"")),
        }
    }
}

/// Success rate per (method, category): `100 · correct / (correct +
/// incorrect)` to two decimals, with ungradable outcomes excluded from the
/// denominator. Cells with no graded outcomes render as `—`.
pub fn success_table(
    outcomes: &[GradedOutcome],
    categories: &BTreeMap<String, Category>,
) -> Result<Table, EvalError> {
    let mut correct: BTreeMap<(Method, Category), usize> = BTreeMap::new();
    let mut graded: BTreeMap<(Method, Category), usize> = BTreeMap::new();
    for outcome in outcomes {
        let category = *categories
            .get(&outcome.question_id)
            .ok_or_else(|| EvalError::MissingCategory(outcome.question_id.clone()))?;
        let key = (outcome.method, category);
        match outcome.verdict {
            Verdict::Correct => {
                *graded.entry(key).or_default() += 1;
                *correct.entry(key).or_default() += 1;
            }
            Verdict::Incorrect => {
                *graded.entry(key).or_default() += 1;
            }
            Verdict::Ungradable => {}
        }
    }
    let mut rows = Vec::new();
    for method in Method::all() {
        let mut row = vec![method.label().to_string()];
        for category in [Category::Numerical, Category::Conceptual] {
            let key = (method, category);
            let cell = match graded.get(&key) {
                Some(&total) if total > 0 => {
                    let rate =
                        100.0 * *correct.get(&key).unwrap_or(&0) as f64 / total as f64;
                    format!("{rate:.2}")
                }
                _ => EMPTY_CELL.to_string(),
            };
            row.push(cell);
        }
        rows.push(row);
    }
    Ok(Table {
        headers: vec![
            "Method".to_string(),
            Category::Numerical.label().to_string(),
            Category::Conceptual.label().to_string(),
        ],
        rows,
    })
}

/// Ungradable counts per (method, category), reported apart from the success
/// table so the table keeps its shape.
pub fn ungradable_counts(
    outcomes: &[GradedOutcome],
    categories: &BTreeMap<String, Category>,
) -> Result<BTreeMap<(Method, Category), usize>, EvalError> {
    let mut counts = BTreeMap::new();
    for outcome in outcomes {
        let category = *categories
            .get(&outcome.question_id)
            .ok_or_else(|| EvalError::MissingCategory(outcome.question_id.clone()))?;
        if outcome.verdict == Verdict::Ungradable {
            *counts.entry((outcome.method, category)).or_default() += 1;
        }
    }
    Ok(counts)
}

// ---------------------------------------------------------------------------
// Survey aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub participant_id: String,
    /// Which of the three question sets was rated.
    pub question_set: u8,
    pub method: Method,
    /// 1 (weak) to 5 (strong).
    pub rating: u8,
}

/// Parse the survey CSV (`participant_id,question_set,method,rating`),
/// validating ranges and naming the offending line on failure.
pub fn read_survey_csv(path: &Path) -> Result<Vec<SurveyResponse>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_survey_csv(&text).map_err(|(line, message)| EvalError::Csv {
        path: path.display().to_string(),
        line,
        message,
    })
}

pub fn parse_survey_csv(text: &str) -> Result<Vec<SurveyResponse>, (usize, String)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    {
        let headers = reader.headers().map_err(|e| (1, e.to_string()))?;
        let expected = ["participant_id", "question_set", "method", "rating"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err((1, format!("expected header {expected:?}, got {headers:?}")));
        }
    }
    let mut responses = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| (line, e.to_string()))?;
        if row.len() != 4 {
            return Err((line, format!("expected 4 fields, got {}", row.len())));
        }
        let question_set: u8 = row[1]
            .trim()
            .parse()
            .map_err(|_| (line, format!("bad question_set \"{}\"", &row[1])))?;
        if !(1..=3).contains(&question_set) {
            return Err((line, format!("question_set {question_set} outside 1..3")));
        }
        let method: Method = row[2]
            .trim()
            .parse()
            .map_err(|e: String| (line, e))?;
        let rating: u8 = row[3]
            .trim()
            .parse()
            .map_err(|_| (line, format!("bad rating \"{}\"", &row[3])))?;
        if !(1..=5).contains(&rating) {
            return Err((line, format!("rating {rating} outside 1..5")));
        }
        responses.push(SurveyResponse {
            participant_id: row[0].to_string(),
            question_set,
            method,
            rating,
        });
    }
    Ok(responses)
}

/// How survey means are grouped into columns.
#[derive(Debug, Clone)]
pub enum SurveyGroupBy {
    /// One column per question set.
    Set,
    /// Two columns (numerical/conceptual) via a set-to-category mapping.
    Category(BTreeMap<u8, Category>),
}

impl SurveyGroupBy {
    /// Default mapping: sets 1 and 2 are numerical, set 3 conceptual.
    pub fn default_categories() -> Self {
        SurveyGroupBy::Category(BTreeMap::from([
            (1, Category::Numerical),
            (2, Category::Numerical),
            (3, Category::Conceptual),
        ]))
    }
}

/// Mean rating per method and group, one decimal, `—` where a group has no
/// responses.
pub fn survey_means(responses: &[SurveyResponse], group_by: &SurveyGroupBy) -> Table {
    let column_of = |set: u8| -> Option<usize> {
        match group_by {
            SurveyGroupBy::Set => Some(set as usize - 1),
            SurveyGroupBy::Category(mapping) => mapping.get(&set).map(|c| match c {
                Category::Numerical => 0,
                Category::Conceptual => 1,
            }),
        }
    };
    let headers: Vec<String> = match group_by {
        SurveyGroupBy::Set => vec![
            "Method".to_string(),
            "Set 1".to_string(),
            "Set 2".to_string(),
            "Set 3".to_string(),
        ],
        SurveyGroupBy::Category(_) => vec![
            "Method".to_string(),
            Category::Numerical.label().to_string(),
            Category::Conceptual.label().to_string(),
        ],
    };
    let column_count = headers.len() - 1;
    let mut rows = Vec::new();
    for method in Method::all() {
        let mut sums = vec![0u64; column_count];
        let mut counts = vec![0u64; column_count];
        for response in responses.iter().filter(|r| r.method == method) {
            if let Some(column) = column_of(response.question_set) {
                sums[column] += response.rating as u64;
                counts[column] += 1;
            }
        }
        let mut row = vec![method.label().to_string()];
        for (sum, count) in sums.iter().zip(&counts) {
            row.push(if *count == 0 {
                EMPTY_CELL.to_string()
            } else {
                format!("{:.1}", *sum as f64 / *count as f64)
            });
        }
        rows.push(row);
    }
    Table { headers, rows }
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

/// Deterministic text for a table. Markdown keeps the fixed method row order;
/// CSV round-trips through [`parse_csv_table`].
pub fn emit_report(table: &Table, format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!("| {} |\n", table.headers.join(" | ")));
            out.push_str(&format!(
                "|{}\n",
                " --- |".repeat(table.headers.len())
            ));
            for row in &table.rows {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            out
        }
        ReportFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer.write_record(&table.headers).expect("in-memory write");
            for row in &table.rows {
                writer.write_record(row).expect("in-memory write");
            }
            String::from_utf8(writer.into_inner().expect("in-memory flush"))
                .expect("csv output is UTF-8")
        }
    }
}

/// Inverse of CSV emission.
pub fn parse_csv_table(text: &str) -> Result<Table, EvalError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| EvalError::Table(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| EvalError::Table(e.to_string()))?;
        rows.push(row.iter().map(str::to_string).collect());
    }
    Ok(Table { headers, rows })
}

/// Write graded outcomes as JSON Lines.
pub fn write_outcomes(path: &Path, outcomes: &[GradedOutcome]) -> Result<(), EvalError> {
    let mut text = String::new();
    for outcome in outcomes {
        text.push_str(&serde_json::to_string(outcome).expect("serialization cannot fail"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

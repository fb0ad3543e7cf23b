//! Python bindings for the question-decomposition pipeline.
//!
//! Exposes the graph model, completion extractors, prompt renderers, numeric
//! grading, and a scripted end-to-end runner. Build with
//! `cargo build -p kgqd-py`, then import the produced `libkgqd_py.so` as
//! `kgqd_py` (see `python/smoke_test.py`).

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use kgqd_core::dataset::{Category, GoldAnswer, QuestionRecord};
use kgqd_core::eval::{self, GradeSpec, JudgePolicy};
use kgqd_core::extract;
use kgqd_core::kg;
use kgqd_core::pipeline::{self, Method, PipelineConfig};
use kgqd_core::prompt::PromptLibrary;
use kgqd_core::provider::ScriptedProvider;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A parsed knowledge graph in canonical form.
#[pyclass(name = "KnowledgeGraph", from_py_object)]
#[derive(Clone)]
struct PyKnowledgeGraph {
    inner: kg::KnowledgeGraph,
}

#[pymethods]
impl PyKnowledgeGraph {
    fn node_count(&self) -> usize {
        self.inner.nodes.len()
    }

    fn edge_count(&self) -> usize {
        self.inner.edges.len()
    }

    fn node_ids(&self) -> Vec<String> {
        self.inner.nodes.iter().map(|n| n.id.clone()).collect()
    }

    fn edge_labels(&self) -> Vec<String> {
        self.inner.edges.iter().map(|e| e.label.clone()).collect()
    }

    /// Properties of one node as (key, value) pairs in insertion order.
    fn node_properties(&self, id: &str) -> PyResult<Vec<(String, String)>> {
        let node = self
            .inner
            .node(id)
            .ok_or_else(|| PyValueError::new_err(format!("no node with id {id:?}")))?;
        Ok(node
            .properties
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }

    /// Canonical list-form JSON text.
    fn serialize(&self) -> PyResult<String> {
        kg::serialize_graph(&self.inner).map_err(value_err)
    }

    /// (valid, issue strings).
    fn validate(&self) -> (bool, Vec<String>) {
        let report = kg::validate(&self.inner);
        let issues = report
            .issues
            .iter()
            .map(|i| format!("{} at {}: {}", i.code, i.path, i.message))
            .collect();
        (report.valid, issues)
    }

    /// One (id, property_count, degree) tuple per node, in node order.
    fn entity_summary(&self) -> Vec<(String, usize, usize)> {
        kg::entity_summary(&self.inner)
            .into_iter()
            .map(|s| (s.id, s.property_count, s.degree))
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "KnowledgeGraph(nodes={}, edges={})",
            self.inner.nodes.len(),
            self.inner.edges.len()
        )
    }

    fn __eq__(&self, other: &PyKnowledgeGraph) -> bool {
        self.inner == other.inner
    }
}

/// Parse knowledge-graph JSON (either dialect) into canonical form.
#[pyfunction]
fn parse_graph(json_text: &str) -> PyResult<PyKnowledgeGraph> {
    kg::parse_graph(json_text)
        .map(|inner| PyKnowledgeGraph { inner })
        .map_err(value_err)
}

/// First candidate JSON object embedded in a completion.
#[pyfunction]
fn extract_json_block(text: &str) -> PyResult<String> {
    extract::extract_json_block(text)
        .map(str::to_string)
        .map_err(value_err)
}

#[pyfunction]
fn extract_subqueries(text: &str) -> Vec<String> {
    extract::extract_subqueries(text)
}

/// Concluding numeric quantity as (value, canonical_unit).
#[pyfunction]
fn extract_numeric_answer(text: &str) -> PyResult<(f64, String)> {
    extract::extract_numeric_answer(text)
        .map(|q| (q.value, q.unit))
        .map_err(value_err)
}

/// Answer letters found in a completion, sorted.
#[pyfunction]
fn extract_choice_answer(text: &str) -> PyResult<Vec<String>> {
    extract::extract_choice_answer(text)
        .map(|c| c.letters.iter().map(|l| l.to_string()).collect())
        .map_err(value_err)
}

#[pyfunction]
fn canonicalize_unit(unit: &str) -> String {
    extract::canonicalize_unit(unit)
}

/// Content hash of the built-in prompt templates.
#[pyfunction]
fn template_version() -> String {
    PromptLibrary::builtin().version().to_string()
}

#[pyfunction]
fn render_kg_prompt(question: &str) -> PyResult<String> {
    PromptLibrary::builtin()
        .render_kg_prompt(question)
        .map_err(value_err)
}

#[pyfunction]
fn render_subquery_prompt(question: &str, graph: &PyKnowledgeGraph) -> PyResult<String> {
    PromptLibrary::builtin()
        .render_subquery_prompt(question, &graph.inner)
        .map_err(value_err)
}

#[pyfunction]
fn render_standard_prompt(question: &str) -> PyResult<String> {
    PromptLibrary::builtin()
        .render_standard_prompt(question)
        .map_err(value_err)
}

#[pyfunction]
fn render_synthesis_prompt(question: &str, facts: Vec<(String, String)>) -> PyResult<String> {
    PromptLibrary::builtin()
        .render_synthesis_prompt(question, &facts)
        .map_err(value_err)
}

/// Grade a predicted quantity against a gold quantity; returns "correct",
/// "incorrect", or "ungradable".
#[pyfunction]
#[pyo3(signature = (pred_value, pred_unit, gold_value, gold_unit, rel_tol=0.005, abs_tol=1e-9, ignore_units=false))]
#[allow(clippy::too_many_arguments)]
fn grade_numeric(
    pred_value: f64,
    pred_unit: &str,
    gold_value: f64,
    gold_unit: &str,
    rel_tol: f64,
    abs_tol: f64,
    ignore_units: bool,
) -> PyResult<String> {
    let trace: pipeline::ReasoningTrace = serde_json::from_value(serde_json::json!({
        "question_id": "py",
        "method": "standard",
        "template_version": "py",
        "stages": [],
        "final_text": "",
        "final_quantity": {"value": pred_value, "unit": extract::canonicalize_unit(pred_unit)},
    }))
    .map_err(value_err)?;
    let question = QuestionRecord {
        id: "py".into(),
        text: "py".into(),
        category: Category::Numerical,
        topic: "general".into(),
        gold_answer: Some(GoldAnswer::Quantity {
            value: gold_value,
            unit: gold_unit.to_string(),
        }),
    };
    let spec = GradeSpec {
        numeric_rel_tol: rel_tol,
        numeric_abs_tol: abs_tol,
        ignore_units,
        judge: JudgePolicy::None,
    };
    Ok(eval::grade(&trace, &question, &spec).verdict.to_string())
}

/// Run one question through a method against scripted completions; returns
/// the reasoning trace as a JSON string. `category` is "numerical" or
/// "conceptual"; `method` is "standard", "decomp", or "decomp-kg".
#[pyfunction]
#[pyo3(signature = (question_text, question_id, category, method, responses, topic="general"))]
fn run_scripted(
    question_text: &str,
    question_id: &str,
    category: &str,
    method: &str,
    responses: Vec<String>,
    topic: &str,
) -> PyResult<String> {
    let category = match category {
        "numerical" => Category::Numerical,
        "conceptual" => Category::Conceptual,
        other => {
            return Err(PyValueError::new_err(format!(
                "category must be numerical or conceptual, got {other:?}"
            )))
        }
    };
    let method: Method = method.parse().map_err(value_err)?;
    let question = QuestionRecord {
        id: question_id.to_string(),
        text: question_text.to_string(),
        category,
        topic: topic.to_string(),
        gold_answer: None,
    };
    let provider = ScriptedProvider::new();
    for response in &responses {
        provider.push_text(response);
    }
    let config = PipelineConfig::default();
    let trace = pipeline::run_method(&question, method, &provider, &config)
        .map_err(|e| value_err(format!("pipeline failed: {e}")))?;
    serde_json::to_string_pretty(&trace).map_err(value_err)
}

#[pymodule]
fn kgqd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyKnowledgeGraph>()?;
    m.add_function(wrap_pyfunction!(parse_graph, m)?)?;
    m.add_function(wrap_pyfunction!(extract_json_block, m)?)?;
    m.add_function(wrap_pyfunction!(extract_subqueries, m)?)?;
    m.add_function(wrap_pyfunction!(extract_numeric_answer, m)?)?;
    m.add_function(wrap_pyfunction!(extract_choice_answer, m)?)?;
    m.add_function(wrap_pyfunction!(canonicalize_unit, m)?)?;
    m.add_function(wrap_pyfunction!(template_version, m)?)?;
    m.add_function(wrap_pyfunction!(render_kg_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_subquery_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_standard_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(render_synthesis_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(grade_numeric, m)?)?;
    m.add_function(wrap_pyfunction!(run_scripted, m)?)?;
    Ok(())
}

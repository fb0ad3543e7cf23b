//! Acceptance suite: every criterion the artifact must satisfy, fully
//! offline. Each test prints one pass line; timing bounds are asserted where
//! the criterion states them.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use kgqd_core::dataset::{
    self, BuildConfig, BuildSummary, Category, GoldAnswer, QuestionRecord,
};
use kgqd_core::eval::{self, GradeSpec, SurveyGroupBy, Verdict};
use kgqd_core::extract;
use kgqd_core::kg::{self, Edge, KnowledgeGraph, Node};
use kgqd_core::pipeline::{self, Method, PipelineConfig, ReasoningTrace};
use kgqd_core::provider::{
    with_retries_using, ChatRequest, CountingProvider, ProviderError, RecordProvider,
    ReplayProvider, RetryPolicy, ScriptedProvider,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOOTH_KG: &str = include_str!("../testdata/tooth_cavity_kg.json");
const TOOTH_QUESTION: &str = include_str!("../testdata/tooth_cavity_question.txt");
const TOOTH_SUBQUERIES: &str = include_str!("../testdata/tooth_cavity_subqueries.txt");
const RAMESH_KG: &str = include_str!("../testdata/ramesh_kg.json");
const RAMESH_QUESTION: &str = include_str!("../testdata/ramesh_question.txt");
const RAMESH_FULL_COMPLETION: &str = include_str!("../testdata/ramesh_decomp_kg_completion.txt");
const RAMESH_STANDARD: &str = include_str!("../testdata/ramesh_standard_completion.txt");
const RAMESH_NOKG_SUBQUERIES: &str = include_str!("../testdata/ramesh_nokg_subqueries.txt");
const RAMESH_NOKG_FINAL: &str = include_str!("../testdata/ramesh_nokg_final.txt");
const RAMESH_KG_SUBQUERIES: &str = include_str!("../testdata/ramesh_kg_subqueries_stage.txt");
const RAMESH_KG_FINAL: &str = include_str!("../testdata/ramesh_kg_final_stage.txt");
const SURVEY_CSV: &str = include_str!("../testdata/survey_fixture.csv");

const TOOTH_FINAL: &str =
    "The stress developed inside the tooth cavity filled with copper is approximately 438,344 N/m^2.";

fn pass(name: &str) {
    println!("[PASS] {name}");
}

#[test]
fn acceptance_kg_dialect_fixtures() {
    let started = Instant::now();

    let tooth = kg::parse_graph(TOOTH_KG).unwrap();
    assert_eq!(tooth.nodes.len(), 2);
    assert_eq!(tooth.edges.len(), 1);
    assert_eq!(tooth.edges[0].label, "has_bulk_modulus");

    let ramesh = kg::parse_graph(RAMESH_KG).unwrap();
    assert_eq!(ramesh.nodes.len(), 5);
    assert_eq!(ramesh.edges.len(), 3);
    let labels: Vec<&str> = ramesh.edges.iter().map(|e| e.label.as_str()).collect();
    assert_eq!(labels, ["fills", "intended_to_fill", "needs_attention"]);

    assert!(started.elapsed() < Duration::from_secs(1));
    pass("KG dialect fixtures: 2 nodes/1 edge and 5 nodes/3 edges, exact labels");
}

fn random_graph(rng: &mut ChaCha8Rng) -> KnowledgeGraph {
    let node_count = rng.random_range(0..=8usize);
    let nodes: Vec<Node> = (0..node_count)
        .map(|i| {
            let mut node = Node::new(format!("node_{i}"));
            for j in 0..rng.random_range(0..4usize) {
                let len = rng.random_range(0..20usize);
                let value: String = (0..len)
                    .map(|_| {
                        let choices = [
                            'a', 'z', '0', '9', ' ', '"', '\\', '°', '×', '{', '}', '/', '^',
                        ];
                        choices[rng.random_range(0..choices.len())]
                    })
                    .collect();
                node.properties.insert(format!("key_{j}"), value);
            }
            node
        })
        .collect();
    let edges = if nodes.is_empty() {
        Vec::new()
    } else {
        (0..rng.random_range(0..=8usize))
            .map(|_| {
                Edge::new(
                    nodes[rng.random_range(0..nodes.len())].id.clone(),
                    nodes[rng.random_range(0..nodes.len())].id.clone(),
                    format!("rel_{}", rng.random_range(0..26u8)),
                )
            })
            .collect()
    };
    KnowledgeGraph { nodes, edges }
}

#[test]
fn acceptance_round_trip_property() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let graph = random_graph(&mut rng);
        let text = kg::serialize_graph(&graph).unwrap();
        assert_eq!(kg::parse_graph(&text).unwrap(), graph);
        assert_eq!(kg::serialize_graph(&graph).unwrap(), text);
    }
    assert!(started.elapsed() < Duration::from_secs(10));
    pass("round-trip property: 1000 random graphs, byte-deterministic serialization");
}

fn quantity_trace(value: f64, unit: &str) -> ReasoningTrace {
    serde_json::from_value(serde_json::json!({
        "question_id": "oracle",
        "method": "standard",
        "template_version": "v",
        "stages": [],
        "final_text": "",
        "final_quantity": {"value": value, "unit": unit}
    }))
    .unwrap()
}

#[test]
fn acceptance_appendix_arithmetic_oracle() {
    let started = Instant::now();

    // Brute-force recomputation of the three-step worked solution.
    let delta_t: f64 = 37.0 - 26.65;
    let strain: f64 = 6.74e-6 * delta_t;
    let stress: f64 = strain * 6.28e9;
    assert!((delta_t - 10.35).abs() < 1e-9);
    assert!((strain - 6.9759e-5).abs() < 1e-12);
    assert!((stress - 438_086.1).abs() < 0.5);

    let question = QuestionRecord {
        id: "oracle".into(),
        text: "oracle".into(),
        category: Category::Numerical,
        topic: "thermodynamics".into(),
        gold_answer: Some(GoldAnswer::Quantity {
            value: stress,
            unit: "N/m^2".into(),
        }),
    };
    let rounded_answer = quantity_trace(438_344.0, "N/m^2");

    let loose = GradeSpec {
        numeric_rel_tol: 0.005,
        ..GradeSpec::default()
    };
    assert_eq!(
        eval::grade(&rounded_answer, &question, &loose).verdict,
        Verdict::Correct
    );

    let tight = GradeSpec {
        numeric_rel_tol: 0.0001,
        ..GradeSpec::default()
    };
    assert_eq!(
        eval::grade(&rounded_answer, &question, &tight).verdict,
        Verdict::Incorrect
    );

    assert!(started.elapsed() < Duration::from_secs(1));
    pass("appendix arithmetic oracle: ΔT/strain/stress recomputed, tolerance verdicts exact");
}

#[test]
fn acceptance_extraction_suite() {
    let started = Instant::now();

    let quantity = extract::extract_numeric_answer("438,344 N/m^2").unwrap();
    assert_eq!(quantity.value, 438_344.0);
    assert_eq!(quantity.unit, "N/m^2");

    let strain = extract::extract_numeric_answer("6.98 × 10^{-5}").unwrap();
    assert!((strain.value - 6.98e-5).abs() < 1e-12);
    assert_eq!(strain.unit, "");

    let subqueries = extract::extract_subqueries(TOOTH_SUBQUERIES);
    assert_eq!(
        subqueries,
        vec![
            "Calculate the change in temperature of the tooth cavity.",
            "Calculate the strain experienced by the tooth cavity.",
            "Calculate the stress generated within the tooth cavity.",
        ]
    );

    let span = extract::extract_json_block(RAMESH_FULL_COMPLETION).unwrap();
    assert!(span.starts_with('{') && span.ends_with('}'));
    assert_eq!(
        kg::parse_graph(span).unwrap(),
        kg::parse_graph(RAMESH_KG).unwrap()
    );

    assert!(started.elapsed() < Duration::from_secs(1));
    pass("extraction suite: quantity, typeset power, sub-query block, embedded KG JSON");
}

fn fixture_bank() -> Vec<QuestionRecord> {
    vec![
        QuestionRecord {
            id: "phys-001".into(),
            text: TOOTH_QUESTION.trim().into(),
            category: Category::Numerical,
            topic: "thermodynamics".into(),
            gold_answer: Some(GoldAnswer::Quantity {
                value: 438_344.0,
                unit: "N/m^2".into(),
            }),
        },
        QuestionRecord {
            id: "phys-002".into(),
            text: RAMESH_QUESTION.trim().into(),
            category: Category::Conceptual,
            topic: "thermodynamics".into(),
            gold_answer: Some(GoldAnswer::Choice { choice: "1".into() }),
        },
    ]
}

const TOOTH_ANSWERS: [&str; 3] = [
    "Change in Temperature: ΔT = T_final − T_initial = 37 − 26.65 = 10.35 °C",
    "Strain: α · ΔT = 6.74 × 10^{-6} °C^{-1} × 10.35 °C = 6.98 × 10^{-5}",
    "Stress: Strain × Bulk Modulus = 6.98 × 10^{-5} × 6.28 × 10^{9} N/m^2 = 438,344 N/m^2",
];

const RAMESH_NOKG_ANSWERS: [&str; 2] = [
    "Mixing immediately lowers the temperature at once, but the lukewarm mixture has a smaller temperature difference with the surroundings, so it loses heat more slowly during the wait.",
    "Hot water left alone stays far above room temperature, so the large temperature difference drives faster heat loss during the 5-10 minutes before mixing.",
];

const RAMESH_KG_ANSWERS: [&str; 2] = [
    "The hot water cools quickly while it sits alone because the rate of heat loss grows with the temperature difference between the water and the surroundings.",
    "Adding the cold water immediately brings the mixture to a lower temperature right away, which reduces the temperature difference and slows further heat loss over the delay.",
];

/// Queue the scripted responses in exact call order for all three methods
/// over the two-question bank. Stages whose prompts repeat across methods
/// (the tooth-cavity answer and synthesis stages) are served from the
/// recorder's cassette cache, so they are queued only once.
fn scripted_full_run() -> ScriptedProvider {
    let provider = ScriptedProvider::new();
    // phys-001, standard.
    provider.push_text(TOOTH_FINAL);
    // phys-001, decomposition without KG.
    provider.push_text(TOOTH_SUBQUERIES);
    for answer in TOOTH_ANSWERS {
        provider.push_text(answer);
    }
    provider.push_text(TOOTH_FINAL);
    // phys-001, decomposition with KG (answers and synthesis are cache hits).
    provider.push_text(TOOTH_KG);
    provider.push_text(TOOTH_SUBQUERIES);
    // phys-002, standard.
    provider.push_text(RAMESH_STANDARD);
    // phys-002, decomposition without KG.
    provider.push_text(RAMESH_NOKG_SUBQUERIES);
    for answer in RAMESH_NOKG_ANSWERS {
        provider.push_text(answer);
    }
    provider.push_text(RAMESH_NOKG_FINAL);
    // phys-002, decomposition with KG.
    provider.push_text(&format!("Knowledge Graph in JSON Format:\n\n{RAMESH_KG}"));
    provider.push_text(RAMESH_KG_SUBQUERIES);
    for answer in RAMESH_KG_ANSWERS {
        provider.push_text(answer);
    }
    provider.push_text(RAMESH_KG_FINAL);
    provider
}

fn record_fixture_cassette(path: &Path) {
    let scripted = scripted_full_run();
    let recorder = RecordProvider::open(path, scripted).unwrap();
    let config = PipelineConfig::default();
    for question in &fixture_bank() {
        for method in Method::all() {
            pipeline::run_method(question, method, &recorder, &config).unwrap();
        }
    }
}

#[test]
fn acceptance_end_to_end_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cassette_path = dir.path().join("cassette.jsonl");
    record_fixture_cassette(&cassette_path);

    let config = PipelineConfig::default();
    let bank = fixture_bank();
    let expected_subqueries: BTreeMap<(&str, Method), u32> = BTreeMap::from([
        (("phys-001", Method::DecompNoKg), 3),
        (("phys-001", Method::DecompWithKg), 3),
        (("phys-002", Method::DecompNoKg), 2),
        (("phys-002", Method::DecompWithKg), 2),
    ]);

    for run_id in ["run-a", "run-b"] {
        let replay = ReplayProvider::open(&cassette_path).unwrap();
        for question in &bank {
            for method in Method::all() {
                let counter = CountingProvider::new(&replay);
                let trace =
                    pipeline::run_method(question, method, &counter, &config).unwrap();
                let expected_calls = match method {
                    Method::Standard => 1,
                    Method::DecompNoKg => {
                        2 + expected_subqueries[&(question.id.as_str(), method)]
                    }
                    Method::DecompWithKg => {
                        3 + expected_subqueries[&(question.id.as_str(), method)]
                    }
                };
                assert_eq!(counter.calls(), expected_calls as u64);
                assert_eq!(trace.provider_calls(), expected_calls);
                pipeline::persist_trace(dir.path(), run_id, &trace).unwrap();
            }
        }
    }

    for question in &bank {
        for method in Method::all() {
            let a = pipeline::trace_path(dir.path(), "run-a", &question.id, method);
            let b = pipeline::trace_path(dir.path(), "run-b", &question.id, method);
            assert_eq!(
                std::fs::read(&a).unwrap(),
                std::fs::read(&b).unwrap(),
                "trace bytes differ for {}/{}",
                question.id,
                method
            );
        }
    }

    assert!(started.elapsed() < Duration::from_secs(5));
    pass("end-to-end determinism: byte-identical traces, call counts 1 / 2+n / 3+n");
}

#[test]
fn acceptance_ramesh_behavioral_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cassette_path = dir.path().join("cassette.jsonl");
    record_fixture_cassette(&cassette_path);

    let replay = ReplayProvider::open(&cassette_path).unwrap();
    let config = PipelineConfig::default();
    let spec = GradeSpec::default();
    let ramesh = fixture_bank().remove(1);

    let standard = pipeline::run_method(&ramesh, Method::Standard, &replay, &config).unwrap();
    let outcome = eval::grade(&standard, &ramesh, &spec);
    assert_eq!(outcome.verdict, Verdict::Incorrect, "standard: {outcome:?}");

    let with_kg = pipeline::run_method(&ramesh, Method::DecompWithKg, &replay, &config).unwrap();
    assert_eq!(with_kg.kg.as_ref().unwrap().nodes.len(), 5);
    assert_eq!(with_kg.subqueries.len(), 2);
    let outcome = eval::grade(&with_kg, &ramesh, &spec);
    assert_eq!(outcome.verdict, Verdict::Correct, "with KG: {outcome:?}");

    pass("Ramesh behavioral fixture: standard incorrect, decomposition with KG correct");
}

#[test]
fn acceptance_dataset_resumability() {
    let started = Instant::now();

    fn question(id: &str) -> QuestionRecord {
        QuestionRecord {
            id: id.into(),
            text: format!("Fixture question {id}"),
            category: Category::Numerical,
            topic: "mechanics".into(),
            gold_answer: None,
        }
    }
    let bank = [question("q1"), question("q2"), question("q3")];
    let push_success = |provider: &ScriptedProvider| {
        provider.push_text(TOOTH_KG);
        provider.push_text(TOOTH_SUBQUERIES);
    };
    let config_for = |dir: &Path| {
        let mut config =
            BuildConfig::new(&dir.join("journal.jsonl"), &dir.join("dataset.jsonl"));
        config.timestamp = Some("2025-01-01T00:00:00Z".to_string());
        config
    };

    // Interrupted build: question 2 fails, rerun picks up exactly it.
    let dir = tempfile::tempdir().unwrap();
    let config = config_for(dir.path());
    let provider = ScriptedProvider::new();
    push_success(&provider);
    provider.push_error(ProviderError::Auth("injected failure".into()));
    push_success(&provider);
    let summary = dataset::build_dataset(&bank, &provider, &config).unwrap();
    assert_eq!(
        summary,
        BuildSummary {
            generated: 2,
            skipped: 0,
            failed: 1
        }
    );
    let provider = ScriptedProvider::new();
    push_success(&provider);
    let summary = dataset::build_dataset(&bank, &provider, &config).unwrap();
    assert_eq!(
        summary,
        BuildSummary {
            generated: 1,
            skipped: 2,
            failed: 0
        }
    );
    assert_eq!(provider.remaining(), 0);

    let ids: Vec<String> = dataset::load_dataset(&config.out_path)
        .unwrap()
        .into_iter()
        .map(|r| r.question.id)
        .collect();
    assert_eq!(ids, ["q1", "q2", "q3"]);

    // Clean single run produces the same bytes.
    let clean_dir = tempfile::tempdir().unwrap();
    let clean_config = config_for(clean_dir.path());
    let provider = ScriptedProvider::new();
    for _ in 0..3 {
        push_success(&provider);
    }
    dataset::build_dataset(&bank, &provider, &clean_config).unwrap();
    assert_eq!(
        std::fs::read(&config.out_path).unwrap(),
        std::fs::read(&clean_config.out_path).unwrap()
    );

    assert!(started.elapsed() < Duration::from_secs(5));
    pass("dataset resumability: {2,0,1} then {1,2,0}, id-ordered, byte-identical to clean run");
}

#[test]
fn acceptance_report_shapes() {
    // Success table: synthetic outcomes covering every method × category.
    let mut categories = BTreeMap::new();
    let mut outcomes = Vec::new();
    let mut id = 0;
    for method in Method::all() {
        for category in [Category::Numerical, Category::Conceptual] {
            for verdict in [Verdict::Correct, Verdict::Correct, Verdict::Incorrect] {
                let question_id = format!("s{id}");
                id += 1;
                categories.insert(question_id.clone(), category);
                outcomes.push(eval::GradedOutcome {
                    question_id,
                    method,
                    verdict,
                    grader: eval::GraderKind::Numeric,
                    detail: String::new(),
                });
            }
        }
    }
    let table = eval::success_table(&outcomes, &categories).unwrap();
    assert_eq!(
        table.headers,
        ["Method", "Numerical Solving", "Conceptual Reasoning"]
    );
    let labels: Vec<&str> = table.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        labels,
        [
            "Standard Prompting",
            "Decomposition without KG",
            "Decomposition with KG"
        ]
    );
    for row in &table.rows {
        assert_eq!(row.len(), 3);
        assert_eq!(row[1], "66.67");
        assert_eq!(row[2], "66.67");
    }
    let markdown = eval::emit_report(&table, eval::ReportFormat::Markdown);
    assert_eq!(markdown.lines().count(), 5);

    // Survey means reproduce the fixture's per-category averages.
    let responses = eval::parse_survey_csv(SURVEY_CSV).unwrap();
    let means = eval::survey_means(&responses, &SurveyGroupBy::default_categories());
    assert_eq!(
        means.rows,
        vec![
            vec!["Standard Prompting".to_string(), "3.8".into(), "3.4".into()],
            vec![
                "Decomposition without KG".to_string(),
                "4.1".into(),
                "3.6".into()
            ],
            vec![
                "Decomposition with KG".to_string(),
                "4.5".into(),
                "4.2".into()
            ],
        ]
    );

    pass("report shapes: success table layout and survey means 3.8/3.4, 4.1/3.6, 4.5/4.2");
}

#[test]
fn acceptance_retry_policy() {
    let policy = RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 100,
        multiplier: 2.0,
    };
    let request = ChatRequest::user("test-model", "prompt", 0.0, 64);

    // Two transient faults, then success: exactly three attempts, delays
    // 100 ms and 200 ms.
    let provider = ScriptedProvider::new();
    provider.push_error(ProviderError::Transport("503".into()));
    provider.push_error(ProviderError::Transport("503".into()));
    provider.push_text("recovered");
    let mut delays = Vec::new();
    let completion = with_retries_using(&provider, &request, &policy, &mut |d| {
        delays.push(d.as_millis() as u64)
    })
    .unwrap();
    assert_eq!(completion.attempts, 3);
    assert_eq!(delays, [100, 200]);
    assert_eq!(completion.response.text, "recovered");

    // Non-retryable authentication failure: one attempt, no sleeping.
    let provider = ScriptedProvider::new();
    provider.push_error(ProviderError::Auth("denied".into()));
    provider.push_text("unreachable");
    let mut slept = 0u32;
    let err = with_retries_using(&provider, &request, &policy, &mut |_| slept += 1).unwrap_err();
    assert!(matches!(err, ProviderError::Auth(_)));
    assert_eq!(slept, 0);
    assert_eq!(provider.remaining(), 1);

    pass("retry policy: 3 attempts with 100/200 ms backoff, auth errors never retry");
}

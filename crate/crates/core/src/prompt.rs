//! Prompt construction for every pipeline stage.
//!
//! Exact prompt wording is a versioned artifact: templates are plain-text
//! files with `{{placeholder}}` markers, and the library exposes a
//! `template_version` (content hash) that is stamped into every trace so
//! results stay attributable to the wording that produced them. Rendering is
//! pure and deterministic.

use crate::kg::{self, KgError, KnowledgeGraph};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {template}: no binding for placeholder {{{{{name}}}}}")]
    MissingBinding { template: String, name: String },
    #[error("template {0} not found")]
    TemplateNotFound(String),
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("sub-query text is empty")]
    EmptySubquery,
    #[error(transparent)]
    InvalidGraph(#[from] KgError),
    #[error("failed to read template {path}: {source}")]
    TemplateDir {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A parsed template: literal text interleaved with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    segments: Vec<Segment>,
    placeholders: BTreeSet<String>,
}

impl PromptTemplate {
    /// Parse template text. A `{{` that does not enclose an identifier is
    /// treated as literal braces, so JSON skeletons can live in templates.
    pub fn parse(name: &str, text: &str) -> Self {
        let mut segments = Vec::new();
        let mut placeholders = BTreeSet::new();
        let mut literal = String::new();
        let mut rest = text;
        while let Some(open) = rest.find("{{") {
            let after = &rest[open + 2..];
            let ident = after.find("}}").map(|c| &after[..c]);
            let is_ident = ident.is_some_and(|s| {
                !s.is_empty()
                    && s.chars()
                        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            });
            if is_ident {
                let ident = ident.unwrap();
                literal.push_str(&rest[..open]);
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(ident.to_string()));
                placeholders.insert(ident.to_string());
                rest = &after[ident.len() + 2..];
            } else {
                literal.push_str(&rest[..open + 2]);
                rest = &rest[open + 2..];
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        PromptTemplate {
            name: name.to_string(),
            segments,
            placeholders,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn placeholders(&self) -> &BTreeSet<String> {
        &self.placeholders
    }

    /// Render with a complete binding set; every placeholder must resolve.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        let mut out = String::new();
        for segment in &self.segments {
            match segment {
                Segment::Literal(text) => out.push_str(text),
                Segment::Placeholder(name) => {
                    let value =
                        bindings
                            .get(name.as_str())
                            .ok_or_else(|| PromptError::MissingBinding {
                                template: self.name.clone(),
                                name: name.clone(),
                            })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

/// A worked question/answer exemplar for few-shot prompting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question: String,
    pub worked_answer: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

impl FewShotExample {
    pub fn new(question: &str, worked_answer: &str, tags: &[&str]) -> Self {
        FewShotExample {
            question: question.to_string(),
            worked_answer: worked_answer.to_string(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }
}

/// A fixed pool of few-shot exemplars. Selection is tag match first, then
/// stable pool order — no retrieval.
#[derive(Debug, Clone, Default)]
pub struct FewShotBank {
    examples: Vec<FewShotExample>,
}

impl FewShotBank {
    pub fn new(examples: Vec<FewShotExample>) -> Self {
        FewShotBank { examples }
    }

    /// Two worked high-school physics examples used when no custom bank is
    /// configured.
    pub fn builtin() -> Self {
        FewShotBank::new(vec![
            FewShotExample::new(
                "A 2 kg block is pushed with a constant force of 10 N across a frictionless surface. What is its acceleration?",
                "Newton's second law gives a = F/m = 10 N / 2 kg = 5 m/s^2.\nFinal Answer: 5 m/s^2",
                &["mechanics"],
            ),
            FewShotExample::new(
                "A steel rod of length 2 m is heated from 20 °C to 120 °C. With a linear expansion coefficient of 1.2e-05 °C^-1, how much does it lengthen?",
                "The change in length is ΔL = L·α·ΔT = 2 m × 1.2e-05 °C^-1 × 100 °C = 2.4e-03 m.\nFinal Answer: 2.4e-03 m",
                &["thermodynamics"],
            ),
        ])
    }

    pub fn select(&self, topic: &str, count: usize) -> Vec<&FewShotExample> {
        let mut picked: Vec<&FewShotExample> = self
            .examples
            .iter()
            .filter(|e| e.tags.contains(topic))
            .collect();
        for example in &self.examples {
            if !picked.iter().any(|p| std::ptr::eq(*p, example)) {
                picked.push(example);
            }
        }
        picked.truncate(count);
        picked
    }
}

const TEMPLATE_NAMES: [&str; 8] = [
    "kg",
    "kg_corrective",
    "subqueries",
    "subqueries_direct",
    "answer",
    "synthesis",
    "standard",
    "decomp_single",
];

/// The full template set for one pipeline configuration, plus its version
/// hash. Immutable after load.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<String, PromptTemplate>,
    version: String,
}

impl PromptLibrary {
    /// The templates compiled into the binary.
    pub fn builtin() -> Self {
        let sources: [(&str, &str); 8] = [
            ("kg", include_str!("../templates/kg.txt")),
            ("kg_corrective", include_str!("../templates/kg_corrective.txt")),
            ("subqueries", include_str!("../templates/subqueries.txt")),
            (
                "subqueries_direct",
                include_str!("../templates/subqueries_direct.txt"),
            ),
            ("answer", include_str!("../templates/answer.txt")),
            ("synthesis", include_str!("../templates/synthesis.txt")),
            ("standard", include_str!("../templates/standard.txt")),
            ("decomp_single", include_str!("../templates/decomp_single.txt")),
        ];
        Self::from_sources(sources.into_iter())
    }

    /// Load `<name>.txt` for every template name from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut sources = Vec::new();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            let text = fs::read_to_string(&path).map_err(|source| PromptError::TemplateDir {
                path: path.display().to_string(),
                source,
            })?;
            sources.push((name, text));
        }
        Ok(Self::from_sources(
            sources.iter().map(|(n, t)| (*n, t.as_str())),
        ))
    }

    fn from_sources<'a>(sources: impl Iterator<Item = (&'a str, &'a str)>) -> Self {
        let raw: BTreeMap<&str, &str> = sources.collect();
        let mut hasher = Sha256::new();
        let mut templates = BTreeMap::new();
        for (name, text) in &raw {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            hasher.update(text.as_bytes());
            hasher.update([0u8]);
            templates.insert(name.to_string(), PromptTemplate::parse(name, text));
        }
        PromptLibrary {
            templates,
            version: hex::encode(&hasher.finalize()[..8]),
        }
    }

    /// Content hash identifying this exact template set.
    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn template(&self, name: &str) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(name)
            .ok_or_else(|| PromptError::TemplateNotFound(name.to_string()))
    }

    fn render(&self, name: &str, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        self.template(name)?.render(bindings)
    }

    /// Prompt instructing the model to emit the question's knowledge graph as
    /// a bare list-form JSON object (the schema is embedded in the prompt).
    pub fn render_kg_prompt(&self, question: &str) -> Result<String, PromptError> {
        require_question(question)?;
        self.render("kg", &BTreeMap::from([("question", question.to_string())]))
    }

    /// Follow-up after an unparseable knowledge-graph completion; embeds the
    /// parse error.
    pub fn render_kg_corrective(&self, error: &str) -> Result<String, PromptError> {
        self.render(
            "kg_corrective",
            &BTreeMap::from([("error", error.to_string())]),
        )
    }

    /// Prompt deriving sub-queries from the question and its graph (canonical
    /// serialization embedded).
    pub fn render_subquery_prompt(
        &self,
        question: &str,
        graph: &KnowledgeGraph,
    ) -> Result<String, PromptError> {
        require_question(question)?;
        let graph_text = kg::serialize_graph(graph)?;
        self.render(
            "subqueries",
            &BTreeMap::from([("question", question.to_string()), ("graph", graph_text)]),
        )
    }

    /// Graph-free sub-query derivation (decomposition baseline).
    pub fn render_subquery_prompt_direct(&self, question: &str) -> Result<String, PromptError> {
        require_question(question)?;
        self.render(
            "subqueries_direct",
            &BTreeMap::from([("question", question.to_string())]),
        )
    }

    /// Few-shot answering prompt: worked exemplars in the given order, then
    /// the target sub-query. Zero shots yields a direct question prompt.
    pub fn render_answer_prompt(
        &self,
        subquery: &str,
        shots: &[&FewShotExample],
    ) -> Result<String, PromptError> {
        if subquery.trim().is_empty() {
            return Err(PromptError::EmptySubquery);
        }
        let mut shots_block = String::new();
        for shot in shots {
            shots_block.push_str("Question: ");
            shots_block.push_str(&shot.question);
            shots_block.push_str("\nAnswer: ");
            shots_block.push_str(&shot.worked_answer);
            shots_block.push_str("\n\n");
        }
        self.render(
            "answer",
            &BTreeMap::from([("shots", shots_block), ("subquery", subquery.to_string())]),
        )
    }

    /// Synthesis prompt: the original question with each sub-query and its
    /// answer listed as facts.
    pub fn render_synthesis_prompt(
        &self,
        question: &str,
        subanswers: &[(String, String)],
    ) -> Result<String, PromptError> {
        require_question(question)?;
        let mut facts = String::new();
        for (i, (subquery, answer)) in subanswers.iter().enumerate() {
            facts.push_str(&format!("{}. {}\n   Answer: {}\n", i + 1, subquery, answer));
        }
        if facts.is_empty() {
            facts.push_str("(none)\n");
        }
        self.render(
            "synthesis",
            &BTreeMap::from([("question", question.to_string()), ("facts", facts)]),
        )
    }

    /// Direct single-completion prompt (standard baseline).
    pub fn render_standard_prompt(&self, question: &str) -> Result<String, PromptError> {
        require_question(question)?;
        self.render(
            "standard",
            &BTreeMap::from([("question", question.to_string())]),
        )
    }

    /// Decompose-solve-synthesize within one completion (the single-call
    /// variant of the graph-free baseline).
    pub fn render_decomp_no_kg_prompt(&self, question: &str) -> Result<String, PromptError> {
        require_question(question)?;
        self.render(
            "decomp_single",
            &BTreeMap::from([("question", question.to_string())]),
        )
    }
}

fn require_question(question: &str) -> Result<(), PromptError> {
    if question.trim().is_empty() {
        Err(PromptError::EmptyQuestion)
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::parse_graph;
    use proptest::prelude::*;

    const TOOTH_CAVITY_KG: &str = include_str!("../testdata/tooth_cavity_kg.json");
    const TOOTH_CAVITY_QUESTION: &str = include_str!("../testdata/tooth_cavity_question.txt");

    fn lib() -> PromptLibrary {
        PromptLibrary::builtin()
    }

    #[test]
    fn template_parse_finds_placeholders() {
        let t = PromptTemplate::parse("t", "a {{x}} b {{y_2}} c");
        assert_eq!(
            t.placeholders().iter().collect::<Vec<_>>(),
            [&"x".to_string(), &"y_2".to_string()]
        );
    }

    #[test]
    fn literal_braces_survive() {
        let t = PromptTemplate::parse("t", r#"schema {"nodes": [{"id": "x"}]} and {{q}}"#);
        let out = t.render(&BTreeMap::from([("q", "Q".to_string())])).unwrap();
        assert_eq!(out, r#"schema {"nodes": [{"id": "x"}]} and Q"#);
    }

    #[test]
    fn missing_binding_is_an_error() {
        let t = PromptTemplate::parse("t", "{{q}}");
        assert!(matches!(
            t.render(&BTreeMap::new()),
            Err(PromptError::MissingBinding { .. })
        ));
    }

    #[test]
    fn kg_prompt_embeds_question_and_schema() {
        let prompt = lib().render_kg_prompt(TOOTH_CAVITY_QUESTION.trim()).unwrap();
        assert!(prompt.contains(TOOTH_CAVITY_QUESTION.trim()));
        assert!(prompt.contains(r#""nodes""#));
        assert!(prompt.contains(r#""edges""#));
        assert!(!prompt.contains("{{"));
    }

    #[test]
    fn kg_prompt_rejects_empty_question() {
        assert!(matches!(
            lib().render_kg_prompt("  "),
            Err(PromptError::EmptyQuestion)
        ));
    }

    #[test]
    fn distinct_questions_differ_only_in_slot() {
        let a = lib().render_kg_prompt("Q-ONE").unwrap();
        let b = lib().render_kg_prompt("Q-TWO").unwrap();
        assert_eq!(a.replace("Q-ONE", "Q-TWO"), b);
    }

    #[test]
    fn subquery_prompt_embeds_canonical_graph() {
        let graph = parse_graph(TOOTH_CAVITY_KG).unwrap();
        let prompt = lib()
            .render_subquery_prompt(TOOTH_CAVITY_QUESTION.trim(), &graph)
            .unwrap();
        assert!(prompt.contains(TOOTH_CAVITY_QUESTION.trim()));
        assert!(prompt.contains(&crate::kg::serialize_graph(&graph).unwrap()));
    }

    #[test]
    fn subquery_prompt_renders_empty_graph() {
        let prompt = lib()
            .render_subquery_prompt("Q", &KnowledgeGraph::default())
            .unwrap();
        assert!(prompt.contains("\"nodes\": []"));
    }

    #[test]
    fn subquery_prompt_rejects_invalid_graph() {
        let graph = KnowledgeGraph {
            nodes: vec![],
            edges: vec![crate::kg::Edge::new("a", "b", "r")],
        };
        assert!(matches!(
            lib().render_subquery_prompt("Q", &graph),
            Err(PromptError::InvalidGraph(_))
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let graph = parse_graph(TOOTH_CAVITY_KG).unwrap();
        let a = lib().render_subquery_prompt("Q", &graph).unwrap();
        let b = lib().render_subquery_prompt("Q", &graph).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn answer_prompt_orders_shots() {
        let bank = FewShotBank::builtin();
        let shots = bank.select("thermodynamics", 2);
        let subquery = "Calculate the change in temperature of the tooth cavity.";
        let prompt = lib().render_answer_prompt(subquery, &shots).unwrap();
        let first = prompt.find("steel rod").unwrap();
        let second = prompt.find("2 kg block").unwrap();
        assert!(first < second, "tag-matched shot must come first");
        assert!(second < prompt.find("tooth cavity").unwrap());

        let reversed: Vec<&FewShotExample> = shots.into_iter().rev().collect();
        let swapped = lib().render_answer_prompt(subquery, &reversed).unwrap();
        assert_ne!(prompt, swapped);
    }

    #[test]
    fn answer_prompt_zero_shots_is_direct() {
        let prompt = lib().render_answer_prompt("What is strain?", &[]).unwrap();
        assert!(!prompt.contains("Answer: Newton"));
        assert!(prompt.contains("Question: What is strain?"));
    }

    #[test]
    fn synthesis_prompt_lists_facts() {
        let subanswers = vec![
            (
                "Calculate the change in temperature of the tooth cavity.".to_string(),
                "ΔT = 37 - 26.65 = 10.35 °C".to_string(),
            ),
            (
                "Calculate the strain experienced by the tooth cavity.".to_string(),
                "strain = 6.98 × 10^{-5}".to_string(),
            ),
        ];
        let prompt = lib()
            .render_synthesis_prompt(TOOTH_CAVITY_QUESTION.trim(), &subanswers)
            .unwrap();
        assert!(prompt.contains("Facts:"));
        assert!(prompt.contains("10.35"));
        assert!(prompt.find("tooth cavity").unwrap() < prompt.find("Facts:").unwrap());
    }

    #[test]
    fn synthesis_prompt_with_no_facts_degenerates() {
        let prompt = lib().render_synthesis_prompt("Q", &[]).unwrap();
        assert!(prompt.contains("Facts:"));
        assert!(prompt.contains("(none)"));
    }

    #[test]
    fn standard_prompt_golden() {
        let prompt = lib().render_standard_prompt("Why is the sky blue?").unwrap();
        let golden = include_str!("../testdata/golden/standard_prompt.txt");
        assert_eq!(prompt, golden);
    }

    #[test]
    fn subquery_prompt_golden() {
        let graph = parse_graph(TOOTH_CAVITY_KG).unwrap();
        let prompt = lib()
            .render_subquery_prompt(TOOTH_CAVITY_QUESTION.trim(), &graph)
            .unwrap();
        let golden = include_str!("../testdata/golden/tooth_cavity_subquery_prompt.txt");
        assert_eq!(prompt, golden);
    }

    #[test]
    fn builtin_version_is_stable() {
        let a = PromptLibrary::builtin();
        let b = PromptLibrary::builtin();
        assert_eq!(a.version(), b.version());
        assert_eq!(a.version().len(), 16);
    }

    #[test]
    fn from_dir_round_trips_builtin() {
        let dir = tempfile::tempdir().unwrap();
        let sources: [(&str, &str); 8] = [
            ("kg", include_str!("../templates/kg.txt")),
            ("kg_corrective", include_str!("../templates/kg_corrective.txt")),
            ("subqueries", include_str!("../templates/subqueries.txt")),
            (
                "subqueries_direct",
                include_str!("../templates/subqueries_direct.txt"),
            ),
            ("answer", include_str!("../templates/answer.txt")),
            ("synthesis", include_str!("../templates/synthesis.txt")),
            ("standard", include_str!("../templates/standard.txt")),
            ("decomp_single", include_str!("../templates/decomp_single.txt")),
        ];
        for (name, text) in sources {
            std::fs::write(dir.path().join(format!("{name}.txt")), text).unwrap();
        }
        let loaded = PromptLibrary::from_dir(dir.path()).unwrap();
        assert_eq!(loaded.version(), PromptLibrary::builtin().version());
    }

    #[test]
    #[ignore = "rewrites the golden prompt files"]
    fn regenerate_goldens() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/golden");
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("standard_prompt.txt"),
            lib().render_standard_prompt("Why is the sky blue?").unwrap(),
        )
        .unwrap();
        let graph = parse_graph(TOOTH_CAVITY_KG).unwrap();
        std::fs::write(
            dir.join("tooth_cavity_subquery_prompt.txt"),
            lib()
                .render_subquery_prompt(TOOTH_CAVITY_QUESTION.trim(), &graph)
                .unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn missing_template_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            PromptLibrary::from_dir(dir.path()),
            Err(PromptError::TemplateDir { .. })
        ));
    }

    proptest! {
        #[test]
        fn prompts_always_embed_the_question(q in "[a-zA-Z0-9 ?]{1,60}") {
            prop_assume!(!q.trim().is_empty());
            for prompt in [
                lib().render_kg_prompt(&q).unwrap(),
                lib().render_standard_prompt(&q).unwrap(),
                lib().render_decomp_no_kg_prompt(&q).unwrap(),
                lib().render_subquery_prompt_direct(&q).unwrap(),
                lib().render_synthesis_prompt(&q, &[]).unwrap(),
            ] {
                prop_assert!(prompt.contains(&q));
                prop_assert!(!prompt.contains("{{"));
            }
        }
    }
}

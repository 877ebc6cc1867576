//! Task instances, preference pairs, and their line-delimited JSON files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::eval::normalize;
use crate::kg::{Entity, EntityId, GraphError, KnowledgeGraph, RelationId, Triple};
use crate::sampler::{FactualPath, PathInstance, Task};
use crate::textgen::{build_reasoning_chain, render_statement, ContextDoc, GeneratedQuestion};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    IoError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema version mismatch: expected {expected}, found {found:?}")]
    SchemaVersionMismatch { expected: u32, found: Option<u32> },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("inconsistent inputs: {0}")]
    InconsistentInputs(String),
    #[error("duplicate instance id `{0}`")]
    DuplicateId(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub label: String,
    pub aliases: Vec<String>,
}

impl Answer {
    /// Label plus aliases and variants, with duplicates dropped.
    pub fn from_entity(e: &Entity) -> Self {
        let mut aliases: Vec<String> = Vec::new();
        for a in e.aliases.iter().chain(e.variants.iter()) {
            if a != &e.label && !aliases.contains(a) {
                aliases.push(a.clone());
            }
        }
        Self {
            label: e.label.clone(),
            aliases,
        }
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.label.as_str()).chain(self.aliases.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub id: String,
    pub task: Task,
    pub hops: usize,
    pub paths: PathInstance,
    pub question: String,
    pub context_factual: String,
    pub context_counterfactual: String,
    pub answer_cf: Answer,
    pub answer_orig: Answer,
    pub response_faithful: String,
    pub response_stubborn: String,
    /// Counterfactual statements at the substituted hops, used as in-context
    /// edit instructions.
    pub edits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instance_id: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// Layout of the model input built from a context and a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptScaffold(pub String);

impl Default for PromptScaffold {
    fn default() -> Self {
        Self("{context}\n\nQ: {question}\nA:".into())
    }
}

impl PromptScaffold {
    pub fn render(&self, context: &str, question: &str) -> String {
        // Single pass so that braces inside the context are left alone.
        let mut out = String::new();
        let mut rest = self.0.as_str();
        while let Some(i) = rest.find('{') {
            out.push_str(&rest[..i]);
            let tail = &rest[i..];
            if let Some(t) = tail.strip_prefix("{context}") {
                out.push_str(context);
                rest = t;
            } else if let Some(t) = tail.strip_prefix("{question}") {
                out.push_str(question);
                rest = t;
            } else {
                out.push('{');
                rest = &tail[1..];
            }
        }
        out.push_str(rest);
        out
    }
}

pub fn assemble_instance(
    g: &KnowledgeGraph,
    id: impl Into<String>,
    inst: &PathInstance,
    doc: &ContextDoc,
    question: &GeneratedQuestion,
) -> Result<TaskInstance, DatasetError> {
    inst.check().map_err(DatasetError::InconsistentInputs)?;
    if doc.source != inst.original || doc.factual_segments.len() != inst.hops() {
        return Err(DatasetError::InconsistentInputs(
            "context was generated for a different path".into(),
        ));
    }
    if question.path != inst.factual.hops {
        return Err(DatasetError::InconsistentInputs(
            "question was generated for a different path".into(),
        ));
    }
    let cf = g.entity(inst.answer_cf())?;
    let orig = g.entity(inst.answer_orig())?;
    let answer_cf = Answer::from_entity(cf);
    let answer_orig = Answer::from_entity(orig);
    let cf_norm: BTreeSet<String> = answer_cf.forms().map(normalize).collect();
    if answer_orig.forms().map(normalize).any(|f| cf_norm.contains(&f)) {
        return Err(DatasetError::InconsistentInputs(format!(
            "answers `{}` and `{}` normalize to the same form",
            answer_cf.label, answer_orig.label
        )));
    }
    let response_faithful = build_reasoning_chain(g, &inst.counterfactual, &cf.label)?;
    let response_stubborn = build_reasoning_chain(g, &inst.factual.hops, &orig.label)?;
    let mut edits = Vec::with_capacity(inst.substituted.len());
    for &i in &inst.substituted {
        edits.push(render_statement(g, &inst.counterfactual[i])?.text);
    }
    Ok(TaskInstance {
        id: id.into(),
        task: inst.task,
        hops: inst.hops(),
        paths: inst.clone(),
        question: question.text.clone(),
        context_factual: doc.factual.clone(),
        context_counterfactual: doc.counterfactual.clone(),
        answer_cf,
        answer_orig,
        response_faithful,
        response_stubborn,
        edits,
    })
}

pub fn build_preference_pair(inst: &TaskInstance, scaffold: &PromptScaffold) -> PreferencePair {
    PreferencePair {
        instance_id: inst.id.clone(),
        prompt: scaffold.render(&inst.context_counterfactual, &inst.question),
        chosen: inst.response_faithful.clone(),
        rejected: inst.response_stubborn.clone(),
    }
}

type TripleRow = [String; 3];

fn to_rows(ts: &[Triple]) -> Vec<TripleRow> {
    ts.iter()
        .map(|t| [t.subject.0.clone(), t.relation.0.clone(), t.object.0.clone()])
        .collect()
}

fn from_rows(rows: Vec<TripleRow>) -> Vec<Triple> {
    rows.into_iter()
        .map(|[s, r, o]| Triple {
            subject: EntityId(s),
            relation: RelationId(r),
            object: EntityId(o),
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordPaths {
    factual: Vec<TripleRow>,
    counterfactual: Vec<TripleRow>,
    original: Vec<TripleRow>,
    substituted: Vec<usize>,
    edits: Vec<String>,
}

/// On-disk record. Field order is part of the file format.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    task: Task,
    hops: usize,
    question: String,
    context: String,
    factual_context: String,
    answer: String,
    answer_aliases: Vec<String>,
    orig_answer: String,
    orig_answer_aliases: Vec<String>,
    faithful_response: String,
    stubborn_response: String,
    paths: RecordPaths,
}

impl From<&TaskInstance> for Record {
    fn from(x: &TaskInstance) -> Self {
        Record {
            id: x.id.clone(),
            task: x.task,
            hops: x.hops,
            question: x.question.clone(),
            context: x.context_counterfactual.clone(),
            factual_context: x.context_factual.clone(),
            answer: x.answer_cf.label.clone(),
            answer_aliases: x.answer_cf.aliases.clone(),
            orig_answer: x.answer_orig.label.clone(),
            orig_answer_aliases: x.answer_orig.aliases.clone(),
            faithful_response: x.response_faithful.clone(),
            stubborn_response: x.response_stubborn.clone(),
            paths: RecordPaths {
                factual: to_rows(&x.paths.factual.hops),
                counterfactual: to_rows(&x.paths.counterfactual),
                original: to_rows(&x.paths.original),
                substituted: x.paths.substituted.clone(),
                edits: x.edits.clone(),
            },
        }
    }
}

impl From<Record> for TaskInstance {
    fn from(r: Record) -> Self {
        TaskInstance {
            id: r.id,
            task: r.task,
            hops: r.hops,
            paths: PathInstance {
                task: r.task,
                factual: FactualPath::new(from_rows(r.paths.factual)),
                counterfactual: from_rows(r.paths.counterfactual),
                original: from_rows(r.paths.original),
                substituted: r.paths.substituted,
            },
            question: r.question,
            context_factual: r.factual_context,
            context_counterfactual: r.context,
            answer_cf: Answer {
                label: r.answer,
                aliases: r.answer_aliases,
            },
            answer_orig: Answer {
                label: r.orig_answer,
                aliases: r.orig_answer_aliases,
            },
            response_faithful: r.faithful_response,
            response_stubborn: r.stubborn_response,
            edits: r.paths.edits,
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
struct Header {
    schema_version: u32,
    kind: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::IoError {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a header line followed by one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, kind: &str, items: &[T]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
    };
    let mut line = serde_json::to_string(&header).expect("header serializes");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(io_err(path))?;
    for item in items {
        let mut line = serde_json::to_string(item).expect("record serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(l) => l.map_err(io_err(path))?,
        None => {
            return Err(DatasetError::SchemaVersionMismatch {
                expected: SCHEMA_VERSION,
                found: None,
            })
        }
    };
    let header: serde_json::Value = serde_json::from_str(&first).map_err(|e| DatasetError::MalformedRecord {
        line: 1,
        reason: format!("bad header: {e}"),
    })?;
    let version = header.get("schema_version").and_then(|v| v.as_u64()).map(|v| v as u32);
    if version != Some(SCHEMA_VERSION) {
        return Err(DatasetError::SchemaVersionMismatch {
            expected: SCHEMA_VERSION,
            found: version,
        });
    }
    if header.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(DatasetError::MalformedRecord {
            line: 1,
            reason: format!("expected a `{kind}` file"),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| DatasetError::MalformedRecord {
            line: i + 2,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_dataset(instances: &[TaskInstance], path: &Path) -> Result<(), DatasetError> {
    let mut seen = BTreeSet::new();
    for x in instances {
        if !seen.insert(&x.id) {
            return Err(DatasetError::DuplicateId(x.id.clone()));
        }
    }
    let records: Vec<Record> = instances.iter().map(Record::from).collect();
    write_jsonl(path, "dataset", &records)
}

pub fn read_dataset(path: &Path) -> Result<Vec<TaskInstance>, DatasetError> {
    let records: Vec<Record> = read_jsonl(path, "dataset")?;
    Ok(records.into_iter().map(TaskInstance::from).collect())
}

pub fn write_preferences(pairs: &[PreferencePair], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(path, "preferences", pairs)
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferencePair>, DatasetError> {
    read_jsonl(path, "preferences")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Relation;
    use crate::sampler::counterfact_qa;
    use crate::textgen::TextGenerator;

    fn kyiv_graph() -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            vec![
                Entity::new("Kyiv", "Kyiv"),
                Entity::new("EU", "Europe"),
                Entity::new("SA", "South America"),
                Entity::new("Lima", "Lima"),
            ],
            vec![Relation::new(
                "P30",
                "continent",
                "[subject] is located in the continent of [target]",
                "continent of",
            )],
            vec![Triple::new("Kyiv", "P30", "EU"), Triple::new("Lima", "P30", "SA")],
        )
        .unwrap()
    }

    fn kyiv_instance(id: &str) -> TaskInstance {
        let g = kyiv_graph();
        let inst = counterfact_qa(&g, &Triple::new("Kyiv", "P30", "EU"), 0).unwrap();
        let gen = TextGenerator::fallback();
        let doc = gen.compose_context(&g, &inst).unwrap();
        let q = gen.question(&g, &inst.factual).unwrap();
        assemble_instance(&g, id, &inst, &doc, &q).unwrap()
    }

    #[test]
    fn qa_answers_and_responses() {
        let x = kyiv_instance("qa-0");
        assert_eq!(x.answer_cf.label, "South America");
        assert_eq!(x.answer_orig.label, "Europe");
        assert!(x.response_faithful.ends_with("So the final answer is South America."));
        assert!(x.response_stubborn.ends_with("So the final answer is Europe."));
        assert_eq!(x.edits, vec!["Kyiv is located in the continent of South America"]);
        let pair = build_preference_pair(&x, &PromptScaffold::default());
        assert!(pair.prompt.starts_with(&x.context_counterfactual));
        assert!(pair.prompt.ends_with(&format!("\n\nQ: {}\nA:", x.question)));
        assert!(pair.chosen.ends_with("South America."));
        assert_ne!(pair.chosen, pair.rejected);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let g = kyiv_graph();
        let gen = TextGenerator::fallback();
        let inst = counterfact_qa(&g, &Triple::new("Kyiv", "P30", "EU"), 0).unwrap();
        let doc = gen.compose_context(&g, &inst).unwrap();
        let other = FactualPath::new(vec![Triple::new("Lima", "P30", "SA")]);
        let q = gen.question(&g, &other).unwrap();
        assert!(matches!(
            assemble_instance(&g, "x", &inst, &doc, &q),
            Err(DatasetError::InconsistentInputs(_))
        ));
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let xs: Vec<TaskInstance> = (0..3).map(|i| kyiv_instance(&format!("qa-{i}"))).collect();
        write_dataset(&xs, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), xs);
        write_dataset(&xs, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);

        write_dataset(&[], &path).unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn field_order_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&[kyiv_instance("a")], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let line = text.lines().nth(1).unwrap();
        let keys = [
            "\"id\"",
            "\"task\"",
            "\"hops\"",
            "\"question\"",
            "\"context\"",
            "\"factual_context\"",
            "\"answer\"",
            "\"answer_aliases\"",
            "\"orig_answer\"",
            "\"orig_answer_aliases\"",
            "\"faithful_response\"",
            "\"stubborn_response\"",
            "\"paths\"",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{positions:?}");
        assert_eq!(text.lines().next().unwrap(), r#"{"schema_version":1,"kind":"dataset"}"#);
    }

    #[test]
    fn malformed_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&[kyiv_instance("a")], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let broken = text.replacen("\"question\":", "\"questio\":", 1);
        std::fs::write(&path, broken).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(DatasetError::MalformedRecord { line: 2, .. })
        ));

        std::fs::write(&path, "{\"schema_version\":9,\"kind\":\"dataset\"}\n").unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(DatasetError::SchemaVersionMismatch { found: Some(9), .. })
        ));
        assert!(matches!(
            read_dataset(&dir.path().join("missing.jsonl")),
            Err(DatasetError::IoError { .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let x = kyiv_instance("same");
        assert!(matches!(
            write_dataset(&[x.clone(), x], &dir.path().join("d.jsonl")),
            Err(DatasetError::DuplicateId(_))
        ));
    }

    #[test]
    fn scaffold_leaves_braces_in_context() {
        let s = PromptScaffold::default();
        assert_eq!(s.render("a {question} b", "Q?"), "a {question} b\n\nQ: Q?\nA:");
    }

    #[test]
    fn answer_aliases_include_variants() {
        let e = Entity::new("US", "United States of America")
            .with_aliases(["USA", "United States"])
            .with_variants(["American"]);
        let a = Answer::from_entity(&e);
        assert_eq!(a.aliases, vec!["USA", "United States", "American"]);
    }
}

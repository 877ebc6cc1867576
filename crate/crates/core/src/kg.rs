//! Knowledge graph ingestion and indexing.
//!
//! The graph is loaded from three tab-separated files (entities, relations,
//! triples), validated, and then treated as immutable. Every relation is
//! functional: a `(subject, relation)` pair maps to at most one object.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const SUBJECT_SLOT: &str = "[subject]";
pub const TARGET_SLOT: &str = "[target]";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl RelationId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    pub label: String,
    pub aliases: Vec<String>,
    /// Morphological forms such as demonyms ("Indian" for India).
    pub variants: Vec<String>,
}

impl Entity {
    pub fn new(id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            id: EntityId::new(id),
            label: label.into(),
            aliases: Vec::new(),
            variants: Vec::new(),
        }
    }

    pub fn with_aliases<S: Into<String>>(mut self, aliases: impl IntoIterator<Item = S>) -> Self {
        self.aliases = aliases.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_variants<S: Into<String>>(mut self, variants: impl IntoIterator<Item = S>) -> Self {
        self.variants = variants.into_iter().map(Into::into).collect();
        self
    }

    /// Label first, then aliases, then variants; longest-first within each
    /// group so that editing never rewrites a prefix of a longer form.
    pub fn surface_forms(&self) -> Vec<String> {
        let mut out: Vec<String> = vec![self.label.clone()];
        for group in [&self.aliases, &self.variants] {
            let mut sorted: Vec<&String> = group.iter().collect();
            sorted.sort_by_key(|s| std::cmp::Reverse(s.chars().count()));
            for s in sorted {
                if !out.contains(s) {
                    out.push(s.clone());
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<(), String> {
        if self.id.0.is_empty() {
            return Err("empty entity id".into());
        }
        if self.label.trim().is_empty() {
            return Err(format!("entity `{}` has an empty label", self.id));
        }
        if self.aliases.contains(&self.label) {
            return Err(format!("entity `{}` lists its label as an alias", self.id));
        }
        for (name, group) in [("alias", &self.aliases), ("variant", &self.variants)] {
            let unique: BTreeSet<&String> = group.iter().collect();
            if unique.len() != group.len() {
                return Err(format!("entity `{}` has a duplicate {name}", self.id));
            }
            if group.iter().any(|s| s.trim().is_empty()) {
                return Err(format!("entity `{}` has an empty {name}", self.id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub id: RelationId,
    pub label: String,
    /// Cloze template with exactly one `[subject]` and one `[target]` slot.
    pub template: String,
    /// Noun phrase used by the fallback question composer, e.g. "capital of".
    pub question_phrase: String,
}

impl Relation {
    pub fn new(
        id: impl Into<String>,
        label: impl Into<String>,
        template: impl Into<String>,
        question_phrase: impl Into<String>,
    ) -> Self {
        Self {
            id: RelationId::new(id),
            label: label.into(),
            template: template.into(),
            question_phrase: question_phrase.into(),
        }
    }

    pub fn has_valid_template(&self) -> bool {
        self.template.matches(SUBJECT_SLOT).count() == 1 && self.template.matches(TARGET_SLOT).count() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

impl Triple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Self {
        Self {
            subject: EntityId::new(subject),
            relation: RelationId::new(relation),
            object: EntityId::new(object),
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.relation, self.object)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed row: {reason}")]
    MalformedRow { file: String, line: usize, reason: String },
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("functional constraint violated for ({subject}, {relation}): `{first}` vs `{second}`")]
    FunctionalViolation {
        subject: EntityId,
        relation: RelationId,
        first: EntityId,
        second: EntityId,
    },
    #[error("relation `{0}` template needs exactly one [subject] and one [target]")]
    MissingPlaceholder(RelationId),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KnowledgeGraph {
    entities: BTreeMap<EntityId, Entity>,
    relations: BTreeMap<RelationId, Relation>,
    triples: Vec<Triple>,
    out_index: BTreeMap<(EntityId, RelationId), EntityId>,
    tails_index: BTreeMap<RelationId, BTreeSet<EntityId>>,
    adjacency: BTreeMap<EntityId, Vec<(RelationId, EntityId)>>,
}

impl KnowledgeGraph {
    /// Validates and indexes the given parts. Exact duplicate triples are
    /// collapsed; a conflicting object for the same `(subject, relation)`
    /// is an error.
    pub fn from_parts(
        entities: Vec<Entity>,
        relations: Vec<Relation>,
        triples: Vec<Triple>,
    ) -> Result<Self, GraphError> {
        let mut g = KnowledgeGraph::default();
        for (i, e) in entities.into_iter().enumerate() {
            e.validate().map_err(|reason| GraphError::MalformedRow {
                file: "entities".into(),
                line: i + 1,
                reason,
            })?;
            if g.entities.contains_key(&e.id) {
                return Err(GraphError::MalformedRow {
                    file: "entities".into(),
                    line: i + 1,
                    reason: format!("duplicate entity id `{}`", e.id),
                });
            }
            g.entities.insert(e.id.clone(), e);
        }
        for (i, r) in relations.into_iter().enumerate() {
            if !r.has_valid_template() {
                return Err(GraphError::MissingPlaceholder(r.id));
            }
            if g.relations.contains_key(&r.id) {
                return Err(GraphError::MalformedRow {
                    file: "relations".into(),
                    line: i + 1,
                    reason: format!("duplicate relation id `{}`", r.id),
                });
            }
            g.relations.insert(r.id.clone(), r);
        }
        for t in triples {
            g.insert_triple(t)?;
        }
        for edges in g.adjacency.values_mut() {
            edges.sort();
        }
        Ok(g)
    }

    fn insert_triple(&mut self, t: Triple) -> Result<(), GraphError> {
        for id in [&t.subject, &t.object] {
            if !self.entities.contains_key(id) {
                return Err(GraphError::UnknownId(id.0.clone()));
            }
        }
        if !self.relations.contains_key(&t.relation) {
            return Err(GraphError::UnknownId(t.relation.0.clone()));
        }
        let key = (t.subject.clone(), t.relation.clone());
        if let Some(existing) = self.out_index.get(&key) {
            if existing == &t.object {
                return Ok(());
            }
            return Err(GraphError::FunctionalViolation {
                subject: t.subject,
                relation: t.relation,
                first: existing.clone(),
                second: t.object,
            });
        }
        self.out_index.insert(key, t.object.clone());
        self.tails_index
            .entry(t.relation.clone())
            .or_default()
            .insert(t.object.clone());
        self.adjacency
            .entry(t.subject.clone())
            .or_default()
            .push((t.relation.clone(), t.object.clone()));
        self.triples.push(t);
        Ok(())
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn relations(&self) -> impl Iterator<Item = &Relation> {
        self.relations.values()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn entity(&self, id: &EntityId) -> Result<&Entity, GraphError> {
        self.entities.get(id).ok_or_else(|| GraphError::UnknownId(id.0.clone()))
    }

    pub fn relation(&self, id: &RelationId) -> Result<&Relation, GraphError> {
        self.relations
            .get(id)
            .ok_or_else(|| GraphError::UnknownId(id.0.clone()))
    }

    pub fn label(&self, id: &EntityId) -> Result<&str, GraphError> {
        self.entity(id).map(|e| e.label.as_str())
    }

    /// The object of `(subject, relation)`, if the graph has that fact.
    pub fn object_of(&self, subject: &EntityId, relation: &RelationId) -> Option<&EntityId> {
        self.out_index.get(&(subject.clone(), relation.clone()))
    }

    /// Outgoing `(relation, object)` edges of `subject`, sorted.
    pub fn outgoing(&self, subject: &EntityId) -> &[(RelationId, EntityId)] {
        self.adjacency.get(subject).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Every object that appears with `relation` in some triple.
    pub fn tails_of(&self, relation: &RelationId) -> Result<BTreeSet<EntityId>, GraphError> {
        if !self.relations.contains_key(relation) {
            return Err(GraphError::UnknownId(relation.0.clone()));
        }
        Ok(self.tails_index.get(relation).cloned().unwrap_or_default())
    }

    pub fn surface_forms(&self, id: &EntityId) -> Result<Vec<String>, GraphError> {
        self.entity(id).map(Entity::surface_forms)
    }
}

pub fn load_graph(
    entities_path: &Path,
    relations_path: &Path,
    triples_path: &Path,
) -> Result<KnowledgeGraph, GraphError> {
    let entities = read_rows(entities_path, 2, 4)?
        .into_iter()
        .map(|(_, cols)| {
            let mut e = Entity::new(cols[0].clone(), cols[1].clone());
            e.aliases = split_pipe(cols.get(2));
            e.variants = split_pipe(cols.get(3));
            e
        })
        .collect();
    let relations = read_rows(relations_path, 4, 4)?
        .into_iter()
        .map(|(_, c)| Relation::new(c[0].clone(), c[1].clone(), c[2].clone(), c[3].clone()))
        .collect();
    let triples = read_rows(triples_path, 3, 3)?
        .into_iter()
        .map(|(_, c)| Triple::new(c[0].clone(), c[1].clone(), c[2].clone()))
        .collect();
    KnowledgeGraph::from_parts(entities, relations, triples)
}

/// Loads `entities.tsv`, `relations.tsv` and `triples.tsv` from one directory.
pub fn load_graph_dir(dir: &Path) -> Result<KnowledgeGraph, GraphError> {
    load_graph(
        &dir.join("entities.tsv"),
        &dir.join("relations.tsv"),
        &dir.join("triples.tsv"),
    )
}

fn split_pipe(field: Option<&String>) -> Vec<String> {
    field
        .map(|f| {
            f.split('|')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

/// Reads a TSV file with a required header row. Blank lines and `#` comments
/// are skipped. Returns `(line_number, columns)` for each data row.
fn read_rows(path: &Path, min_cols: usize, max_cols: usize) -> Result<Vec<(usize, Vec<String>)>, GraphError> {
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(|c| c.trim().to_string()).collect();
        if !saw_header {
            saw_header = true;
            if cols.len() < min_cols {
                return Err(GraphError::MalformedRow {
                    file,
                    line: line_no,
                    reason: format!("header has {} columns, expected at least {min_cols}", cols.len()),
                });
            }
            continue;
        }
        if cols.len() < min_cols || cols.len() > max_cols {
            return Err(GraphError::MalformedRow {
                file,
                line: line_no,
                reason: format!("expected {min_cols}..={max_cols} columns, found {}", cols.len()),
            });
        }
        if cols[..min_cols].iter().any(String::is_empty) {
            return Err(GraphError::MalformedRow {
                file,
                line: line_no,
                reason: "required column is empty".into(),
            });
        }
        rows.push((line_no, cols));
    }
    if !saw_header {
        return Err(GraphError::MalformedRow {
            file,
            line: 0,
            reason: "missing header row".into(),
        });
    }
    Ok(rows)
}

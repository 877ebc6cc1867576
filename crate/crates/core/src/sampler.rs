//! Factual path sampling and counterfactual substitution.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, GraphError, KnowledgeGraph, RelationId, Triple};
use crate::text::contains_word_ci;

pub const MAX_HOPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "QA")]
    Qa,
    #[serde(rename = "MR")]
    Mr,
    #[serde(rename = "MC")]
    Mc,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Qa => "QA",
            Task::Mr => "MR",
            Task::Mc => "MC",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qa" => Ok(Task::Qa),
            "mr" => Ok(Task::Mr),
            "mc" => Ok(Task::Mc),
            other => Err(format!("unknown task `{other}` (expected qa, mr or mc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FactualPath {
    pub hops: Vec<Triple>,
}

impl FactualPath {
    pub fn new(hops: Vec<Triple>) -> Self {
        Self { hops }
    }

    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    pub fn head(&self) -> &EntityId {
        &self.hops[0].subject
    }

    /// Head followed by every tail, in path order.
    pub fn entities(&self) -> Vec<EntityId> {
        path_entities(&self.hops)
    }

    /// Checks chaining and the no-repeat constraints.
    pub fn is_valid(&self) -> bool {
        let n = self.hops.len();
        if n == 0 || n > MAX_HOPS {
            return false;
        }
        if !is_chained(&self.hops) {
            return false;
        }
        let ents = self.entities();
        let unique_e: BTreeSet<_> = ents.iter().collect();
        let unique_r: BTreeSet<_> = self.hops.iter().map(|t| &t.relation).collect();
        unique_e.len() == ents.len() && unique_r.len() == n
    }
}

pub fn is_chained(hops: &[Triple]) -> bool {
    hops.windows(2).all(|w| w[0].object == w[1].subject)
}

fn path_entities(hops: &[Triple]) -> Vec<EntityId> {
    let mut out = Vec::with_capacity(hops.len() + 1);
    if let Some(first) = hops.first() {
        out.push(first.subject.clone());
    }
    out.extend(hops.iter().map(|t| t.object.clone()));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathInstance {
    pub task: Task,
    pub factual: FactualPath,
    pub counterfactual: Vec<Triple>,
    pub original: Vec<Triple>,
    pub substituted: Vec<usize>,
}

impl PathInstance {
    pub fn hops(&self) -> usize {
        self.factual.len()
    }

    /// Structural invariants shared by every task.
    pub fn check(&self) -> Result<(), String> {
        let n = self.factual.len();
        if self.counterfactual.len() != n || self.original.len() != n {
            return Err("path lengths differ".into());
        }
        for i in 0..n {
            let r = &self.factual.hops[i].relation;
            if &self.counterfactual[i].relation != r || &self.original[i].relation != r {
                return Err(format!("relation mismatch at hop {i}"));
            }
        }
        if !is_chained(&self.counterfactual) {
            return Err("counterfactual path is not chained".into());
        }
        for &i in &self.substituted {
            if i >= n || self.counterfactual[i].object == self.original[i].object {
                return Err(format!("substitution at hop {i} is not a change"));
            }
        }
        let expected_subs = match self.task {
            Task::Qa => n == 1 && self.substituted == [0],
            Task::Mr => self.substituted.len() == 1,
            Task::Mc => self.substituted == (0..n).collect::<Vec<_>>(),
        };
        if !expected_subs {
            return Err(format!(
                "substituted indices {:?} invalid for {}",
                self.substituted, self.task
            ));
        }
        Ok(())
    }

    pub fn answer_cf(&self) -> &EntityId {
        &self.counterfactual.last().expect("non-empty path").object
    }

    pub fn answer_orig(&self) -> &EntityId {
        &self.factual.hops.last().expect("non-empty path").object
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("hop count {0} outside 1..=4")]
    InvalidHopCount(usize),
    #[error("graph has no triples")]
    EmptyGraph,
    #[error("no valid {0}-hop path in the graph")]
    NoPathAvailable(usize),
    #[error("no substitution candidate at hop {0}")]
    NoCandidate(usize),
    #[error("no factual continuation from any candidate at hop {0}")]
    NoContinuation(usize),
    #[error("counterfactual subject at hop {0} has no fact for the relation")]
    MissingFact(usize),
    #[error("path must have at least 2 hops for this task, got {0}")]
    PathTooShort(usize),
    #[error("hop index {0} out of range")]
    BadIndex(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Splitmix-style finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-item seed derived from a global seed and an index, independent of
/// the order in which items are processed.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// Every chain of `n` triples with no repeated entity or relation, in a
/// deterministic order (subjects and edges sorted).
pub fn valid_paths(g: &KnowledgeGraph, n: usize) -> Vec<FactualPath> {
    let mut out = Vec::new();
    if n == 0 || n > MAX_HOPS {
        return out;
    }
    let subjects: BTreeSet<&EntityId> = g.triples().iter().map(|t| &t.subject).collect();
    let mut stack: Vec<Triple> = Vec::with_capacity(n);
    for s in subjects {
        extend_paths(g, s, n, &mut stack, &mut out);
    }
    out
}

fn extend_paths(g: &KnowledgeGraph, current: &EntityId, n: usize, stack: &mut Vec<Triple>, out: &mut Vec<FactualPath>) {
    if stack.len() == n {
        out.push(FactualPath::new(stack.clone()));
        return;
    }
    for (r, t) in g.outgoing(current) {
        let repeats_relation = stack.iter().any(|h| &h.relation == r);
        let head = stack.first().map_or(current, |h| &h.subject);
        let repeats_entity = t == head || t == current || stack.iter().any(|h| &h.object == t);
        if repeats_relation || repeats_entity {
            continue;
        }
        stack.push(Triple {
            subject: current.clone(),
            relation: r.clone(),
            object: t.clone(),
        });
        extend_paths(g, t, n, stack, out);
        stack.pop();
    }
}

/// Caches the enumeration per hop count so repeated draws are cheap.
pub struct PathSampler<'g> {
    graph: &'g KnowledgeGraph,
    cache: BTreeMap<usize, Vec<FactualPath>>,
}

impl<'g> PathSampler<'g> {
    pub fn new(graph: &'g KnowledgeGraph) -> Self {
        Self {
            graph,
            cache: BTreeMap::new(),
        }
    }

    pub fn paths(&mut self, n: usize) -> &[FactualPath] {
        let g = self.graph;
        self.cache.entry(n).or_insert_with(|| valid_paths(g, n))
    }

    pub fn sample(&mut self, n: usize, seed: u64) -> Result<FactualPath, SamplerError> {
        if !(1..=MAX_HOPS).contains(&n) {
            return Err(SamplerError::InvalidHopCount(n));
        }
        if self.graph.is_empty() {
            return Err(SamplerError::EmptyGraph);
        }
        pick_path(self.paths(n), n, seed)
    }
}

/// Uniform seeded choice from a precomputed path list.
pub fn pick_path(paths: &[FactualPath], n: usize, seed: u64) -> Result<FactualPath, SamplerError> {
    if paths.is_empty() {
        return Err(SamplerError::NoPathAvailable(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(paths[rng.random_range(0..paths.len())].clone())
}

pub fn sample_factual_path(g: &KnowledgeGraph, n: usize, seed: u64) -> Result<FactualPath, SamplerError> {
    PathSampler::new(g).sample(n, seed)
}

pub fn same_type_candidates(
    g: &KnowledgeGraph,
    relation: &RelationId,
    exclude: &BTreeSet<EntityId>,
) -> Result<BTreeSet<EntityId>, SamplerError> {
    Ok(g.tails_of(relation)?.difference(exclude).cloned().collect())
}

/// True when some surface form of `a` occurs as a whole word inside some
/// surface form of `b` (case-insensitive).
fn form_inside(g: &KnowledgeGraph, a: &EntityId, b: &EntityId) -> bool {
    let (Ok(fa), Ok(fb)) = (g.surface_forms(a), g.surface_forms(b)) else {
        return true;
    };
    fa.iter().any(|x| fb.iter().any(|y| contains_word_ci(y, x)))
}

/// Rejects instances whose text could not be cleanly edited or labeled:
/// a replaced tail hiding inside another counterfactual entity's name, or
/// either answer hiding inside the other side's entities.
fn text_safe(g: &KnowledgeGraph, inst: &PathInstance) -> bool {
    let c_ents = path_entities(&inst.counterfactual);
    let f_ents = inst.factual.entities();
    for &i in &inst.substituted {
        let replaced = &inst.original[i].object;
        if c_ents.iter().any(|e| form_inside(g, replaced, e)) {
            return false;
        }
    }
    let a_cf = inst.answer_cf();
    let a_orig = inst.answer_orig();
    if f_ents.iter().any(|e| form_inside(g, a_cf, e)) {
        return false;
    }
    !c_ents.iter().any(|e| form_inside(g, a_orig, e))
}

pub fn counterfact_qa(g: &KnowledgeGraph, triple: &Triple, seed: u64) -> Result<PathInstance, SamplerError> {
    g.entity(&triple.subject)?;
    g.entity(&triple.object)?;
    let exclude: BTreeSet<EntityId> = [triple.subject.clone(), triple.object.clone()].into();
    let mut cands: Vec<EntityId> = same_type_candidates(g, &triple.relation, &exclude)?
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cands.shuffle(&mut rng);
    for c in cands {
        let inst = PathInstance {
            task: Task::Qa,
            factual: FactualPath::new(vec![triple.clone()]),
            counterfactual: vec![Triple {
                object: c,
                ..triple.clone()
            }],
            original: vec![triple.clone()],
            substituted: vec![0],
        };
        if text_safe(g, &inst) {
            return Ok(inst);
        }
    }
    Err(SamplerError::NoCandidate(0))
}

/// Multi-hop reasoning substitution: one hop index is chosen among those
/// that admit a valid replacement, then a candidate is drawn for it.
pub fn counterfact_mr(g: &KnowledgeGraph, path: &FactualPath, seed: u64) -> Result<PathInstance, SamplerError> {
    let n = path.len();
    if n < 2 {
        return Err(SamplerError::PathTooShort(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut first_err = None;
    for i in order {
        match counterfact_mr_at(g, path, i, rng.random()) {
            Ok(inst) => return Ok(inst),
            Err(e @ (SamplerError::NoCandidate(_) | SamplerError::NoContinuation(_))) => {
                // Prefer reporting a continuation failure over an empty pool.
                match (&first_err, &e) {
                    (None, _) | (Some(SamplerError::NoCandidate(_)), SamplerError::NoContinuation(_)) => {
                        first_err = Some(e)
                    }
                    _ => {}
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(first_err.unwrap_or(SamplerError::NoCandidate(0)))
}

/// Multi-hop reasoning substitution at a fixed hop index `i`.
pub fn counterfact_mr_at(
    g: &KnowledgeGraph,
    path: &FactualPath,
    i: usize,
    seed: u64,
) -> Result<PathInstance, SamplerError> {
    let n = path.len();
    if n < 2 {
        return Err(SamplerError::PathTooShort(n));
    }
    if i >= n {
        return Err(SamplerError::BadIndex(i));
    }
    let f_ents: BTreeSet<EntityId> = path.entities().into_iter().collect();
    let hop = &path.hops[i];
    let mut cands: Vec<EntityId> = same_type_candidates(g, &hop.relation, &f_ents)?.into_iter().collect();
    if cands.is_empty() {
        return Err(SamplerError::NoCandidate(i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cands.shuffle(&mut rng);
    for c in cands {
        let Some(suffix) = factual_continuation(g, path, i, &c, &f_ents) else {
            continue;
        };
        let mut counterfactual: Vec<Triple> = path.hops[..i].to_vec();
        counterfactual.push(Triple {
            object: c,
            ..hop.clone()
        });
        counterfactual.extend(suffix.iter().cloned());
        let mut original: Vec<Triple> = path.hops[..=i].to_vec();
        original.extend(suffix);
        let inst = PathInstance {
            task: Task::Mr,
            factual: path.clone(),
            counterfactual,
            original,
            substituted: vec![i],
        };
        if text_safe(g, &inst) {
            return Ok(inst);
        }
    }
    Err(SamplerError::NoContinuation(i))
}

/// Follows the path's relations after hop `i` starting at `start`, requiring
/// every fact to exist and every entity to be new.
fn factual_continuation(
    g: &KnowledgeGraph,
    path: &FactualPath,
    i: usize,
    start: &EntityId,
    f_ents: &BTreeSet<EntityId>,
) -> Option<Vec<Triple>> {
    let mut used: BTreeSet<EntityId> = [start.clone()].into();
    let mut cur = start.clone();
    let mut out = Vec::new();
    for hop in &path.hops[i + 1..] {
        let obj = g.object_of(&cur, &hop.relation)?;
        if used.contains(obj) || f_ents.contains(obj) {
            return None;
        }
        used.insert(obj.clone());
        out.push(Triple {
            subject: cur.clone(),
            relation: hop.relation.clone(),
            object: obj.clone(),
        });
        cur = obj.clone();
    }
    Some(out)
}

/// Multi-conflict substitution: every hop is replaced, chaining through the
/// counterfactual tails. Seeded depth-first search with backtracking.
pub fn counterfact_mc(g: &KnowledgeGraph, path: &FactualPath, seed: u64) -> Result<PathInstance, SamplerError> {
    let n = path.len();
    if n < 2 {
        return Err(SamplerError::PathTooShort(n));
    }
    let mut search = McSearch {
        g,
        path,
        f_ents: path.entities().into_iter().collect(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        counterfactual: Vec::new(),
        original: Vec::new(),
        deepest: None,
    };
    if let Some(inst) = search.step(0, path.head().clone()) {
        return Ok(inst);
    }
    Err(search.deepest.unwrap_or(SamplerError::NoCandidate(0)))
}

struct McSearch<'a> {
    g: &'a KnowledgeGraph,
    path: &'a FactualPath,
    f_ents: BTreeSet<EntityId>,
    rng: ChaCha8Rng,
    counterfactual: Vec<Triple>,
    original: Vec<Triple>,
    deepest: Option<SamplerError>,
}

impl McSearch<'_> {
    fn fail(&mut self, e: SamplerError, hop: usize) {
        let deeper = match &self.deepest {
            None => true,
            Some(SamplerError::NoCandidate(d) | SamplerError::MissingFact(d)) => hop >= *d,
            Some(_) => false,
        };
        if deeper {
            self.deepest = Some(e);
        }
    }

    fn step(&mut self, i: usize, subject: EntityId) -> Option<PathInstance> {
        let n = self.path.len();
        if i == n {
            let inst = PathInstance {
                task: Task::Mc,
                factual: self.path.clone(),
                counterfactual: self.counterfactual.clone(),
                original: self.original.clone(),
                substituted: (0..n).collect(),
            };
            return text_safe(self.g, &inst).then_some(inst);
        }
        let relation = self.path.hops[i].relation.clone();
        let t_orig = if i == 0 {
            self.path.hops[0].object.clone()
        } else {
            match self.g.object_of(&subject, &relation) {
                Some(t) => t.clone(),
                None => {
                    self.fail(SamplerError::MissingFact(i), i);
                    return None;
                }
            }
        };
        // Entities already placed in either path may not reappear.
        let mut used: BTreeSet<EntityId> = self.f_ents.clone();
        used.insert(subject.clone());
        used.insert(t_orig.clone());
        for t in self.counterfactual.iter().chain(self.original.iter()) {
            used.insert(t.subject.clone());
            used.insert(t.object.clone());
        }
        let clashes = self.original.iter().any(|t| t.object == t_orig)
            || self
                .counterfactual
                .iter()
                .any(|t| t.subject == t_orig || t.object == t_orig);
        if clashes {
            self.fail(SamplerError::MissingFact(i), i);
            return None;
        }
        let mut cands: Vec<EntityId> = match same_type_candidates(self.g, &relation, &used) {
            Ok(c) => c.into_iter().collect(),
            Err(_) => Vec::new(),
        };
        if cands.is_empty() {
            self.fail(SamplerError::NoCandidate(i), i);
            return None;
        }
        cands.shuffle(&mut self.rng);
        self.original.push(Triple {
            subject: subject.clone(),
            relation: relation.clone(),
            object: t_orig,
        });
        for c in cands {
            self.counterfactual.push(Triple {
                subject: subject.clone(),
                relation: relation.clone(),
                object: c.clone(),
            });
            if let Some(found) = self.step(i + 1, c) {
                return Some(found);
            }
            self.counterfactual.pop();
        }
        self.original.pop();
        None
    }
}

/// Hop count for the `index`-th instance of a task: QA is single-hop, the
/// multi-hop tasks cycle through 2, 3 and 4.
pub fn hops_for(task: Task, index: usize) -> usize {
    match task {
        Task::Qa => 1,
        Task::Mr | Task::Mc => 2 + index % 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Entity, Relation};
    use proptest::prelude::*;

    fn rel(id: &str) -> Relation {
        Relation::new(id, id, format!("[subject] {id} [target]"), format!("{id} of"))
    }

    fn graph(ents: &[&str], rels: &[&str], triples: &[(&str, &str, &str)]) -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            ents.iter().map(|e| Entity::new(*e, format!("Ent{e}"))).collect(),
            rels.iter().map(|r| rel(r)).collect(),
            triples.iter().map(|(s, r, o)| Triple::new(*s, *r, *o)).collect(),
        )
        .unwrap()
    }

    /// Brute force over ordered n-tuples of triples.
    fn oracle_paths(g: &KnowledgeGraph, n: usize) -> BTreeSet<Vec<Triple>> {
        let ts = g.triples();
        let mut acc: Vec<Vec<Triple>> = ts.iter().map(|t| vec![t.clone()]).collect();
        for _ in 1..n {
            let mut next = Vec::new();
            for p in &acc {
                for t in ts {
                    let mut q = p.clone();
                    q.push(t.clone());
                    next.push(q);
                }
            }
            acc = next;
        }
        acc.into_iter()
            .filter(|p| FactualPath::new(p.clone()).is_valid())
            .collect()
    }

    #[test]
    fn chain_graph_paths() {
        let g = graph(&["A", "B", "C"], &["r1", "r2"], &[("A", "r1", "B"), ("B", "r2", "C")]);
        let p = sample_factual_path(&g, 2, 3).unwrap();
        assert_eq!(p.hops, vec![Triple::new("A", "r1", "B"), Triple::new("B", "r2", "C")]);
        assert!(matches!(
            sample_factual_path(&g, 3, 3),
            Err(SamplerError::NoPathAvailable(3))
        ));
        assert!(matches!(
            sample_factual_path(&g, 5, 3),
            Err(SamplerError::InvalidHopCount(5))
        ));
    }

    #[test]
    fn enumeration_matches_oracle_on_cyclic_graph() {
        let g = graph(
            &["A", "B", "C", "D"],
            &["r1", "r2", "r3"],
            &[
                ("A", "r1", "B"),
                ("B", "r2", "C"),
                ("C", "r3", "A"),
                ("C", "r1", "D"),
                ("B", "r1", "A"),
                ("D", "r2", "B"),
            ],
        );
        for n in 1..=4 {
            let got: BTreeSet<Vec<Triple>> = valid_paths(&g, n).into_iter().map(|p| p.hops).collect();
            assert_eq!(got, oracle_paths(&g, n), "n={n}");
        }
    }

    #[test]
    fn candidates_subtract_exclusions() {
        let g = graph(
            &["US", "FR", "CA", "DC", "Paris", "Ottawa"],
            &["P36"],
            &[("US", "P36", "DC"), ("FR", "P36", "Paris"), ("CA", "P36", "Ottawa")],
        );
        let got = same_type_candidates(&g, &RelationId::new("P36"), &[EntityId::new("DC")].into()).unwrap();
        assert_eq!(got, [EntityId::new("Paris"), EntityId::new("Ottawa")].into());
        let all = g.tails_of(&RelationId::new("P36")).unwrap();
        assert!(same_type_candidates(&g, &RelationId::new("P36"), &all)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn qa_substitution_and_determinism() {
        let g = graph(
            &["K", "EU", "SA", "AS", "L", "B"],
            &["P30"],
            &[("K", "P30", "EU"), ("L", "P30", "SA"), ("B", "P30", "AS")],
        );
        let t = Triple::new("K", "P30", "EU");
        let a = counterfact_qa(&g, &t, 11).unwrap();
        let b = counterfact_qa(&g, &t, 11).unwrap();
        assert_eq!(a, b);
        a.check().unwrap();
        assert!(["SA", "AS"].contains(&a.counterfactual[0].object.as_str()));

        let lonely = graph(&["K", "EU"], &["P30"], &[("K", "P30", "EU")]);
        assert!(matches!(
            counterfact_qa(&lonely, &t, 1),
            Err(SamplerError::NoCandidate(0))
        ));
    }

    #[test]
    fn mr_last_hop_only_swaps_tail() {
        let g = graph(
            &["A", "B", "C", "D", "X"],
            &["r1", "r2"],
            &[("A", "r1", "B"), ("B", "r2", "C"), ("X", "r2", "D")],
        );
        let path = FactualPath::new(vec![Triple::new("A", "r1", "B"), Triple::new("B", "r2", "C")]);
        let inst = counterfact_mr_at(&g, &path, 1, 0).unwrap();
        assert_eq!(
            inst.counterfactual,
            vec![Triple::new("A", "r1", "B"), Triple::new("B", "r2", "D")]
        );
        assert_eq!(inst.original, path.hops);
        inst.check().unwrap();
    }

    #[test]
    fn mr_without_continuation() {
        // Hop 0 candidate Y has no r2 edge; hop 1 has no candidate at all.
        let g = graph(
            &["A", "B", "C", "Y", "Z"],
            &["r1", "r2"],
            &[("A", "r1", "B"), ("B", "r2", "C"), ("Z", "r1", "Y")],
        );
        let path = FactualPath::new(vec![Triple::new("A", "r1", "B"), Triple::new("B", "r2", "C")]);
        assert!(matches!(
            counterfact_mr(&g, &path, 4),
            Err(SamplerError::NoContinuation(0))
        ));
    }

    #[test]
    fn mc_singleton_pools() {
        let g = graph(&["A", "B", "C"], &["r1", "r2"], &[("A", "r1", "B"), ("B", "r2", "C")]);
        let path = FactualPath::new(g.triples().to_vec());
        assert!(matches!(
            counterfact_mc(&g, &path, 0),
            Err(SamplerError::NoCandidate(0))
        ));
    }

    #[test]
    fn mc_missing_fact() {
        // The only hop-0 replacement has no r2 fact.
        let g = graph(
            &["A", "B", "C", "Q", "W"],
            &["r1", "r2"],
            &[("A", "r1", "B"), ("B", "r2", "C"), ("Q", "r1", "W")],
        );
        let path = FactualPath::new(vec![Triple::new("A", "r1", "B"), Triple::new("B", "r2", "C")]);
        assert!(matches!(
            counterfact_mc(&g, &path, 0),
            Err(SamplerError::MissingFact(1))
        ));
    }

    #[test]
    fn hop_policy() {
        assert_eq!(hops_for(Task::Qa, 5), 1);
        let hs: Vec<usize> = (0..6).map(|i| hops_for(Task::Mc, i)).collect();
        assert_eq!(hs, vec![2, 3, 4, 2, 3, 4]);
    }

    #[test]
    fn seed_mixing_is_stable() {
        assert_eq!(mix_seed(7, 3), mix_seed(7, 3));
        assert_ne!(mix_seed(7, 3), mix_seed(7, 4));
        assert_ne!(mix_seed(7, 3), mix_seed(8, 3));
    }

    fn random_graph(edges: &[(u8, u8, u8)]) -> KnowledgeGraph {
        let mut seen = BTreeSet::new();
        let triples: Vec<(String, String, String)> = edges
            .iter()
            .filter(|(s, r, o)| s != o && seen.insert((*s, *r)))
            .map(|(s, r, o)| (format!("e{s}"), format!("r{r}"), format!("e{o}")))
            .collect();
        KnowledgeGraph::from_parts(
            (0..8)
                .map(|i| Entity::new(format!("e{i}"), format!("Node{i}")))
                .collect(),
            (0..4).map(|i| rel(&format!("r{i}"))).collect(),
            triples.iter().map(|(s, r, o)| Triple::new(s, r, o)).collect(),
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sampled_paths_belong_to_oracle(
            edges in proptest::collection::vec((0u8..8, 0u8..4, 0u8..8), 1..30),
            n in 1usize..=3,
            seed in any::<u64>(),
        ) {
            let g = random_graph(&edges);
            prop_assume!(!g.is_empty());
            let oracle = oracle_paths(&g, n);
            match sample_factual_path(&g, n, seed) {
                Ok(p) => prop_assert!(oracle.contains(&p.hops)),
                Err(SamplerError::NoPathAvailable(_)) => prop_assert!(oracle.is_empty()),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn substitutions_keep_invariants(
            edges in proptest::collection::vec((0u8..8, 0u8..4, 0u8..8), 4..30),
            seed in any::<u64>(),
        ) {
            let g = random_graph(&edges);
            for n in 2..=3 {
                let Ok(path) = sample_factual_path(&g, n, seed) else { continue };
                for inst in [counterfact_mr(&g, &path, seed), counterfact_mc(&g, &path, seed)]
                    .into_iter()
                    .flatten()
                {
                    prop_assert!(inst.check().is_ok(), "{:?}", inst.check());
                    for i in &inst.substituted {
                        prop_assert_ne!(&inst.counterfactual[*i].object, &inst.original[*i].object);
                    }
                    let f: BTreeSet<_> = inst.factual.entities().into_iter().collect();
                    prop_assert!(!f.contains(inst.answer_cf()));
                }
            }
        }
    }
}

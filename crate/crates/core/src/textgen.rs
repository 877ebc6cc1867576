//! Statements, questions, contexts and reasoning chains rendered from triples,
//! plus counterfactual context editing.

use serde::{Deserialize, Serialize};

use crate::client::{ChatMessage, ClientError, CompletionRequest, ModelClient};
use crate::kg::{Entity, GraphError, KnowledgeGraph, Triple, SUBJECT_SLOT, TARGET_SLOT};
use crate::sampler::{FactualPath, PathInstance};
use crate::text::{boundary_after, boundary_before, contains_form, match_form_at};

pub const CONTEXT_PROMPT: &str = "Considering {facts}, generate a brief description of the entity: {head}, approximately 100 words long. Ensure that {tail} is accurately mentioned in the description.";

pub const QUESTION_PROMPT: &str = "You are a sophisticated {hop_num}-hop question generator. Given a chain of Wikidata triples, generate a question that asks about the final tail entity ({tail}) in the chain using only the starting head entity ({head}). Do not include any bridge entities in the question; instead, phrase the question as if directly asking about the relationship from the head entity to the tail entity.";

#[derive(Debug, thiserror::Error)]
pub enum TextGenError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("model client failed: {0}")]
    Client(#[from] ClientError),
    #[error("generated context never mentioned `{0}`")]
    TailMissingAfterRetries(String),
    #[error("generated question leaked a bridge entity or failed validation: {0}")]
    BridgeLeak(String),
    #[error("counterfactual context still mentions `{0}`")]
    ResidualSurfaceForm(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatementText {
    pub text: String,
    pub source_triple: Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextDoc {
    pub factual: String,
    pub counterfactual: String,
    pub factual_segments: Vec<String>,
    pub counterfactual_segments: Vec<String>,
    pub provenance: Provenance,
    /// The original-path triples the segments were generated from.
    pub source: Vec<Triple>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedQuestion {
    pub text: String,
    pub path: Vec<Triple>,
    pub provenance: Provenance,
}

pub fn render_statement(g: &KnowledgeGraph, triple: &Triple) -> Result<StatementText, GraphError> {
    let rel = g.relation(&triple.relation)?;
    if !rel.has_valid_template() {
        return Err(GraphError::MissingPlaceholder(rel.id.clone()));
    }
    let s = g.label(&triple.subject)?;
    let t = g.label(&triple.object)?;
    Ok(StatementText {
        text: rel.template.replace(SUBJECT_SLOT, s).replace(TARGET_SLOT, t),
        source_triple: triple.clone(),
    })
}

fn sentence(s: &str) -> String {
    if s.ends_with('.') {
        s.to_string()
    } else {
        format!("{s}.")
    }
}

/// Statements in hop order followed by the final-answer sentence.
pub fn build_reasoning_chain(
    g: &KnowledgeGraph,
    triples: &[Triple],
    final_answer_label: &str,
) -> Result<String, GraphError> {
    let mut parts = Vec::with_capacity(triples.len() + 1);
    for t in triples {
        parts.push(sentence(&render_statement(g, t)?.text));
    }
    parts.push(format!("So the final answer is {final_answer_label}."));
    Ok(parts.join(" "))
}

/// Replaces every surface form of `old` with the matching form of `new`.
///
/// Forms are tried longest-first at word boundaries. The first character of
/// a match is compared case-insensitively and its case is carried over to
/// the replacement.
pub fn edit_context(text: &str, old: &Entity, new: &Entity) -> String {
    let pairs = replacement_pairs(old, new);
    let mut out = String::with_capacity(text.len());
    let mut pos = 0;
    while pos < text.len() {
        if boundary_before(text, pos) {
            let rest = &text[pos..];
            let hit = pairs.iter().find_map(|(form, repl)| {
                match_form_at(rest, form)
                    .filter(|len| boundary_after(text, pos + len))
                    .map(|len| (len, repl))
            });
            if let Some((len, repl)) = hit {
                out.push_str(&carry_case(&rest[..len], repl));
                pos += len;
                continue;
            }
        }
        let c = text[pos..].chars().next().expect("pos on char boundary");
        out.push(c);
        pos += c.len_utf8();
    }
    out
}

fn replacement_pairs(old: &Entity, new: &Entity) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = vec![(old.label.clone(), new.label.clone())];
    for a in &old.aliases {
        pairs.push((a.clone(), new.label.clone()));
    }
    for (k, v) in old.variants.iter().enumerate() {
        let repl = new.variants.get(k).unwrap_or(&new.label);
        pairs.push((v.clone(), repl.clone()));
    }
    let mut seen = std::collections::BTreeSet::new();
    pairs.retain(|(f, _)| !f.is_empty() && seen.insert(f.clone()));
    pairs.sort_by_key(|(f, _)| std::cmp::Reverse(f.chars().count()));
    pairs
}

fn carry_case(matched: &str, repl: &str) -> String {
    let (Some(m0), Some(r0)) = (matched.chars().next(), repl.chars().next()) else {
        return repl.to_string();
    };
    let rest = &repl[r0.len_utf8()..];
    if m0.is_lowercase() && r0.is_uppercase() {
        r0.to_lowercase().chain(rest.chars()).collect()
    } else if m0.is_uppercase() && r0.is_lowercase() {
        r0.to_uppercase().chain(rest.chars()).collect()
    } else {
        repl.to_string()
    }
}

/// Whether any surface form of `e` occurs in `text` under the editor's
/// matching rule.
pub fn mentions(text: &str, e: &Entity) -> bool {
    e.surface_forms().iter().any(|f| contains_form(text, f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextGenOptions {
    pub model: String,
    /// Attempts per model call before falling back.
    pub llm_attempts: u32,
    pub allow_fallback: bool,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for TextGenOptions {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            llm_attempts: 3,
            allow_fallback: true,
            max_tokens: 256,
            temperature: 0.7,
        }
    }
}

/// Generates contexts and questions, with an optional model client. Without
/// a client every output comes from the deterministic fallback.
pub struct TextGenerator<'a> {
    client: Option<&'a dyn ModelClient>,
    opts: TextGenOptions,
}

impl<'a> TextGenerator<'a> {
    pub fn fallback() -> Self {
        Self {
            client: None,
            opts: TextGenOptions::default(),
        }
    }

    pub fn with_client(client: &'a dyn ModelClient, opts: TextGenOptions) -> Self {
        Self {
            client: Some(client),
            opts,
        }
    }

    pub fn options(&self) -> &TextGenOptions {
        &self.opts
    }

    fn ask(&self, client: &dyn ModelClient, messages: Vec<ChatMessage>) -> Result<String, ClientError> {
        let mut req = CompletionRequest::new(self.opts.model.clone(), messages);
        req.max_tokens = self.opts.max_tokens;
        req.temperature = self.opts.temperature;
        client.complete(&req).map(|c| c.text.trim().to_string())
    }

    /// A short description of `head` that states `triple`.
    pub fn entity_context(
        &self,
        g: &KnowledgeGraph,
        head: &Entity,
        triple: &Triple,
    ) -> Result<(String, Provenance), TextGenError> {
        let statement = render_statement(g, triple)?;
        let tail = g.entity(&triple.object)?;
        let Some(client) = self.client else {
            return Ok((fallback_context(&statement.text, &head.label), Provenance::Fallback));
        };
        let prompt = CONTEXT_PROMPT
            .replace("{facts}", &statement.text)
            .replace("{head}", &head.label)
            .replace("{tail}", &tail.label);
        let mut last_err = None;
        for _ in 0..self.opts.llm_attempts.max(1) {
            match self.ask(client, vec![ChatMessage::user(prompt.clone())]) {
                Ok(text) if contains_form(&text, &tail.label) => return Ok((text, Provenance::Llm)),
                Ok(_) => last_err = Some(TextGenError::TailMissingAfterRetries(tail.label.clone())),
                Err(e) => last_err = Some(TextGenError::Client(e)),
            }
        }
        if self.opts.allow_fallback {
            return Ok((fallback_context(&statement.text, &head.label), Provenance::Fallback));
        }
        Err(last_err.expect("at least one attempt"))
    }

    pub fn question(&self, g: &KnowledgeGraph, path: &FactualPath) -> Result<GeneratedQuestion, TextGenError> {
        let head = g.entity(path.head())?;
        let bridges: Vec<&Entity> = path.hops[..path.len() - 1]
            .iter()
            .map(|t| g.entity(&t.object))
            .collect::<Result<_, _>>()?;
        let fallback = |g: &KnowledgeGraph| -> Result<GeneratedQuestion, TextGenError> {
            Ok(GeneratedQuestion {
                text: fallback_question(g, path)?,
                path: path.hops.clone(),
                provenance: Provenance::Fallback,
            })
        };
        let Some(client) = self.client else {
            return fallback(g);
        };
        let tail = g.label(&path.hops[path.len() - 1].object)?;
        let system = QUESTION_PROMPT
            .replace("{hop_num}", &path.len().to_string())
            .replace("{tail}", tail)
            .replace("{head}", &head.label);
        let mut chain = Vec::new();
        for t in &path.hops {
            chain.push(format!(
                "({}, {}, {})",
                g.label(&t.subject)?,
                g.relation(&t.relation)?.label,
                g.label(&t.object)?
            ));
        }
        let user = chain.join(", ");
        let mut last_err = None;
        for _ in 0..self.opts.llm_attempts.max(1) {
            match self.ask(
                client,
                vec![ChatMessage::system(system.clone()), ChatMessage::user(user.clone())],
            ) {
                Ok(q) => match validate_question(&q, head, &bridges) {
                    Ok(()) => {
                        return Ok(GeneratedQuestion {
                            text: q,
                            path: path.hops.clone(),
                            provenance: Provenance::Llm,
                        })
                    }
                    Err(why) => last_err = Some(TextGenError::BridgeLeak(why)),
                },
                Err(e) => last_err = Some(TextGenError::Client(e)),
            }
        }
        if self.opts.allow_fallback {
            return fallback(g);
        }
        Err(last_err.expect("at least one attempt"))
    }

    /// Contexts for every hop of the original path, and their counterfactual
    /// edits.
    pub fn compose_context(&self, g: &KnowledgeGraph, inst: &PathInstance) -> Result<ContextDoc, TextGenError> {
        let mut factual_segments = Vec::with_capacity(inst.original.len());
        let mut all_llm = true;
        for t in &inst.original {
            let head = g.entity(&t.subject)?;
            let (seg, prov) = self.entity_context(g, head, t)?;
            all_llm &= prov == Provenance::Llm;
            factual_segments.push(seg);
        }
        let mut counterfactual_segments = factual_segments.clone();
        for &i in &inst.substituted {
            let old = g.entity(&inst.original[i].object)?;
            let new = g.entity(&inst.counterfactual[i].object)?;
            counterfactual_segments[i] = edit_context(&counterfactual_segments[i], old, new);
        }
        let doc = ContextDoc {
            factual: factual_segments.join("\n\n"),
            counterfactual: counterfactual_segments.join("\n\n"),
            factual_segments,
            counterfactual_segments,
            provenance: if all_llm { Provenance::Llm } else { Provenance::Fallback },
            source: inst.original.clone(),
        };
        verify_context(g, inst, &doc)?;
        Ok(doc)
    }
}

/// The counterfactual context must name every substituted tail and must not
/// mention any replaced one.
pub fn verify_context(g: &KnowledgeGraph, inst: &PathInstance, doc: &ContextDoc) -> Result<(), TextGenError> {
    for &i in &inst.substituted {
        let old = g.entity(&inst.original[i].object)?;
        let new = g.entity(&inst.counterfactual[i].object)?;
        if let Some(f) = old
            .surface_forms()
            .into_iter()
            .find(|f| contains_form(&doc.counterfactual, f))
        {
            return Err(TextGenError::ResidualSurfaceForm(f));
        }
        if !mentions(&doc.counterfactual_segments[i], new) {
            return Err(TextGenError::TailMissingAfterRetries(new.label.clone()));
        }
    }
    Ok(())
}

pub fn fallback_context(statement: &str, head_label: &str) -> String {
    format!(
        "{} {head_label} is described in many reference works. Additional background on {head_label} is widely documented.",
        sentence(statement)
    )
}

/// "What is the" + question phrases from the last hop inwards + head label.
pub fn fallback_question(g: &KnowledgeGraph, path: &FactualPath) -> Result<String, GraphError> {
    let mut phrases = Vec::with_capacity(path.len());
    for t in path.hops.iter().rev() {
        phrases.push(g.relation(&t.relation)?.question_phrase.trim().to_string());
    }
    let head = g.label(path.head())?;
    Ok(format!("What is the {} {head}?", phrases.join(" the ")))
}

fn validate_question(q: &str, head: &Entity, bridges: &[&Entity]) -> Result<(), String> {
    if !q.trim_end().ends_with('?') {
        return Err("question does not end with '?'".into());
    }
    if !mentions(q, head) {
        return Err(format!("question omits head `{}`", head.label));
    }
    if let Some(b) = bridges.iter().find(|b| mentions(q, b)) {
        return Err(format!("question mentions bridge `{}`", b.label));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::MockClient;
    use crate::kg::{EntityId, Relation};
    use crate::sampler::Task;
    use proptest::prelude::*;

    fn g() -> KnowledgeGraph {
        KnowledgeGraph::from_parts(
            vec![
                Entity::new("US", "United States")
                    .with_aliases(["USA"])
                    .with_variants(["American"]),
                Entity::new("DC", "Washington, D.C."),
                Entity::new("X", "X"),
                Entity::new("Y", "Y"),
                Entity::new("Kyiv", "Kyiv"),
                Entity::new("EU", "Europe"),
                Entity::new("SA", "South America"),
                Entity::new("IN", "India").with_variants(["Indian"]),
                Entity::new("INR", "Indian rupee"),
            ],
            vec![
                Relation::new("P36", "capital", "The capital of [subject] is [target]", "capital of"),
                Relation::new(
                    "P27",
                    "country of citizenship",
                    "[subject] is a citizen of [target]",
                    "country of citizenship of",
                ),
                Relation::new(
                    "P30",
                    "continent",
                    "[subject] is located in the continent of [target]",
                    "continent of",
                ),
                Relation::new("P38", "currency", "[subject]'s currency is [target]", "currency of"),
            ],
            vec![
                Triple::new("US", "P36", "DC"),
                Triple::new("X", "P27", "Y"),
                Triple::new("Kyiv", "P30", "EU"),
                Triple::new("IN", "P38", "INR"),
            ],
        )
        .unwrap()
    }

    #[test]
    fn statements() {
        let g = g();
        assert_eq!(
            render_statement(&g, &Triple::new("US", "P36", "DC")).unwrap().text,
            "The capital of United States is Washington, D.C."
        );
        assert_eq!(
            render_statement(&g, &Triple::new("X", "P27", "Y")).unwrap().text,
            "X is a citizen of Y"
        );
    }

    #[test]
    fn reasoning_chain_single_hop() {
        let g = KnowledgeGraph::from_parts(
            vec![Entity::new("Kyiv", "Kyiv"), Entity::new("SA", "South America")],
            vec![Relation::new(
                "P30",
                "continent",
                "[subject] is located in the continent of [target]",
                "continent of",
            )],
            vec![Triple::new("Kyiv", "P30", "SA")],
        )
        .unwrap();
        let chain = build_reasoning_chain(&g, &[Triple::new("Kyiv", "P30", "SA")], "South America").unwrap();
        assert_eq!(
            chain,
            "Kyiv is located in the continent of South America. So the final answer is South America."
        );
    }

    #[test]
    fn edit_handles_variants_and_case() {
        let india = Entity::new("IN", "India").with_variants(["Indian"]);
        let usa = Entity::new("US", "United States of America").with_variants(["American"]);
        assert_eq!(
            edit_context("Gully Boy is a 2019 Indian Hindi-language film.", &india, &usa),
            "Gully Boy is a 2019 American Hindi-language film."
        );
        assert_eq!(edit_context("nothing here", &india, &usa), "nothing here");
        let lower = Entity::new("g", "genre film");
        let upper = Entity::new("h", "Action film");
        assert_eq!(edit_context("Genre film fans", &lower, &upper), "Action film fans");
        assert_eq!(edit_context("a genre film", &upper, &lower), "a genre film");
        assert_eq!(edit_context("an action film", &upper, &lower), "an genre film");
    }

    #[test]
    fn edit_respects_word_boundaries() {
        let us = Entity::new("US", "US");
        let fr = Entity::new("FR", "France");
        assert_eq!(edit_context("USSR and US", &us, &fr), "USSR and France");
    }

    #[test]
    fn kyiv_edit() {
        let text = "Kyiv is the capital and largest city of Ukraine, located in the northwestern part of the continent of Europe. With a population of over 3 million people, Kyiv is a bustling metropolis.";
        let eu = Entity::new("EU", "Europe");
        let sa = Entity::new("SA", "South America");
        let out = edit_context(text, &eu, &sa);
        assert!(out.contains("continent of South America. With"));
        assert!(!out.contains("Europe"));
    }

    #[test]
    fn fallback_is_deterministic_and_mentions_tail() {
        let g = g();
        let gen = TextGenerator::fallback();
        let kyiv = g.entity(&EntityId::new("Kyiv")).unwrap().clone();
        let (a, p) = gen
            .entity_context(&g, &kyiv, &Triple::new("Kyiv", "P30", "EU"))
            .unwrap();
        let (b, _) = gen
            .entity_context(&g, &kyiv, &Triple::new("Kyiv", "P30", "EU"))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(p, Provenance::Fallback);
        assert!(a.contains("Kyiv") && a.contains("Europe"));
    }

    #[test]
    fn llm_context_is_used_when_tail_present() {
        let g = g();
        let paragraph = "India is a country in South Asia. The official currency of India is the Indian rupee.";
        let mock = MockClient::scripted(move |_| Ok(paragraph.to_string()));
        let gen = TextGenerator::with_client(&mock, TextGenOptions::default());
        let india = g.entity(&EntityId::new("IN")).unwrap();
        let (text, prov) = gen.entity_context(&g, india, &Triple::new("IN", "P38", "INR")).unwrap();
        assert_eq!(text, paragraph);
        assert_eq!(prov, Provenance::Llm);
    }

    #[test]
    fn llm_context_falls_back_after_misses() {
        let g = g();
        let mock = MockClient::sequence(vec![Ok("Nothing useful.".into()), Ok("Still nothing.".into())]);
        let opts = TextGenOptions {
            llm_attempts: 2,
            ..TextGenOptions::default()
        };
        let gen = TextGenerator::with_client(&mock, opts.clone());
        let kyiv = g.entity(&EntityId::new("Kyiv")).unwrap();
        let (text, prov) = gen.entity_context(&g, kyiv, &Triple::new("Kyiv", "P30", "EU")).unwrap();
        assert_eq!(prov, Provenance::Fallback);
        assert_eq!(
            text,
            fallback_context("Kyiv is located in the continent of Europe", "Kyiv")
        );
        assert_eq!(mock.calls(), 2);

        let strict_mock = MockClient::sequence(vec![Ok("no".into()), Ok("no".into())]);
        let strict = TextGenerator::with_client(
            &strict_mock,
            TextGenOptions {
                allow_fallback: false,
                ..opts
            },
        );
        assert!(matches!(
            strict.entity_context(&g, kyiv, &Triple::new("Kyiv", "P30", "EU")),
            Err(TextGenError::TailMissingAfterRetries(_))
        ));
    }

    #[test]
    fn context_prompt_is_filled() {
        let g = g();
        let seen = std::sync::Arc::new(std::sync::Mutex::new(String::new()));
        let s2 = seen.clone();
        let mock = MockClient::scripted(move |req| {
            *s2.lock().unwrap() = req.prompt_key();
            Ok("Kyiv lies in Europe.".into())
        });
        let gen = TextGenerator::with_client(&mock, TextGenOptions::default());
        let kyiv = g.entity(&EntityId::new("Kyiv")).unwrap();
        gen.entity_context(&g, kyiv, &Triple::new("Kyiv", "P30", "EU")).unwrap();
        assert_eq!(
            *seen.lock().unwrap(),
            "Considering Kyiv is located in the continent of Europe, generate a brief description of the entity: Kyiv, approximately 100 words long. Ensure that Europe is accurately mentioned in the description."
        );
    }

    fn two_hop() -> (KnowledgeGraph, FactualPath) {
        let g = KnowledgeGraph::from_parts(
            vec![
                Entity::new("BM", "Bobby Moore"),
                Entity::new("UK", "United Kingdom"),
                Entity::new("C3", "Charles III"),
            ],
            vec![
                Relation::new(
                    "P27",
                    "country of citizenship",
                    "[subject] is a citizen of [target]",
                    "country of citizenship of",
                ),
                Relation::new(
                    "P35",
                    "head of state",
                    "The name of the current head of state in [subject] is [target]",
                    "head of state of",
                ),
            ],
            vec![Triple::new("BM", "P27", "UK"), Triple::new("UK", "P35", "C3")],
        )
        .unwrap();
        let p = FactualPath::new(g.triples().to_vec());
        (g, p)
    }

    #[test]
    fn fallback_question_composition() {
        let (g, p) = two_hop();
        assert_eq!(
            fallback_question(&g, &p).unwrap(),
            "What is the head of state of the country of citizenship of Bobby Moore?"
        );
    }

    #[test]
    fn llm_question_validation() {
        let (g, p) = two_hop();
        let good = "Who is the head of state of the country where Bobby Moore holds citizenship?";
        let mock = MockClient::sequence(vec![
            Ok("Who is the head of state of the United Kingdom, home of Bobby Moore?".into()),
            Ok(good.into()),
        ]);
        let gen = TextGenerator::with_client(&mock, TextGenOptions::default());
        let q = gen.question(&g, &p).unwrap();
        assert_eq!(q.text, good);
        assert_eq!(q.provenance, Provenance::Llm);

        let leaky = MockClient::scripted(|_| Ok("Who rules the United Kingdom for Bobby Moore?".into()));
        let strict = TextGenerator::with_client(
            &leaky,
            TextGenOptions {
                allow_fallback: false,
                ..TextGenOptions::default()
            },
        );
        assert!(matches!(strict.question(&g, &p), Err(TextGenError::BridgeLeak(_))));
    }

    #[test]
    fn question_prompt_slots() {
        let (g, p) = two_hop();
        let seen = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
        let s2 = seen.clone();
        let mock = MockClient::scripted(move |req| {
            *s2.lock().unwrap() = req.messages.clone();
            Ok("Who leads the country of Bobby Moore?".into())
        });
        TextGenerator::with_client(&mock, TextGenOptions::default())
            .question(&g, &p)
            .unwrap();
        let msgs = seen.lock().unwrap().clone();
        assert!(msgs[0]
            .content
            .starts_with("You are a sophisticated 2-hop question generator."));
        assert!(msgs[0].content.contains("final tail entity (Charles III)"));
        assert!(msgs[0].content.contains("starting head entity (Bobby Moore)"));
        assert_eq!(
            msgs[1].content,
            "(Bobby Moore, country of citizenship, United Kingdom), (United Kingdom, head of state, Charles III)"
        );
    }

    #[test]
    fn compose_qa_context() {
        let g = KnowledgeGraph::from_parts(
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
        .unwrap();
        let inst = crate::sampler::counterfact_qa(&g, &Triple::new("Kyiv", "P30", "EU"), 0).unwrap();
        assert_eq!(inst.task, Task::Qa);
        let doc = TextGenerator::fallback().compose_context(&g, &inst).unwrap();
        assert_eq!(doc.factual_segments.len(), 1);
        assert!(doc.counterfactual.contains("continent of South America"));
        assert!(!doc.counterfactual.contains("Europe"));
        assert_eq!(doc.provenance, Provenance::Fallback);
    }

    fn words() -> impl Strategy<Value = String> {
        let pool = prop_oneof![
            Just("India".to_string()),
            Just("Indian".to_string()),
            Just("india".to_string()),
            Just("the".to_string()),
            Just("film".to_string()),
            Just("Indiana".to_string()),
            Just("rupee,".to_string()),
            Just("(India)".to_string()),
            Just("Bharat".to_string()),
        ];
        proptest::collection::vec(pool, 0..25).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn edit_is_idempotent_and_reversible(text in words()) {
            let india = Entity::new("IN", "India").with_aliases(["Bharat"]).with_variants(["Indian"]);
            let usa = Entity::new("US", "United States of America").with_variants(["American"]);
            let once = edit_context(&text, &india, &usa);
            prop_assert_eq!(edit_context(&once, &india, &usa), once.clone());
            prop_assert!(!mentions(&once, &india));
            // Reverse edit restores the text when no alias was collapsed.
            if !text.contains("Bharat") {
                let label_only = Entity::new("IN", "India").with_variants(["Indian"]);
                prop_assert_eq!(edit_context(&once, &usa, &label_only), text);
            }
        }
    }
}

//! Response labeling, metric aggregation, prompt styles and evaluation runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::{ClientError, CompletionRequest, ModelClient};
use crate::dataset::{Answer, PromptScaffold, TaskInstance};
use crate::parallel::parallel_map;

pub const NEGATION_CUES: &[&str] = &[
    "no",
    "not",
    "never",
    "isn't",
    "aren't",
    "wasn't",
    "weren't",
    "doesn't",
    "didn't",
    "cannot",
    "no longer",
    "incorrect",
    "false",
    "rather than",
    "instead of",
];

pub const NEGATION_WINDOW_CHARS: usize = 30;

const ARTICLES: &[&str] = &["a", "an", "the"];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no records to aggregate")]
    EmptyInput,
    #[error("in-context editing prompt needs at least one edit statement")]
    MissingEdits,
    #[error("shot count {0} not in {{1, 3, 5}}")]
    BadShots(usize),
    #[error("{failed} of {total} requests failed, above the allowed rate {max_rate}")]
    TooManyFailures { failed: usize, total: usize, max_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Token {
    text: String,
    /// Byte offset of the token in the raw string.
    start: usize,
}

fn tokens(raw: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    for (i, c) in raw.char_indices() {
        if c.is_alphanumeric() {
            if cur.is_empty() {
                start = i;
            }
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(Token {
                text: std::mem::take(&mut cur),
                start,
            });
        }
    }
    if !cur.is_empty() {
        out.push(Token { text: cur, start });
    }
    out.retain(|t| !ARTICLES.contains(&t.text.as_str()));
    out
}

/// Lowercase, punctuation to spaces, articles dropped, whitespace collapsed.
pub fn normalize(text: &str) -> String {
    tokens(text).into_iter().map(|t| t.text).collect::<Vec<_>>().join(" ")
}

fn find_all(hay: &[Token], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len())
        .filter(|&i| hay[i..i + needle.len()].iter().zip(needle).all(|(a, b)| &a.text == b))
        .collect()
}

fn form_tokens(form: &str) -> Vec<String> {
    tokens(form).into_iter().map(|t| t.text).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Labels {
    pub matched_cf: bool,
    pub matched_orig: bool,
    pub negated_cf: bool,
    pub exact_match: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Faithful,
    Stubborn,
    Other,
}

impl Labels {
    pub fn strict_faithful(&self) -> bool {
        self.matched_cf && !self.matched_orig && !self.negated_cf
    }

    pub fn category(&self) -> Category {
        if self.strict_faithful() {
            Category::Faithful
        } else if self.matched_orig {
            Category::Stubborn
        } else {
            Category::Other
        }
    }
}

fn negated_before(raw: &str, start: usize) -> bool {
    let before = &raw[..start];
    let skip = before.chars().count().saturating_sub(NEGATION_WINDOW_CHARS);
    let window: String = before.chars().skip(skip).collect();
    let window_tokens = tokens(&window);
    NEGATION_CUES
        .iter()
        .any(|cue| !find_all(&window_tokens, &form_tokens(cue)).is_empty())
}

pub fn label_response(response: &str, answer_cf: &Answer, answer_orig: &Answer) -> Labels {
    let resp = tokens(response);
    let mut labels = Labels::default();
    for form in answer_cf.forms() {
        let ft = form_tokens(form);
        for i in find_all(&resp, &ft) {
            labels.matched_cf = true;
            if negated_before(response, resp[i].start) {
                labels.negated_cf = true;
            }
        }
        if !ft.is_empty() && resp.len() == ft.len() && !find_all(&resp, &ft).is_empty() {
            labels.exact_match = true;
        }
    }
    labels.matched_orig = answer_orig
        .forms()
        .any(|f| !find_all(&resp, &form_tokens(f)).is_empty());
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsOptions {
    /// Report P_c in place of the containment rate P_s.
    pub strict_only: bool,
    /// Whether a response matching both answers counts toward P_s.
    pub count_both_in_ps: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            strict_only: true,
            count_both_in_ps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Counts {
    pub total: usize,
    pub faithful: usize,
    pub stubborn: usize,
    pub other: usize,
    pub matched_cf: usize,
    pub matched_orig: usize,
    pub exact_match: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p_c: f64,
    pub p_s: f64,
    pub p_o: f64,
    /// `None` when P_s + P_o is zero.
    pub m_r: Option<f64>,
    pub em: f64,
    pub strict_only: bool,
    pub counts: Counts,
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Memorization ratio in percent from unrounded percentages.
pub fn mr_from_rates(p_s: f64, p_o: f64) -> Option<f64> {
    let denom = p_s + p_o;
    (denom > 0.0).then(|| 100.0 * p_o / denom)
}

pub fn compute_metrics(records: &[Labels], opts: MetricsOptions) -> Result<MetricsReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut c = Counts {
        total: records.len(),
        ..Counts::default()
    };
    let mut loose = 0;
    for r in records {
        match r.category() {
            Category::Faithful => c.faithful += 1,
            Category::Stubborn => c.stubborn += 1,
            Category::Other => c.other += 1,
        }
        c.matched_cf += r.matched_cf as usize;
        c.matched_orig += r.matched_orig as usize;
        c.exact_match += r.exact_match as usize;
        if r.matched_cf && (opts.count_both_in_ps || !r.matched_orig) {
            loose += 1;
        }
    }
    let pct = |k: usize| 100.0 * k as f64 / c.total as f64;
    let p_c = pct(c.faithful);
    let p_s = if opts.strict_only { p_c } else { pct(loose) };
    let p_o = pct(c.matched_orig);
    Ok(MetricsReport {
        p_c: round1(p_c),
        p_s: round1(p_s),
        p_o: round1(p_o),
        m_r: mr_from_rates(p_s, p_o).map(round1),
        em: round1(pct(c.exact_match)),
        strict_only: opts.strict_only,
        counts: c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptStyle {
    Base,
    Attr,
    OpinionInstruction,
    Ice(usize),
}

impl PromptStyle {
    pub fn ice(shots: usize) -> Result<Self, EvalError> {
        if [1, 3, 5].contains(&shots) {
            Ok(PromptStyle::Ice(shots))
        } else {
            Err(EvalError::BadShots(shots))
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptStyle::Base => f.write_str("base"),
            PromptStyle::Attr => f.write_str("attr"),
            PromptStyle::OpinionInstruction => f.write_str("oi"),
            PromptStyle::Ice(k) => write!(f, "ice-{k}"),
        }
    }
}

impl FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(PromptStyle::Base),
            "attr" => Ok(PromptStyle::Attr),
            "oi" | "o&i" => Ok(PromptStyle::OpinionInstruction),
            "ice" => Ok(PromptStyle::Ice(1)),
            other => match other.strip_prefix("ice-").and_then(|k| k.parse().ok()) {
                Some(k) => PromptStyle::ice(k).map_err(|e| e.to_string()),
                None => Err(format!("unknown prompt style `{s}` (expected base, attr, oi or ice)")),
            },
        }
    }
}

/// Question/edit/answer demonstrations for in-context editing prompts.
pub const ICE_DEMOS: &[(&str, &str, &str)] = &[
    (
        "What is the capital city of the country of citizenship of Ivanka Trump's spouse?",
        "Jared Kushner is a citizen of Canada",
        "Ottawa",
    ),
    (
        "On which continent was the director of \"My House Husband: Ikaw Na!\" educated?",
        "Irene Villamor was educated in New York University",
        "North America",
    ),
    (
        "In which country is the company that created Nissan 200SX located?",
        "Nissan is located in the country of China",
        "China",
    ),
    (
        "Who has ownership of the developer of the Chevrolet Corvette (C4)?",
        "Chevrolet is owned by Volkswagen Group",
        "Volkswagen Group",
    ),
    (
        "What is the official language of the country where the author of Harry Potter holds citizenship?",
        "J. K. Rowling is a citizen of Brazil",
        "Portuguese",
    ),
];

fn strip_question_mark(q: &str) -> &str {
    q.trim_end().trim_end_matches('?')
}

pub fn build_prompt(style: PromptStyle, inst: &TaskInstance, scaffold: &PromptScaffold) -> Result<String, EvalError> {
    let ctx = &inst.context_counterfactual;
    match style {
        PromptStyle::Base => Ok(scaffold.render(ctx, &inst.question)),
        PromptStyle::Attr => Ok(format!(
            "{ctx} Q: {} based on the given text? A:",
            strip_question_mark(&inst.question)
        )),
        PromptStyle::OpinionInstruction => Ok(format!(
            "Bob said \"{ctx}\" Q: {} in Bob's opinion? A:",
            strip_question_mark(&inst.question)
        )),
        PromptStyle::Ice(k) => {
            if ![1, 3, 5].contains(&k) {
                return Err(EvalError::BadShots(k));
            }
            if inst.edits.is_empty() {
                return Err(EvalError::MissingEdits);
            }
            let mut blocks: Vec<String> = ICE_DEMOS[..k]
                .iter()
                .map(|(q, e, a)| format!("Q: {q}\nE: {e}\nA: {a}"))
                .collect();
            blocks.push(format!("Q: {}\nE: {}\nA:", inst.question, inst.edits.join(". ")));
            Ok(blocks.join("\n\n"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub instance_id: String,
    pub prompt_style: String,
    pub model: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub matched_cf: bool,
    pub matched_orig: bool,
    pub negated_cf: bool,
    pub exact_match: bool,
    pub category: Category,
}

impl EvalRecord {
    pub fn labels(&self) -> Labels {
        Labels {
            matched_cf: self.matched_cf,
            matched_orig: self.matched_orig,
            negated_cf: self.negated_cf,
            exact_match: self.exact_match,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub style: PromptStyle,
    pub model: String,
    pub metrics: MetricsOptions,
    pub workers: usize,
    /// Fraction of failed requests above which the run aborts.
    pub max_error_rate: f64,
    pub max_tokens: u32,
    pub scaffold: PromptScaffold,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            style: PromptStyle::Base,
            model: "gpt-4o-mini".into(),
            metrics: MetricsOptions::default(),
            workers: 4,
            max_error_rate: 0.02,
            max_tokens: 256,
            scaffold: PromptScaffold::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub report: MetricsReport,
}

/// Queries the client once per instance and aggregates the labels. Failed
/// requests are labeled as other and stay in the denominator.
pub fn run_eval(
    client: &dyn ModelClient,
    instances: &[TaskInstance],
    cfg: &EvalConfig,
) -> Result<EvalOutcome, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let prompts: Vec<String> = instances
        .iter()
        .map(|x| build_prompt(cfg.style, x, &cfg.scaffold))
        .collect::<Result<_, _>>()?;
    let responses: Vec<Result<String, ClientError>> = parallel_map(&prompts, cfg.workers, |_, p| {
        let mut req = CompletionRequest::prompt(cfg.model.clone(), p.clone());
        req.max_tokens = cfg.max_tokens;
        client.complete(&req).map(|c| c.text)
    });
    let failed = responses.iter().filter(|r| r.is_err()).count();
    if failed as f64 > cfg.max_error_rate * instances.len() as f64 {
        return Err(EvalError::TooManyFailures {
            failed,
            total: instances.len(),
            max_rate: cfg.max_error_rate,
        });
    }
    let records: Vec<EvalRecord> = instances
        .iter()
        .zip(responses)
        .map(|(x, r)| {
            let (response, error, labels) = match r {
                Ok(text) => {
                    let l = label_response(&text, &x.answer_cf, &x.answer_orig);
                    (Some(text), None, l)
                }
                Err(e) => (None, Some(e.to_string()), Labels::default()),
            };
            EvalRecord {
                instance_id: x.id.clone(),
                prompt_style: cfg.style.to_string(),
                model: cfg.model.clone(),
                response,
                error,
                matched_cf: labels.matched_cf,
                matched_orig: labels.matched_orig,
                negated_cf: labels.negated_cf,
                exact_match: labels.exact_match,
                category: labels.category(),
            }
        })
        .collect();
    let labels: Vec<Labels> = records.iter().map(EvalRecord::labels).collect();
    let mut report = compute_metrics(&labels, cfg.metrics)?;
    report.counts.errors = failed;
    Ok(EvalOutcome { records, report })
}

//! Locating the first generated token that carries the new (context) answer
//! and summarizing where it ranks among the model's top alternatives.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::client::{ClientError, Completion, CompletionRequest, ModelClient};
use crate::dataset::{PromptScaffold, TaskInstance};
use crate::eval::{build_prompt, EvalError, PromptStyle};

pub const KDE_GRID_POINTS: usize = 101;

#[derive(Debug, thiserror::Error)]
pub enum TokenCapError {
    #[error("frame at position {0} has no candidates")]
    EmptyFrame(usize),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Prompt(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsFrame {
    /// 1-based position in the generated sequence.
    pub position: usize,
    pub candidates: Vec<(String, f64)>,
}

impl LogitsFrame {
    /// Sorts candidates by descending score, ties by token.
    pub fn new(position: usize, mut candidates: Vec<(String, f64)>) -> Result<Self, TokenCapError> {
        if candidates.is_empty() {
            return Err(TokenCapError::EmptyFrame(position));
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self { position, candidates })
    }

    pub fn softmax(&self, index: usize) -> f64 {
        let m = self.candidates[0].1;
        let z: f64 = self.candidates.iter().map(|(_, s)| (s - m).exp()).sum();
        (self.candidates[index].1 - m).exp() / z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capture {
    pub position: usize,
    pub token: String,
    pub score: f64,
    /// 1-based rank within the frame.
    pub rank: usize,
    pub softmax_prob: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptureResult {
    pub captured: Option<Capture>,
    /// Set when no frame exposed a word of the new answer.
    pub not_in_top_k: bool,
}

fn fold(token: &str) -> String {
    token
        .trim()
        .trim_matches(|c: char| c.is_ascii_punctuation())
        .to_lowercase()
}

fn word_set(s: &str) -> BTreeSet<String> {
    s.split_whitespace().map(fold).filter(|w| !w.is_empty()).collect()
}

/// Case-insensitive intersection of the two word sets.
pub fn common_parts(s_new: &str, s_old: &str) -> BTreeSet<String> {
    let old = word_set(s_old);
    word_set(s_new).into_iter().filter(|w| old.contains(w)).collect()
}

pub fn capture(frames: &[LogitsFrame], s_new: &str, s_old: &str) -> CaptureResult {
    let common = common_parts(s_new, s_old);
    let new_words = word_set(s_new);
    for frame in frames {
        for (i, (token, score)) in frame.candidates.iter().enumerate() {
            let t = fold(token);
            if common.contains(&t) {
                break;
            }
            if new_words.contains(&t) {
                return CaptureResult {
                    captured: Some(Capture {
                        position: frame.position,
                        token: token.trim().to_string(),
                        score: *score,
                        rank: i + 1,
                        softmax_prob: frame.softmax(i),
                    }),
                    not_in_top_k: false,
                };
            }
        }
    }
    CaptureResult {
        captured: None,
        not_in_top_k: true,
    }
}

/// One frame per generated token: its top alternatives, plus the sampled
/// token itself when the alternatives leave it out.
pub fn frames_from_completion(c: &Completion) -> Result<Vec<LogitsFrame>, TokenCapError> {
    c.tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut cands: Vec<(String, f64)> = t.alternatives.iter().map(|a| (a.token.clone(), a.logprob)).collect();
            if !cands.iter().any(|(tok, _)| tok == &t.token) {
                cands.push((t.token.clone(), t.logprob));
            }
            LogitsFrame::new(i + 1, cands)
        })
        .collect()
}

pub fn capture_for_instance(
    client: &dyn ModelClient,
    inst: &TaskInstance,
    style: PromptStyle,
    scaffold: &PromptScaffold,
    model: &str,
    top_k: u32,
) -> Result<CaptureResult, TokenCapError> {
    let prompt = build_prompt(style, inst, scaffold)?;
    let req = CompletionRequest::prompt(model, prompt).with_top_logprobs(top_k);
    let completion = client.complete(&req)?;
    let frames = frames_from_completion(&completion)?;
    Ok(capture(&frames, &inst.answer_cf.label, &inst.answer_orig.label))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBuckets {
    pub rank_1: usize,
    pub rank_2: usize,
    pub rank_3_5: usize,
    pub rank_6_10: usize,
    pub rank_over_10: usize,
    pub not_captured: usize,
}

impl RankBuckets {
    pub fn total(&self) -> usize {
        self.rank_1 + self.rank_2 + self.rank_3_5 + self.rank_6_10 + self.rank_over_10 + self.not_captured
    }

    fn add(&mut self, rank: Option<usize>) {
        match rank {
            None => self.not_captured += 1,
            Some(1) => self.rank_1 += 1,
            Some(2) => self.rank_2 += 1,
            Some(3..=5) => self.rank_3_5 += 1,
            Some(6..=10) => self.rank_6_10 += 1,
            Some(_) => self.rank_over_10 += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureAggregate {
    pub results: usize,
    pub captured: usize,
    /// Mean captured score as given (logprob or probability).
    pub mean_score: Option<f64>,
    /// Mean of `exp(score) * 100`, for logprob scores.
    pub mean_score_percent: Option<f64>,
    pub mean_softmax_prob: Option<f64>,
    pub ranks: RankBuckets,
    /// Absent with fewer than two captures or zero spread.
    pub kde: Option<Kde>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Gaussian KDE on a 0..1 grid with Scott's bandwidth, reflected at both
/// ends so mass stays inside the unit interval.
pub fn kde_unit_interval(samples: &[f64]) -> Option<Kde> {
    let n = samples.len();
    if n < 2 {
        return None;
    }
    let mu = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
    let h = var.sqrt() * (n as f64).powf(-0.2);
    if h <= 0.0 || !h.is_finite() {
        return None;
    }
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * h * n as f64);
    let k = |u: f64| (-0.5 * (u / h).powi(2)).exp();
    let grid: Vec<f64> = (0..KDE_GRID_POINTS)
        .map(|i| i as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect();
    let density = grid
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| k(x - s) + k(x + s) + k(x - (2.0 - s)))
                .sum::<f64>()
        })
        .collect();
    Some(Kde {
        bandwidth: h,
        grid,
        density,
    })
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

pub fn aggregate_captures(results: &[CaptureResult]) -> CaptureAggregate {
    let mut ranks = RankBuckets::default();
    // Sorted copies keep the floating-point sums order-independent.
    let mut scores = Vec::new();
    let mut probs = Vec::new();
    for r in results {
        ranks.add(r.captured.as_ref().map(|c| c.rank));
        if let Some(c) = &r.captured {
            scores.push(c.score);
            probs.push(c.softmax_prob);
        }
    }
    scores.sort_by(f64::total_cmp);
    probs.sort_by(f64::total_cmp);
    let percent: Vec<f64> = scores.iter().map(|s| s.exp() * 100.0).collect();
    CaptureAggregate {
        results: results.len(),
        captured: scores.len(),
        mean_score: mean(&scores),
        mean_score_percent: mean(&percent),
        mean_softmax_prob: mean(&probs),
        ranks,
        kde: kde_unit_interval(&probs),
    }
}

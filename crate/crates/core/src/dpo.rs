//! Preference-optimization loss, its gradient, and a bigram toy policy
//! trained on preference pairs by plain gradient descent.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::PreferencePair;

pub const BOS: &str = "<s>";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("beta must be positive, got {0}")]
    InvalidBeta(f64),
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("loss became non-finite at step {0}")]
    Divergence(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoPoint {
    pub logp_w_theta: f64,
    pub logp_l_theta: f64,
    pub logp_w_ref: f64,
    pub logp_l_ref: f64,
}

impl DpoPoint {
    /// Difference of policy/reference log-ratios, scaled by `beta`.
    pub fn z(&self, beta: f64) -> f64 {
        beta * ((self.logp_w_theta - self.logp_w_ref) - (self.logp_l_theta - self.logp_l_ref))
    }
}

/// `-ln(sigmoid(z))` without overflow for large `|z|`.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sum by recursive halving; the result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 8 => xs.iter().sum(),
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

fn check_beta(beta: f64) -> Result<(), DpoError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(DpoError::InvalidBeta(beta))
    }
}

pub fn dpo_loss(points: &[DpoPoint], beta: f64) -> Result<f64, DpoError> {
    check_beta(beta)?;
    if points.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let terms: Vec<f64> = points.iter().map(|p| neg_log_sigmoid(p.z(beta))).collect();
    Ok(pairwise_sum(&terms) / points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoGrad {
    pub w_theta: f64,
    pub l_theta: f64,
    pub w_ref: f64,
    pub l_ref: f64,
}

/// Gradient of the single-point loss with respect to its four inputs.
pub fn dpo_grad(point: &DpoPoint, beta: f64) -> DpoGrad {
    let s = sigmoid(point.z(beta));
    let g = beta * (1.0 - s);
    DpoGrad {
        w_theta: -g,
        l_theta: g,
        w_ref: g,
        l_ref: -g,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Half-width of the uniform noise added to the initial logits.
    pub init_scale: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 0.5,
            steps: 200,
            seed: 0,
            init_scale: 0.0,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Sorted vocabulary over whitespace tokens, with `<s>` at index 0.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in texts {
            set.extend(tokenize(t).into_iter().map(str::to_string));
        }
        set.remove(BOS);
        let tokens: Vec<String> = std::iter::once(BOS.to_string()).chain(set).collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize, DpoError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| DpoError::UnknownToken(token.to_string()))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, DpoError> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }
}

/// Bigram next-token model: one row of logits per previous token. A copy of
/// the initial table is kept as the frozen reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    vocab: Vocabulary,
    params: Vec<f64>,
    reference: Vec<f64>,
}

#[derive(Serialize)]
struct PolicyDump<'a> {
    vocabulary: &'a [String],
    logits: Vec<&'a [f64]>,
}

impl ToyPolicy {
    pub fn new(vocab: Vocabulary, init_scale: f64, seed: u64) -> Self {
        let v = vocab.len();
        let mut params = vec![0.0; v * v];
        if init_scale > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for p in &mut params {
                *p = rng.random_range(-init_scale..=init_scale);
            }
        }
        Self {
            vocab,
            reference: params.clone(),
            params,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn reference_params(&self) -> &[f64] {
        &self.reference
    }

    fn row<'a>(&self, table: &'a [f64], prev: usize) -> &'a [f64] {
        let v = self.vocab.len();
        &table[prev * v..(prev + 1) * v]
    }

    fn log_normalizer(row: &[f64]) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    fn logprob_ids(&self, use_reference: bool, prev: usize, cont: &[usize]) -> f64 {
        let mut cache = vec![None; self.vocab.len()];
        self.logprob_cached(use_reference, prev, cont, &mut cache)
    }

    /// `cache` holds row normalizers already computed for this table.
    fn logprob_cached(&self, use_reference: bool, prev: usize, cont: &[usize], cache: &mut [Option<f64>]) -> f64 {
        let table = if use_reference { &self.reference } else { &self.params };
        let mut prev = prev;
        let mut total = 0.0;
        for &tok in cont {
            let row = self.row(table, prev);
            let lse = *cache[prev].get_or_insert_with(|| Self::log_normalizer(row));
            total += row[tok] - lse;
            prev = tok;
        }
        total
    }

    /// Sum of next-token log-probabilities of `continuation`; the first
    /// token is conditioned on the last context token (or `<s>`).
    pub fn sequence_logprob(
        &self,
        context: &[&str],
        continuation: &[&str],
        use_reference: bool,
    ) -> Result<f64, DpoError> {
        let prev = match context.last() {
            Some(t) => self.vocab.id(t)?,
            None => 0,
        };
        let ids: Vec<usize> = continuation
            .iter()
            .map(|t| self.vocab.id(t))
            .collect::<Result<_, _>>()?;
        Ok(self.logprob_ids(use_reference, prev, &ids))
    }

    /// Vocabulary and logit table as pretty-printed JSON.
    pub fn dump(&self) -> String {
        let v = self.vocab.len();
        let d = PolicyDump {
            vocabulary: self.vocab.tokens(),
            logits: (0..v).map(|r| self.row(&self.params, r)).collect(),
        };
        serde_json::to_string_pretty(&d).expect("policy serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    /// Last prompt token, which conditions the first response token.
    pub prompt_last: usize,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

/// Builds the vocabulary over all pair texts and encodes every pair.
pub fn prepare_pairs(pairs: &[PreferencePair]) -> Result<(Vocabulary, Vec<TokenizedPair>), DpoError> {
    let vocab = Vocabulary::build(
        pairs
            .iter()
            .flat_map(|p| [p.prompt.as_str(), p.chosen.as_str(), p.rejected.as_str()]),
    );
    let encoded = pairs
        .iter()
        .map(|p| {
            let prompt = vocab.encode(&p.prompt)?;
            Ok(TokenizedPair {
                prompt_last: prompt.last().copied().unwrap_or(0),
                chosen: vocab.encode(&p.chosen)?,
                rejected: vocab.encode(&p.rejected)?,
            })
        })
        .collect::<Result<Vec<_>, DpoError>>()?;
    Ok((vocab, encoded))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub loss: f64,
    /// Mean of `beta * (delta_chosen - delta_rejected)` over the batch.
    pub mean_margin: f64,
}

pub fn points(policy: &ToyPolicy, pairs: &[TokenizedPair]) -> Vec<DpoPoint> {
    let v = policy.vocab.len();
    let (mut cur, mut refc) = (vec![None; v], vec![None; v]);
    pairs
        .iter()
        .map(|p| DpoPoint {
            logp_w_theta: policy.logprob_cached(false, p.prompt_last, &p.chosen, &mut cur),
            logp_l_theta: policy.logprob_cached(false, p.prompt_last, &p.rejected, &mut cur),
            logp_w_ref: policy.logprob_cached(true, p.prompt_last, &p.chosen, &mut refc),
            logp_l_ref: policy.logprob_cached(true, p.prompt_last, &p.rejected, &mut refc),
        })
        .collect()
}

/// Fraction of pairs whose implicit reward favors the chosen response.
pub fn preference_accuracy(policy: &ToyPolicy, pairs: &[TokenizedPair], beta: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let wins = points(policy, pairs).iter().filter(|p| p.z(beta) > 0.0).count();
    wins as f64 / pairs.len() as f64
}

fn mean_margin(pts: &[DpoPoint], beta: f64) -> f64 {
    let zs: Vec<f64> = pts.iter().map(|p| p.z(beta)).collect();
    pairwise_sum(&zs) / pts.len().max(1) as f64
}

/// Full-batch gradient descent on the mean loss. The trace holds the loss
/// and margin before each update, plus one final entry after the last one.
pub fn train_toy(policy: &mut ToyPolicy, pairs: &[TokenizedPair], cfg: &DpoConfig) -> Result<Vec<TraceStep>, DpoError> {
    check_beta(cfg.beta)?;
    if pairs.is_empty() {
        return Err(DpoError::EmptyBatch);
    }
    let v = policy.vocab.len();
    let n = pairs.len() as f64;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let pts = points(policy, pairs);
        let loss = dpo_loss(&pts, cfg.beta)?;
        if !loss.is_finite() {
            return Err(DpoError::Divergence(step));
        }
        trace.push(TraceStep {
            step,
            loss,
            mean_margin: mean_margin(&pts, cfg.beta),
        });
        if step == cfg.steps {
            break;
        }
        // Per row: coefficient mass on realized tokens, and its total.
        let mut onehot: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
        for (pair, pt) in pairs.iter().zip(&pts) {
            let g = dpo_grad(pt, cfg.beta);
            for (seq, coef) in [(&pair.chosen, g.w_theta / n), (&pair.rejected, g.l_theta / n)] {
                let mut prev = pair.prompt_last;
                for &tok in seq.iter() {
                    *onehot.entry(prev).or_default().entry(tok).or_default() += coef;
                    prev = tok;
                }
            }
        }
        for (prev, hits) in onehot {
            let total: f64 = hits.values().sum();
            let row = &mut policy.params[prev * v..(prev + 1) * v];
            let lse = ToyPolicy::log_normalizer(row);
            let probs: Vec<f64> = row.iter().map(|x| (x - lse).exp()).collect();
            for (j, p) in probs.iter().enumerate() {
                let grad = hits.get(&j).copied().unwrap_or(0.0) - total * p;
                row[j] -= cfg.learning_rate * grad;
            }
        }
        if policy.params.iter().any(|x| !x.is_finite()) {
            return Err(DpoError::Divergence(step));
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn point(w: f64, l: f64, wr: f64, lr: f64) -> DpoPoint {
        DpoPoint {
            logp_w_theta: w,
            logp_l_theta: l,
            logp_w_ref: wr,
            logp_l_ref: lr,
        }
    }

    #[test]
    fn loss_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((dpo_loss(&[point(-3.0, -3.0, -3.0, -3.0)], 0.1).unwrap() - ln2).abs() < 1e-12);
        let z2 = dpo_loss(&[point(0.0, -2.0, -1.0, -1.0)], 1.0).unwrap();
        assert!((z2 - 0.1269280110429725).abs() < 1e-12);
        let big = dpo_loss(&[point(0.0, 50.0, 0.0, 0.0)], 1.0).unwrap();
        assert!((big - 50.0).abs() < 1e-12);
        assert_eq!(dpo_loss(&[], 1.0), Err(DpoError::EmptyBatch));
        assert_eq!(
            dpo_loss(&[point(0.0, 0.0, 0.0, 0.0)], 0.0),
            Err(DpoError::InvalidBeta(0.0))
        );
    }

    #[test]
    fn gradient_at_zero() {
        let g = dpo_grad(&point(-1.0, -1.0, -1.0, -1.0), 1.0);
        assert_eq!(g.w_theta, -0.5);
        assert_eq!(g.l_theta, 0.5);
        assert_eq!(g.w_ref, 0.5);
    }

    #[test]
    fn uniform_sequence_logprob() {
        let vocab = Vocabulary::from_tokens(["<s>", "a", "b", "c"].map(String::from).to_vec());
        let p = ToyPolicy::new(vocab, 0.0, 0);
        let lp = p.sequence_logprob(&["a"], &["b", "c", "a"], false).unwrap();
        assert!((lp - 3.0 * (0.25f64).ln()).abs() < 1e-12);
        assert_eq!(p.sequence_logprob(&[], &[], false).unwrap(), 0.0);
        assert!(matches!(
            p.sequence_logprob(&["a"], &["zzz"], false),
            Err(DpoError::UnknownToken(_))
        ));
    }

    #[test]
    fn additivity_with_noise() {
        let vocab = Vocabulary::build(["x y z w"]);
        let p = ToyPolicy::new(vocab, 0.7, 9);
        let ab = p.sequence_logprob(&["x"], &["y", "z"], false).unwrap();
        let a = p.sequence_logprob(&["x"], &["y"], false).unwrap();
        let b = p.sequence_logprob(&["x", "y"], &["z"], false).unwrap();
        assert!((ab - (a + b)).abs() < 1e-12);
    }

    fn single_pair() -> (ToyPolicy, Vec<TokenizedPair>) {
        let pairs = vec![PreferencePair {
            instance_id: "p".into(),
            prompt: "Kyiv context Q: continent? A:".into(),
            chosen: "Kyiv is in South America. So the final answer is South America.".into(),
            rejected: "Kyiv is in Europe. So the final answer is Europe.".into(),
        }];
        let (vocab, enc) = prepare_pairs(&pairs).unwrap();
        (ToyPolicy::new(vocab, 0.0, 0), enc)
    }

    #[test]
    fn single_pair_training_prefers_chosen() {
        let (mut policy, enc) = single_pair();
        let cfg = DpoConfig {
            beta: 1.0,
            learning_rate: 1.0,
            steps: 300,
            ..DpoConfig::default()
        };
        let before = policy.reference_params().to_vec();
        let trace = train_toy(&mut policy, &enc, &cfg).unwrap();
        assert_eq!(trace.len(), 301);
        assert!(trace.last().unwrap().loss < trace[0].loss);
        let pt = &points(&policy, &enc)[0];
        assert!(pt.logp_w_theta > pt.logp_l_theta, "{pt:?}");
        assert_eq!(policy.reference_params(), &before[..]);
    }

    #[test]
    fn zero_learning_rate_keeps_loss() {
        let (mut policy, enc) = single_pair();
        let cfg = DpoConfig {
            learning_rate: 0.0,
            steps: 5,
            ..DpoConfig::default()
        };
        let trace = train_toy(&mut policy, &enc, &cfg).unwrap();
        assert!(trace.iter().all(|t| t.loss == trace[0].loss));
    }

    #[test]
    fn divergence_is_reported() {
        let (mut policy, enc) = single_pair();
        let cfg = DpoConfig {
            beta: 1.0,
            learning_rate: f64::INFINITY,
            steps: 3,
            ..DpoConfig::default()
        };
        assert!(matches!(
            train_toy(&mut policy, &enc, &cfg),
            Err(DpoError::Divergence(_))
        ));
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert!((pairwise_sum(&xs) - xs.iter().sum::<f64>()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_monotone(z in -60.0f64..60.0, dz in 0.001f64..5.0) {
            let a = neg_log_sigmoid(z);
            let b = neg_log_sigmoid(z + dz);
            prop_assert!(a >= 0.0 && b >= 0.0);
            prop_assert!(b < a || (a - b).abs() < 1e-15);
        }

        #[test]
        fn gradient_matches_central_differences(
            w in -20.0f64..0.0, l in -20.0f64..0.0, wr in -20.0f64..0.0, lr in -20.0f64..0.0,
            beta in 0.05f64..2.0,
        ) {
            let p = point(w, l, wr, lr);
            let g = dpo_grad(&p, beta);
            let h = 1e-6;
            let f = |q: DpoPoint| neg_log_sigmoid(q.z(beta));
            let fd = (f(point(w + h, l, wr, lr)) - f(point(w - h, l, wr, lr))) / (2.0 * h);
            prop_assert!((fd - g.w_theta).abs() <= 1e-6 * g.w_theta.abs().max(1e-3));
        }
    }
}

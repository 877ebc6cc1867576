//! Chat-completion clients: an HTTP client for compatible endpoints and a
//! hermetic mock for tests and offline runs.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Number of alternatives per generated token; 0 disables logprobs.
    pub top_logprobs: u32,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model: model.into(),
            messages,
            max_tokens: 256,
            temperature: 0.0,
            top_logprobs: 0,
            seed: None,
        }
    }

    pub fn prompt(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self::new(model, vec![ChatMessage::user(prompt)])
    }

    pub fn with_top_logprobs(mut self, k: u32) -> Self {
        self.top_logprobs = k;
        self
    }

    /// All message contents joined by newlines; the lookup key for scripted
    /// mocks.
    pub fn prompt_key(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn validate(&self, max_top_logprobs: u32) -> Result<(), ClientError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ClientError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.top_logprobs > max_top_logprobs {
            return Err(ClientError::InvalidRequest(format!(
                "top_logprobs {} exceeds endpoint maximum {max_top_logprobs}",
                self.top_logprobs
            )));
        }
        if self.messages.is_empty() {
            return Err(ClientError::InvalidRequest("no messages".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alternative {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    /// Sorted by descending logprob.
    pub alternatives: Vec<Alternative>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens: Vec<TokenLogprob>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited")]
    RateLimited,
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("operation not supported by endpoint: {0}")]
    UnsupportedByEndpoint(String),
    #[error("mock script: {0}")]
    Script(String),
}

impl ClientError {
    fn is_transient(&self) -> bool {
        match self {
            ClientError::Timeout | ClientError::RateLimited | ClientError::Transport(_) => true,
            ClientError::HttpStatus { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

pub trait ModelClient: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ClientError>;

    /// Total log-probability of `continuation` given `context`.
    fn score_sequence(&self, _context: &str, _continuation: &str) -> Result<f64, ClientError> {
        Err(ClientError::UnsupportedByEndpoint("sequence scoring".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint_url: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub api_key_env: String,
    pub max_top_logprobs: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            timeout_ms: 60_000,
            max_retries: 3,
            max_in_flight: 4,
            api_key_env: "CONFIFORGE_API_KEY".into(),
            max_top_logprobs: 20,
            backoff_ms: 500,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
pub struct InFlightLimiter {
    max: usize,
    current: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            current: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.current.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.cv.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.current.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.cv.notify_one();
    }
}

pub struct HttpClient {
    config: ClientConfig,
    api_key: String,
    agent: ureq::Agent,
    limiter: InFlightLimiter,
}

impl HttpClient {
    /// Reads the API key from the environment variable named in the config.
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        let key = std::env::var(&config.api_key_env)
            .map_err(|_| ClientError::AuthError(format!("environment variable {} is not set", config.api_key_env)))?;
        Ok(Self::with_key(config, key))
    }

    pub fn with_key(config: ClientConfig, api_key: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            limiter: InFlightLimiter::new(config.max_in_flight),
            config,
            api_key: api_key.into(),
            agent,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn request_body(req: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": req.model,
            "messages": req.messages,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        });
        if req.top_logprobs > 0 {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(req.top_logprobs);
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value, k: usize) -> Result<Completion, ClientError> {
        let _permit = self.limiter.acquire();
        let result = self
            .agent
            .post(&self.config.endpoint_url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body);
        let mut resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(ClientError::Timeout),
            Err(e) => return Err(ClientError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => ClientError::Timeout,
            other => ClientError::Transport(other.to_string()),
        })?;
        match status {
            200..=299 => parse_completion(&text, k),
            401 | 403 => Err(ClientError::AuthError(format!("HTTP {status}"))),
            429 => Err(ClientError::RateLimited),
            _ => Err(ClientError::HttpStatus { status, body: text }),
        }
    }
}

impl ModelClient for HttpClient {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ClientError> {
        req.validate(self.config.max_top_logprobs)?;
        let body = Self::request_body(req);
        let mut delay = self.config.backoff_ms;
        let mut attempt = 0;
        loop {
            match self.attempt(&body, req.top_logprobs as usize) {
                Err(e) if e.is_transient() && attempt < self.config.max_retries => {
                    log::warn!("transient error ({e}); retrying in {delay} ms");
                    std::thread::sleep(Duration::from_millis(delay));
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Parses a chat-completions response body.
pub fn parse_completion(body: &str, k: usize) -> Result<Completion, ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ClientError::ProtocolError(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ClientError::ProtocolError("missing choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ClientError::ProtocolError("missing message content".into()))?
        .to_string();
    let mut tokens = Vec::new();
    if let Some(items) = choice.pointer("/logprobs/content").and_then(Value::as_array) {
        for item in items {
            let token = item
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| ClientError::ProtocolError("logprob entry without token".into()))?;
            let logprob = item
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or_else(|| ClientError::ProtocolError("logprob entry without logprob".into()))?;
            let mut alternatives = Vec::new();
            for alt in item.get("top_logprobs").and_then(Value::as_array).into_iter().flatten() {
                if let (Some(t), Some(lp)) = (
                    alt.get("token").and_then(Value::as_str),
                    alt.get("logprob").and_then(Value::as_f64),
                ) {
                    alternatives.push(Alternative {
                        token: t.to_string(),
                        logprob: lp,
                    });
                }
            }
            sort_alternatives(&mut alternatives);
            alternatives.truncate(k);
            tokens.push(TokenLogprob {
                token: token.to_string(),
                logprob,
                alternatives,
            });
        }
    }
    Ok(Completion { text, tokens })
}

/// Descending logprob, ties by token string ascending.
pub fn sort_alternatives(alts: &mut [Alternative]) {
    alts.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.token.cmp(&b.token)));
}

pub enum MockReply {
    Text(String),
    /// Explicit token stream with alternatives, for logit-level scripts.
    Tokens(Vec<TokenLogprob>),
}

type Responder = Box<dyn Fn(&CompletionRequest) -> Result<MockReply, ClientError> + Send + Sync>;

/// Offline client. Replies come from a script; token logprobs come from a
/// small hashed-bucket bigram model so that scoring is deterministic and
/// additive.
pub struct MockClient {
    responder: Responder,
    lm: MockLm,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
    calls: AtomicUsize,
    delay: Option<Duration>,
}

impl MockClient {
    fn with_responder(responder: Responder) -> Self {
        Self {
            responder,
            lm: MockLm::default(),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
            delay: None,
        }
    }

    /// Reply text derived from a hash of the prompt.
    pub fn hashed() -> Self {
        Self::with_responder(Box::new(|req| {
            let digest = Sha256::digest(req.prompt_key().as_bytes());
            Ok(MockReply::Text(format!("mock answer {}", hex::encode(&digest[..4]))))
        }))
    }

    pub fn scripted<F>(f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<String, ClientError> + Send + Sync + 'static,
    {
        Self::with_responder(Box::new(move |req| f(req).map(MockReply::Text)))
    }

    pub fn scripted_tokens<F>(f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<Vec<TokenLogprob>, ClientError> + Send + Sync + 'static,
    {
        Self::with_responder(Box::new(move |req| f(req).map(MockReply::Tokens)))
    }

    /// Exact prompt-key lookup; unknown prompts are an error.
    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        Self::scripted(move |req| {
            map.get(&req.prompt_key())
                .cloned()
                .ok_or_else(|| ClientError::Script("no scripted reply for prompt".into()))
        })
    }

    /// Replies handed out in call order.
    pub fn sequence(replies: Vec<Result<String, ClientError>>) -> Self {
        let queue = Mutex::new(VecDeque::from(replies));
        Self::scripted(move |_| {
            queue
                .lock()
                .expect("mock queue poisoned")
                .pop_front()
                .unwrap_or_else(|| Err(ClientError::Script("reply sequence exhausted".into())))
        })
    }

    pub fn with_lm(mut self, lm: MockLm) -> Self {
        self.lm = lm;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ModelClient for MockClient {
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let out = (self.responder)(req).map(|reply| match reply {
            MockReply::Text(text) => {
                let tokens = self.lm.annotate(&req.prompt_key(), &text, req.top_logprobs as usize);
                Completion { text, tokens }
            }
            MockReply::Tokens(mut tokens) => {
                for t in &mut tokens {
                    sort_alternatives(&mut t.alternatives);
                    t.alternatives.truncate(req.top_logprobs as usize);
                }
                let text = tokens.iter().map(|t| t.token.as_str()).collect();
                Completion { text, tokens }
            }
        });
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }

    fn score_sequence(&self, context: &str, continuation: &str) -> Result<f64, ClientError> {
        Ok(self.lm.score(context, continuation))
    }
}

const MOCK_LEXICON: &[&str] = &[
    "the", "of", "is", "in", "and", "a", "to", "was", "by", "for", "on", "with", "as", "at", "from", "that", "it",
    "an", "be", "this", "which", "or", "are", "his", "her", "their", "city", "country", "capital", "answer", "final",
    "so", "located", "citizen", "head", "state", "United", "States", "Kingdom", "France",
];

/// Bigram model over hashed token buckets. Each token maps to one of
/// `buckets` classes; `log p(tok | prev)` is the log-softmax of a hashed
/// logit table row. In uniform mode every token scores `-ln(buckets)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MockLm {
    pub buckets: usize,
    pub uniform: bool,
}

impl Default for MockLm {
    fn default() -> Self {
        Self {
            buckets: 64,
            uniform: false,
        }
    }
}

impl MockLm {
    pub fn uniform(buckets: usize) -> Self {
        Self { buckets, uniform: true }
    }

    fn bucket(&self, token: &str) -> usize {
        let d = Sha256::digest(token.trim().as_bytes());
        (u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % self.buckets as u64) as usize
    }

    fn logit(&self, prev: usize, next: usize) -> f64 {
        let d = Sha256::digest(format!("{prev}:{next}").as_bytes());
        let x = u32::from_le_bytes(d[..4].try_into().expect("4 bytes"));
        (x as f64 / u32::MAX as f64) * 4.0 - 2.0
    }

    /// Log-softmax over all buckets following `prev`.
    fn log_probs(&self, prev: usize) -> Vec<f64> {
        if self.uniform {
            return vec![-(self.buckets as f64).ln(); self.buckets];
        }
        let row: Vec<f64> = (0..self.buckets).map(|j| self.logit(prev, j)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.into_iter().map(|x| x - lse).collect()
    }

    fn prev_bucket(&self, context: &str) -> usize {
        context
            .split_whitespace()
            .last()
            .map_or(self.buckets, |t| self.bucket(t))
            % self.buckets
    }

    pub fn score(&self, context: &str, continuation: &str) -> f64 {
        let mut prev = self.prev_bucket(context);
        let mut total = 0.0;
        for tok in continuation.split_whitespace() {
            let b = self.bucket(tok);
            total += self.log_probs(prev)[b];
            prev = b;
        }
        total
    }

    /// Splits `text` into word tokens (leading space kept on all but the
    /// first) and attaches up to `k` alternatives per position.
    pub fn annotate(&self, context: &str, text: &str, k: usize) -> Vec<TokenLogprob> {
        let mut prev = self.prev_bucket(context);
        let mut out = Vec::new();
        for (i, word) in text.split_whitespace().enumerate() {
            let token = if i == 0 { word.to_string() } else { format!(" {word}") };
            let b = self.bucket(word);
            let row = self.log_probs(prev);
            let logprob = row[b];
            let mut alternatives = Vec::new();
            if k > 0 {
                alternatives.push(Alternative {
                    token: token.clone(),
                    logprob,
                });
                for cand in MOCK_LEXICON {
                    if *cand == word {
                        continue;
                    }
                    alternatives.push(Alternative {
                        token: format!(" {cand}"),
                        logprob: row[self.bucket(cand)],
                    });
                }
                sort_alternatives(&mut alternatives);
                alternatives.truncate(k);
            }
            out.push(TokenLogprob {
                token,
                logprob,
                alternatives,
            });
            prev = b;
        }
        out
    }
}

//! Feature description and task-relatedness classification through an
//! external chat-completion endpoint, plus an offline mock.
//!
//! The wire format is the common OpenAI-compatible shape: a JSON body with
//! `model` and `messages`, answered by `choices[0].message.content`.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::numerics::fnv1a64;

/// Bumped whenever the prompt wording changes.
pub const PROMPT_VERSION: &str = "lfprobe-prompts-v1";

const CLASSIFY_MARKER: &str = "Answer with exactly one word: yes or no.";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("server returned status {status} after {attempts} attempt(s): {body}")]
    Status {
        status: u16,
        attempts: u32,
        body: String,
    },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("could not parse a yes/no answer from {0:?}")]
    Unparseable(String),
    #[error("auth token variable {0} is not set")]
    MissingToken(String),
    #[error("client not configured: {0}")]
    NotConfigured(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmClientConfig {
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_concurrency: usize,
    pub mock: bool,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: None,
            model: "gpt-4".to_string(),
            token_env: "LFPROBE_LLM_TOKEN".to_string(),
            timeout_secs: 30.0,
            max_retries: 3,
            backoff_ms: 500,
            max_concurrency: 2,
            mock: true,
        }
    }
}

/// What came back from one HTTP exchange.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportOutcome {
    Response { status: u16, body: String },
    TimedOut,
    Failed(String),
}

/// One POST of a JSON body. Implementations must not retry on their own.
pub trait Transport: Send + Sync {
    fn post(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> TransportOutcome;
}

/// Deterministic stand-in for a real endpoint.
///
/// Description requests get a canned description chosen by the FNV hash of
/// the prompt. Classification requests answer "yes" when the description
/// mentions sentiment-related vocabulary.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockTransport;

pub const MOCK_DESCRIPTIONS: [&str; 8] = [
    "Fires on positive sentiment words such as praise for a film.",
    "Detects negative opinions and criticism of the plot.",
    "Responds to sentence-final punctuation.",
    "Detects characters in a foreign language.",
    "Activates on articles and determiners like 'the'.",
    "Tracks emotionally charged adjectives expressing sentiment.",
    "Fires on nouns naming parts of a movie such as the cast or script.",
    "Responds to conjunctions joining two clauses.",
];

const RELATED_KEYWORDS: [&str; 7] = [
    "sentiment",
    "positive",
    "negative",
    "opinion",
    "praise",
    "criticism",
    "emotion",
];

pub fn mock_relatedness(description: &str) -> bool {
    let lower = description.to_lowercase();
    RELATED_KEYWORDS.iter().any(|k| lower.contains(k))
}

impl Transport for MockTransport {
    fn post(
        &self,
        _url: &str,
        _bearer: Option<&str>,
        body: &str,
        _timeout: Duration,
    ) -> TransportOutcome {
        let Ok(request) = serde_json::from_str::<Value>(body) else {
            return TransportOutcome::Response {
                status: 400,
                body: "bad json".into(),
            };
        };
        let prompt = request["messages"]
            .as_array()
            .and_then(|m| m.last())
            .and_then(|m| m["content"].as_str())
            .unwrap_or_default();
        let answer = if prompt.contains(CLASSIFY_MARKER) {
            let description = prompt
                .split("Feature description:")
                .nth(1)
                .and_then(|rest| rest.split("\n\n").next())
                .unwrap_or_default();
            if mock_relatedness(description) {
                "yes"
            } else {
                "no"
            }
            .to_string()
        } else {
            let idx = (fnv1a64(prompt.as_bytes()) % MOCK_DESCRIPTIONS.len() as u64) as usize;
            MOCK_DESCRIPTIONS[idx].to_string()
        };
        TransportOutcome::Response {
            status: 200,
            body: json!({"choices": [{"message": {"role": "assistant", "content": answer}}]})
                .to_string(),
        }
    }
}

#[cfg(feature = "http")]
#[derive(Clone, Copy, Debug, Default)]
pub struct HttpTransport;

#[cfg(feature = "http")]
impl Transport for HttpTransport {
    fn post(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &str,
        timeout: Duration,
    ) -> TransportOutcome {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        match req.send(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                match resp.body_mut().read_to_string() {
                    Ok(body) => TransportOutcome::Response { status, body },
                    Err(ureq::Error::Timeout(_)) => TransportOutcome::TimedOut,
                    Err(e) => TransportOutcome::Failed(e.to_string()),
                }
            }
            Err(ureq::Error::Timeout(_)) => TransportOutcome::TimedOut,
            Err(e) => TransportOutcome::Failed(e.to_string()),
        }
    }
}

pub struct LlmClient {
    config: LlmClientConfig,
    transport: Box<dyn Transport>,
    token: Option<String>,
    sleep: Box<dyn Fn(Duration) + Send + Sync>,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("config", &self.config)
            .field("has_token", &self.token.is_some())
            .finish()
    }
}

impl LlmClient {
    pub fn mock() -> Self {
        Self::with_transport(LlmClientConfig::default(), Box::new(MockTransport))
    }

    /// Builds the client the config asks for. Outside mock mode this needs
    /// an endpoint, the token variable, and the `http` feature.
    pub fn from_config(config: LlmClientConfig) -> Result<Self, LlmError> {
        if config.mock {
            return Ok(Self::with_transport(config, Box::new(MockTransport)));
        }
        let Some(_) = config.endpoint.as_deref() else {
            return Err(LlmError::NotConfigured(
                "no endpoint outside mock mode".into(),
            ));
        };
        let token = std::env::var(&config.token_env)
            .map_err(|_| LlmError::MissingToken(config.token_env.clone()))?;
        #[cfg(feature = "http")]
        {
            let mut client = Self::with_transport(config, Box::new(HttpTransport));
            client.token = Some(token);
            Ok(client)
        }
        #[cfg(not(feature = "http"))]
        {
            let _ = token;
            Err(LlmError::NotConfigured(
                "built without the http feature".into(),
            ))
        }
    }

    pub fn with_transport(config: LlmClientConfig, transport: Box<dyn Transport>) -> Self {
        LlmClient {
            config,
            transport,
            token: None,
            sleep: Box::new(std::thread::sleep),
        }
    }

    /// Replaces the backoff sleep, e.g. with a no-op in tests.
    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.config
    }

    /// One chat completion with exponential backoff on 429, 5xx and timeouts.
    pub fn complete(&self, system: &str, user: &str) -> Result<String, LlmError> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        })
        .to_string();
        let url = self.config.endpoint.as_deref().unwrap_or("mock://llm");
        let timeout = Duration::from_secs_f64(self.config.timeout_secs.max(0.001));
        let max_attempts = self.config.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = self
                .transport
                .post(url, self.token.as_deref(), &body, timeout);
            let retryable = match outcome {
                TransportOutcome::Response {
                    status: 200..=299,
                    body,
                } => {
                    return extract_content(&body);
                }
                TransportOutcome::Response { status: 429, .. } => {
                    LlmError::RateLimited { attempts: attempt }
                }
                TransportOutcome::Response { status, body } if status >= 500 => LlmError::Status {
                    status,
                    attempts: attempt,
                    body,
                },
                TransportOutcome::Response { status, body } => {
                    return Err(LlmError::Status {
                        status,
                        attempts: attempt,
                        body,
                    })
                }
                TransportOutcome::TimedOut => LlmError::Timeout { attempts: attempt },
                TransportOutcome::Failed(msg) => return Err(LlmError::Transport(msg)),
            };
            if attempt >= max_attempts {
                return Err(retryable);
            }
            let delay = self
                .config
                .backoff_ms
                .saturating_mul(1 << (attempt - 1).min(16));
            log::warn!(
                "llm request attempt {attempt} failed ({retryable}); retrying in {delay} ms"
            );
            (self.sleep)(Duration::from_millis(delay));
        }
    }
}

fn extract_content(body: &str) -> Result<String, LlmError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(|s| s.trim().to_string())
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))
}

/// Maps activations onto integer levels 0..=10 relative to their own range.
/// A constant input maps every entry to 0.
pub fn discretize(activations: &[f64]) -> Vec<u8> {
    let (lo, hi) = activations
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    if !(hi > lo) {
        return vec![0; activations.len()];
    }
    activations
        .iter()
        .map(|&a| (10.0 * (a - lo) / (hi - lo)).round().clamp(0.0, 10.0) as u8)
        .collect()
}

const DESCRIBE_SYSTEM: &str =
    "You are an interpretability assistant that explains what a neural network feature detects.";
const CLASSIFY_SYSTEM: &str =
    "You decide whether a neural network feature is relevant to a training task.";

pub fn build_description_prompt(feature: usize, pairs: &[(String, f64)]) -> Result<String> {
    if pairs.is_empty() {
        return Err(LlmError::EmptyInput("no token/activation pairs".into()).into());
    }
    let values: Vec<f64> = pairs.iter().map(|(_, a)| *a).collect();
    let levels = discretize(&values);
    let mut prompt = format!(
        "[{PROMPT_VERSION}]\nFeature {feature}. Below are tokens with the feature's activation \
         level on a 0-10 scale.\n"
    );
    if levels.iter().all(|&l| l == 0) && pairs.len() > 1 {
        prompt.push_str("Note: all activations were equal, so every level is 0.\n");
    }
    for ((token, _), level) in pairs.iter().zip(&levels) {
        prompt.push_str(&format!("{token}\t{level}\n"));
    }
    prompt.push_str("\nIn one sentence, describe what this feature detects.");
    Ok(prompt)
}

pub fn build_classification_prompt(description: &str, task_description: &str) -> String {
    format!(
        "[{PROMPT_VERSION}]\nTask: {task_description}\n\nFeature description:{description}\n\n\
         Is this feature relevant to the task? {CLASSIFY_MARKER}"
    )
}

pub fn describe_feature(client: &LlmClient, prompt: &str) -> Result<String> {
    let text = client.complete(DESCRIBE_SYSTEM, prompt)?;
    if text.is_empty() {
        return Err(LlmError::MalformedResponse("empty description".into()).into());
    }
    Ok(text)
}

/// Strict yes/no parsing; anything else is an error, never a default.
pub fn parse_yes_no(answer: &str) -> Result<bool, LlmError> {
    let word = answer
        .trim()
        .trim_end_matches(['.', '!'])
        .trim()
        .to_lowercase();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(LlmError::Unparseable(answer.to_string())),
    }
}

pub fn classify_related(
    client: &LlmClient,
    description: &str,
    task_description: &str,
) -> Result<bool> {
    if description.trim().is_empty() || task_description.trim().is_empty() {
        return Err(LlmError::EmptyInput("description and task must be non-empty".into()).into());
    }
    let answer = client.complete(
        CLASSIFY_SYSTEM,
        &build_classification_prompt(description, task_description),
    )?;
    Ok(parse_yes_no(&answer)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExplanation {
    pub layer: usize,
    pub feature: usize,
    pub description: String,
    pub related: bool,
    pub raw_response: String,
}

#[derive(Clone, Debug)]
pub struct ExplainRequest {
    pub layer: usize,
    pub feature: usize,
    pub pairs: Vec<(String, f64)>,
}

/// Describes and classifies each request, running at most
/// `max_concurrency` requests at once. Output order follows input order.
pub fn explain_features(
    client: &LlmClient,
    requests: &[ExplainRequest],
    task_description: &str,
) -> Result<Vec<FeatureExplanation>> {
    let width = client.config.max_concurrency.max(1);
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(width) {
        let results: Vec<Result<FeatureExplanation>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|r| s.spawn(move || explain_one(client, r, task_description)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("explain worker panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn explain_one(client: &LlmClient, r: &ExplainRequest, task: &str) -> Result<FeatureExplanation> {
    let prompt = build_description_prompt(r.feature, &r.pairs)?;
    let description = describe_feature(client, &prompt)?;
    let related = classify_related(client, &description, task)?;
    Ok(FeatureExplanation {
        layer: r.layer,
        feature: r.feature,
        raw_response: description.clone(),
        description,
        related,
    })
}

pub fn write_explanations(items: &[FeatureExplanation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for item in items {
        let line = serde_json::to_string(item).expect("explanation serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

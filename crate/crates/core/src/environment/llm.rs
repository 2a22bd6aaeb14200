//! Completion-service environment, with transcript recording and replay.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompt::{parse_delimited, render_env_prompt, ParseError, BEGIN_PLOT};
use super::{EnvError, Encoder, Entity, Environment};
use crate::design::ActionCandidate;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{message}")]
pub struct ServiceError {
    pub message: String,
    /// Retrying may succeed (timeouts, 5xx, 429).
    pub transient: bool,
}

impl ServiceError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            transient: true,
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            transient: false,
        }
    }
}

/// Bounded exponential backoff: `base, 2 base, 4 base, ...` for
/// `max_retries` retries after the first attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
        }
    }

    pub fn delays(&self) -> impl Iterator<Item = Duration> + '_ {
        (0..self.max_retries).map(|i| self.base_delay * 2u32.pow(i))
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let mut delays = self.delays();
        loop {
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.transient => match delays.next() {
                    Some(d) => {
                        warn!("transient service failure ({e}); retrying in {d:?}");
                        std::thread::sleep(d);
                    }
                    None => return Err(e),
                },
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
}

pub trait CompletionClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ServiceError>;
}

impl<C: CompletionClient + ?Sized> CompletionClient for Arc<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ServiceError> {
        (**self).complete(request)
    }
}

/// Endpoint, credential, and a pooled HTTP agent.
#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub endpoint: String,
    pub credential: Option<String>,
    agent: ureq::Agent,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>, credential: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            credential,
            agent,
        }
    }
}

pub(crate) fn post_json<Req: Serialize, Resp: DeserializeOwned>(
    http: &HttpSettings,
    body: &Req,
) -> Result<Resp, ServiceError> {
    let mut req = http.agent.post(&http.endpoint);
    if let Some(key) = &http.credential {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let mut resp = req
        .send_json(body)
        .map_err(|e| ServiceError::transient(format!("request to {} failed: {e}", http.endpoint)))?;
    let status = resp.status().as_u16();
    if status == 429 || status >= 500 {
        return Err(ServiceError::transient(format!("service returned HTTP {status}")));
    }
    if !(200..300).contains(&status) {
        return Err(ServiceError::permanent(format!("service returned HTTP {status}")));
    }
    resp.body_mut()
        .read_json::<Resp>()
        .map_err(|e| ServiceError::permanent(format!("malformed service response: {e}")))
}

/// Completion service over HTTP: POST `{prompt, temperature, max_tokens}`,
/// expecting `{text}`.
#[derive(Debug, Clone)]
pub struct HttpCompletionClient {
    http: HttpSettings,
}

impl HttpCompletionClient {
    pub fn new(http: HttpSettings) -> Self {
        Self { http }
    }
}

impl CompletionClient for HttpCompletionClient {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ServiceError> {
        post_json(&self.http, request)
    }
}

/// One line of a transcript file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub prompt: String,
    pub temperature: f64,
    pub response: String,
}

impl TranscriptEntry {
    pub fn read_all(path: &Path) -> std::io::Result<Vec<Self>> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("transcript line {}: {e}", i + 1))
            })?;
            out.push(entry);
        }
        Ok(out)
    }
}

/// Wraps a client and appends every successful exchange to a transcript.
pub struct RecordingClient<C> {
    inner: C,
    sink: Mutex<Box<dyn Write + Send>>,
}

impl<C: CompletionClient> RecordingClient<C> {
    pub fn new(inner: C, sink: Box<dyn Write + Send>) -> Self {
        Self {
            inner,
            sink: Mutex::new(sink),
        }
    }

    /// Appends to the transcript file at `path`, creating it if needed.
    pub fn to_file(inner: C, path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self::new(inner, Box::new(BufWriter::new(file))))
    }
}

impl<C: CompletionClient> CompletionClient for RecordingClient<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ServiceError> {
        let resp = self.inner.complete(request)?;
        let entry = TranscriptEntry {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            prompt: request.prompt.clone(),
            temperature: request.temperature,
            response: resp.text.clone(),
        };
        let line = serde_json::to_string(&entry).expect("transcript entry serializes");
        let mut sink = self.sink.lock().expect("transcript lock poisoned");
        writeln!(sink, "{line}")
            .and_then(|_| sink.flush())
            .map_err(|e| ServiceError::permanent(format!("writing transcript: {e}")))?;
        Ok(resp)
    }
}

/// Serves recorded responses, first-in first-out per (prompt, temperature).
pub struct ReplayClient {
    queues: Mutex<HashMap<(String, u64), VecDeque<String>>>,
}

impl ReplayClient {
    pub fn new(entries: impl IntoIterator<Item = TranscriptEntry>) -> Self {
        let mut queues: HashMap<(String, u64), VecDeque<String>> = HashMap::new();
        for e in entries {
            queues
                .entry((e.prompt, e.temperature.to_bits()))
                .or_default()
                .push_back(e.response);
        }
        Self {
            queues: Mutex::new(queues),
        }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::new(TranscriptEntry::read_all(path)?))
    }
}

impl CompletionClient for ReplayClient {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ServiceError> {
        let mut queues = self.queues.lock().expect("replay lock poisoned");
        queues
            .get_mut(&(request.prompt.clone(), request.temperature.to_bits()))
            .and_then(|q| q.pop_front())
            .map(|text| CompletionResponse { text })
            .ok_or_else(|| ServiceError::permanent("no recorded response for this request"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlmStepConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub retry: RetryPolicy,
}

impl Default for LlmStepConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            max_tokens: 1024,
            retry: RetryPolicy::default(),
        }
    }
}

/// Parses a completion. A response that continues the prompt's open plot
/// block (i.e. starts inside it) is accepted as if it began with the marker.
fn parse_response(text: &str) -> Result<super::Description, ParseError> {
    match parse_delimited(text) {
        Err(ParseError::MissingDelimiter(BEGIN_PLOT)) if text.contains(super::prompt::END_PLOT) => {
            parse_delimited(&format!("{BEGIN_PLOT}\n{text}"))
        }
        other => other,
    }
}

/// One environment transition through a completion service.
pub fn llm_step(
    state: &Entity,
    action: &ActionCandidate,
    client: &dyn CompletionClient,
    encoder: &dyn Encoder,
    cfg: &LlmStepConfig,
) -> Result<Entity, EnvError> {
    let request = CompletionRequest {
        prompt: render_env_prompt(state, &action.prompt_text)?,
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
    };
    let response = cfg.retry.run(|| client.complete(&request))?;
    let desc = parse_response(&response.text).map_err(|error| {
        warn!("unparseable environment response for state {}: {error}", state.id);
        EnvError::Parse {
            error,
            raw: response.text.clone(),
        }
    })?;
    debug!("state {} transitioned under action {}", state.id, action.id);
    Ok(Entity::encoded(state.id, desc.to_text(), encoder)?)
}

#[derive(Clone)]
pub struct LlmEnvironment {
    pub client: Arc<dyn CompletionClient>,
    pub encoder: Arc<dyn Encoder>,
    pub cfg: LlmStepConfig,
}

impl LlmEnvironment {
    pub fn new(client: Arc<dyn CompletionClient>, encoder: Arc<dyn Encoder>, cfg: LlmStepConfig) -> Self {
        Self { client, encoder, cfg }
    }
}

impl Environment for LlmEnvironment {
    fn step(
        &self,
        state: &Entity,
        action: &ActionCandidate,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Entity, EnvError> {
        llm_step(state, action, self.client.as_ref(), self.encoder.as_ref(), &self.cfg)
    }
}

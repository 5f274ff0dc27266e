//! Client for remote chat-style vision-language endpoints.
//!
//! Wire contract: `POST <endpoint>` with JSON `{"prompt": str, "image":
//! base64}` and response `{"text": str}`. Status 200 succeeds, 401/403 fail
//! without retry, 429 and 5xx (and transport timeouts or connection errors)
//! are retried with exponential backoff. The bearer token is read from the
//! environment variable named in the config, never from the config itself.
//!
//! [`batch_probe`] drives one request per sample and appends each outcome to
//! a line-delimited transcript as soon as it arrives, so an interrupted run
//! resumes where it stopped. A completed batch leaves the transcript in
//! sample order.

use std::collections::{HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::images::ImageStore;
use crate::manifest::Sample;
use crate::prompt::PromptSpec;

pub const MAX_RETRIES_LIMIT: u32 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatBackendConfig {
    pub endpoint: String,
    pub auth_env_var: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_secs: f64,
    /// Maximum number of requests in flight during a batch probe.
    pub concurrency: usize,
}

impl Default for ChatBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/chat".to_string(),
            auth_env_var: "OOC_CHAT_TOKEN".to_string(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_base_secs: 1.0,
            concurrency: 4,
        }
    }
}

impl ChatBackendConfig {
    pub fn validate(&self) -> Result<(), ChatError> {
        let bad = |m: String| Err(ChatError::Config(m));
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return bad(format!(
                "endpoint {:?} is not an http(s) URL",
                self.endpoint
            ));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return bad("timeout_secs must be positive".into());
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return bad(format!("max_retries must be at most {MAX_RETRIES_LIMIT}"));
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_base_secs.is_finite()) {
            return bad("backoff_base_secs must be non-negative".into());
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1".into());
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_secs * 2f64.powi(retry as i32))
    }
}

#[derive(Debug, Serialize)]
pub struct ChatRequest<'a> {
    pub prompt: &'a str,
    pub image: String,
}

impl<'a> ChatRequest<'a> {
    pub fn new(prompt: &'a str, image: &[u8]) -> Self {
        Self {
            prompt,
            image: base64::engine::general_purpose::STANDARD.encode(image),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponseBody {
    text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection error: {0}")]
    Connection(String),
}

/// Sends one serialized request body and returns the raw status and body.
pub trait Transport: Send + Sync {
    fn post(&self, body: &str) -> Result<RawReply, TransportError>;
}

pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(config: &ChatBackendConfig) -> Self {
        let token = std::env::var(&config.auth_env_var)
            .ok()
            .filter(|t| !t.is_empty());
        if token.is_none() {
            log::warn!(
                "{} is not set; sending requests without a bearer token",
                config.auth_env_var
            );
        }
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        Self {
            agent,
            endpoint: config.endpoint.clone(),
            token,
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &str) -> Result<RawReply, TransportError> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.set("Authorization", &format!("Bearer {t}"));
        }
        let read_body = |resp: ureq::Response| {
            let status = resp.status();
            resp.into_string()
                .map(|body| RawReply { status, body })
                .map_err(|e| io_error(&e))
        };
        match req.send_string(body) {
            Ok(resp) => read_body(resp),
            Err(ureq::Error::Status(_, resp)) => read_body(resp),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("Timeout") {
                    Err(TransportError::Timeout)
                } else {
                    Err(TransportError::Connection(msg))
                }
            }
        }
    }
}

fn io_error(e: &io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => TransportError::Timeout,
        _ => TransportError::Connection(e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChatError {
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("authentication rejected (status {0})")]
    Auth(u16),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response body: {0}")]
    Malformed(String),
    #[error("timed out on every attempt")]
    Timeout,
    #[error("retries exhausted, last failure: {0}")]
    RetriesExhausted(String),
    #[error("cannot read image {image_ref}: {message}")]
    Image { image_ref: String, message: String },
    #[error("cannot build prompt: {0}")]
    Prompt(String),
    #[error("no samples to probe")]
    EmptyBatch,
    #[error("transcript line {line}: {message}")]
    Transcript { line: usize, message: String },
    #[error("transcript i/o: {0}")]
    Io(String),
}

impl From<io::Error> for ChatError {
    fn from(e: io::Error) -> Self {
        ChatError::Io(e.to_string())
    }
}

impl ChatError {
    pub fn is_auth(&self) -> bool {
        matches!(self, ChatError::Auth(_))
    }
}

/// A failed exchange together with how many attempts were spent on it.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error} ({attempts} attempt(s))")]
pub struct ChatFailure {
    pub error: ChatError,
    pub attempts: u32,
    pub latency_secs: f64,
}

/// One completed request. `raw_response` is the backend text, untouched.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatExchange {
    pub prompt: String,
    pub image_ref: String,
    pub raw_response: String,
    pub latency_secs: f64,
    pub attempt_count: u32,
}

enum Attempt {
    Done(String),
    Fatal(ChatError),
    Retry { reason: String, timeout: bool },
}

fn classify(reply: Result<RawReply, TransportError>) -> Attempt {
    match reply {
        Ok(RawReply { status: 200, body }) => match serde_json::from_str::<ChatResponseBody>(&body)
        {
            Ok(parsed) => Attempt::Done(parsed.text),
            Err(e) => Attempt::Fatal(ChatError::Malformed(e.to_string())),
        },
        Ok(RawReply {
            status: s @ (401 | 403),
            ..
        }) => Attempt::Fatal(ChatError::Auth(s)),
        Ok(RawReply { status, body }) if status == 429 || (500..600).contains(&status) => {
            Attempt::Retry {
                reason: format!("status {status}: {body}"),
                timeout: false,
            }
        }
        Ok(RawReply { status, body }) => Attempt::Fatal(ChatError::Rejected { status, body }),
        Err(TransportError::Timeout) => Attempt::Retry {
            reason: "timeout".into(),
            timeout: true,
        },
        Err(e) => Attempt::Retry {
            reason: e.to_string(),
            timeout: false,
        },
    }
}

pub struct ChatClient<T: Transport = HttpTransport> {
    config: ChatBackendConfig,
    transport: T,
}

impl ChatClient<HttpTransport> {
    pub fn http(config: ChatBackendConfig) -> Result<Self, ChatError> {
        config.validate()?;
        let transport = HttpTransport::new(&config);
        Ok(Self { config, transport })
    }
}

impl<T: Transport> ChatClient<T> {
    pub fn with_transport(config: ChatBackendConfig, transport: T) -> Result<Self, ChatError> {
        config.validate()?;
        Ok(Self { config, transport })
    }

    pub fn config(&self) -> &ChatBackendConfig {
        &self.config
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Send one image + prompt, retrying transient failures up to
    /// `max_retries` times. Makes at most `max_retries + 1` attempts.
    pub fn chat_verdict_raw(
        &self,
        image_ref: &str,
        image: &[u8],
        prompt: &str,
    ) -> Result<ChatExchange, ChatFailure> {
        let body =
            serde_json::to_string(&ChatRequest::new(prompt, image)).expect("request serializes");
        let started = Instant::now();
        let mut attempts = 0;
        let mut all_timeouts = true;
        let mut last_reason = String::new();

        while attempts <= self.config.max_retries {
            if attempts > 0 {
                std::thread::sleep(self.config.backoff(attempts - 1));
            }
            attempts += 1;
            match classify(self.transport.post(&body)) {
                Attempt::Done(raw_response) => {
                    return Ok(ChatExchange {
                        prompt: prompt.to_string(),
                        image_ref: image_ref.to_string(),
                        raw_response,
                        latency_secs: started.elapsed().as_secs_f64(),
                        attempt_count: attempts,
                    })
                }
                Attempt::Fatal(error) => {
                    return Err(ChatFailure {
                        error,
                        attempts,
                        latency_secs: started.elapsed().as_secs_f64(),
                    })
                }
                Attempt::Retry { reason, timeout } => {
                    log::debug!("attempt {attempts} for {image_ref} failed: {reason}");
                    all_timeouts &= timeout;
                    last_reason = reason;
                }
            }
        }
        Err(ChatFailure {
            error: if all_timeouts {
                ChatError::Timeout
            } else {
                ChatError::RetriesExhausted(last_reason)
            },
            attempts,
            latency_secs: started.elapsed().as_secs_f64(),
        })
    }
}

/// One transcript line. Exactly one of `raw_response` and `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    pub id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency: f64,
    pub attempts: u32,
}

impl TranscriptRecord {
    pub fn is_answered(&self) -> bool {
        self.raw_response.is_some()
    }

    fn answered(id: &str, ex: ChatExchange) -> Self {
        Self {
            id: id.to_string(),
            prompt: ex.prompt,
            raw_response: Some(ex.raw_response),
            error: None,
            latency: ex.latency_secs,
            attempts: ex.attempt_count,
        }
    }

    fn failed(id: &str, prompt: String, error: &ChatError, attempts: u32, latency: f64) -> Self {
        Self {
            id: id.to_string(),
            prompt,
            raw_response: None,
            error: Some(error.to_string()),
            latency,
            attempts,
        }
    }
}

/// Read a transcript. An unparsable final line is treated as an interrupted
/// write and dropped; any other malformed line is an error.
pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, ChatError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = io::BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty());
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TranscriptRecord>(line) {
            Ok(r) if r.raw_response.is_some() != r.error.is_some() => out.push(r),
            Ok(_) => {
                return Err(ChatError::Transcript {
                    line: i + 1,
                    message: "record needs exactly one of raw_response and error".into(),
                })
            }
            Err(_) if Some(i) == last => {
                log::warn!("dropping truncated final transcript line {}", i + 1)
            }
            Err(e) => {
                return Err(ChatError::Transcript {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn rewrite_transcript(path: &Path, records: &[&TranscriptRecord]) -> Result<(), ChatError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
        for r in records {
            serde_json::to_writer(&mut f, r).map_err(|e| ChatError::Io(e.to_string()))?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Probe every sample once and return one transcript record per sample, in
/// sample order.
///
/// Samples already answered in `transcript` are not sent again. Error
/// records from an earlier run are dropped from the transcript and retried,
/// so each id appears at most once. Per-sample failures become error records
/// and never abort the batch.
pub fn batch_probe<T: Transport>(
    client: &ChatClient<T>,
    samples: &[Sample],
    images: &dyn ImageStore,
    prompt: &PromptSpec,
    transcript: &Path,
) -> Result<Vec<TranscriptRecord>, ChatError> {
    if samples.is_empty() {
        return Err(ChatError::EmptyBatch);
    }

    let existing = read_transcript(transcript)?;
    let mut answered: HashMap<String, TranscriptRecord> = HashMap::new();
    let mut needs_rewrite = false;
    for r in existing {
        if r.is_answered() && !answered.contains_key(&r.id) {
            answered.insert(r.id.clone(), r);
        } else {
            needs_rewrite = true;
        }
    }
    if needs_rewrite || transcript.exists() {
        // drops stale errors and any truncated tail before appending
        let mut kept: Vec<&TranscriptRecord> = answered.values().collect();
        kept.sort_by(|a, b| a.id.cmp(&b.id));
        let order: HashMap<&str, usize> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        kept.sort_by_key(|r| order.get(r.id.as_str()).copied().unwrap_or(usize::MAX));
        rewrite_transcript(transcript, &kept)?;
    }

    let mut seen = HashSet::new();
    let pending: Vec<usize> = (0..samples.len())
        .filter(|&i| !answered.contains_key(&samples[i].id) && seen.insert(samples[i].id.as_str()))
        .collect();
    let mut results: Vec<Option<TranscriptRecord>> = samples
        .iter()
        .map(|s| answered.get(&s.id).cloned())
        .collect();

    if !pending.is_empty() {
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(transcript)?;
        let next = AtomicUsize::new(0);
        let workers = client.config.concurrency.min(pending.len());
        let (tx, rx) = mpsc::channel::<(usize, TranscriptRecord)>();

        std::thread::scope(|scope| -> Result<(), ChatError> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, pending) = (&next, &pending);
                scope.spawn(move || loop {
                    let k = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&idx) = pending.get(k) else { break };
                    let record = probe_one(client, &samples[idx], images, prompt);
                    if tx.send((idx, record)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            // single writer: one complete line per record
            for (idx, record) in rx {
                let mut line =
                    serde_json::to_vec(&record).map_err(|e| ChatError::Io(e.to_string()))?;
                line.push(b'\n');
                log.write_all(&line)?;
                log.flush()?;
                results[idx] = Some(record);
            }
            Ok(())
        })?;
    }

    // duplicate sample ids share the first occurrence's record
    let by_id: HashMap<String, TranscriptRecord> = results
        .iter()
        .flatten()
        .map(|r| (r.id.clone(), r.clone()))
        .collect();
    let out: Vec<TranscriptRecord> = samples.iter().map(|s| by_id[&s.id].clone()).collect();

    // lines were appended in completion order; settle them into sample order
    let mut written = HashSet::new();
    let ordered: Vec<&TranscriptRecord> = out
        .iter()
        .filter(|r| written.insert(r.id.as_str()))
        .collect();
    rewrite_transcript(transcript, &ordered)?;
    Ok(out)
}

fn probe_one<T: Transport>(
    client: &ChatClient<T>,
    sample: &Sample,
    images: &dyn ImageStore,
    prompt: &PromptSpec,
) -> TranscriptRecord {
    let text = match prompt.render(&sample.caption) {
        Ok(t) => t,
        Err(e) => {
            return TranscriptRecord::failed(
                &sample.id,
                String::new(),
                &ChatError::Prompt(e.to_string()),
                0,
                0.0,
            )
        }
    };
    let bytes = match images.load(&sample.image_ref) {
        Ok(b) => b,
        Err(e) => {
            let err = ChatError::Image {
                image_ref: sample.image_ref.clone(),
                message: e.to_string(),
            };
            return TranscriptRecord::failed(&sample.id, text, &err, 0, 0.0);
        }
    };
    match client.chat_verdict_raw(&sample.image_ref, &bytes, &text) {
        Ok(ex) => TranscriptRecord::answered(&sample.id, ex),
        Err(f) => TranscriptRecord::failed(&sample.id, text, &f.error, f.attempts, f.latency_secs),
    }
}

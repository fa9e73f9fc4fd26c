//! Zero-shot transliteration baseline over a chat-completion HTTP service,
//! with an offline mock transport for tests.
//!
//! One request is issued per sentence using a versioned prompt template;
//! responses are reduced to the final non-empty line. Failures retry with
//! exponential backoff up to a configured limit, and items that never yield
//! text are flagged failed rather than aborting the batch. The mock
//! transport replays canned responses from a JSONL fixture and performs no
//! network access by construction.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::finetune::Direction;
use crate::metrics::{metric_report, MetricReport, MetricsError};

/// Prompt template `v1`. `{source_script}` / `{target_script}` / `{text}`
/// are substituted per item.
pub const PROMPT_TEMPLATE_V1: &str =
    "Transliterate the following {source_script} sentence into {target_script}. Output only the transliteration.\n\n{text}";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("api key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad fixture file: {0}")]
    BadFixture(String),
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("transcript has {items} items but {refs} references")]
    AlignmentMismatch { items: usize, refs: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("http error: {0}")]
    Http(String),
}

/// Client configuration. The defaults replicate the zero-shot protocol:
/// `temperature = 1`, `top_p = 1`, and no other sampling overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub prompt_template_id: String,
    /// Maximum concurrently issued requests.
    pub max_in_flight: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            temperature: 1.0,
            top_p: 1.0,
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            max_retries: 3,
            prompt_template_id: "v1".into(),
            max_in_flight: 1,
        }
    }
}

/// One scored item of a batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptItem {
    pub input: String,
    pub direction: Direction,
    pub raw_response: String,
    pub extracted: String,
    pub latency_ms: u64,
    pub retries: u32,
    pub failed: bool,
}

/// The full batch record, in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub model: String,
    pub template_id: String,
    pub items: Vec<TranscriptItem>,
}

/// Renders the prompt for one item.
pub fn render_prompt(template_id: &str, text: &str, direction: Direction) -> Result<String, LlmError> {
    if template_id != "v1" {
        return Err(LlmError::UnknownTemplate(template_id.to_string()));
    }
    let (source_script, target_script) = match direction {
        Direction::SrcToTgt => ("Urdu", "Roman Urdu"),
        Direction::TgtToSrc => ("Roman Urdu", "Urdu"),
    };
    Ok(PROMPT_TEMPLATE_V1
        .replace("{source_script}", source_script)
        .replace("{target_script}", target_script)
        .replace("{text}", text))
}

/// The JSON request body. Under the default preset this carries exactly
/// `model`, `messages`, `temperature`, and `top_p` — no other sampling
/// parameters.
pub fn build_request_body(cfg: &LlmConfig, prompt: &str) -> serde_json::Value {
    serde_json::json!({
        "model": cfg.model,
        "messages": [{ "role": "user", "content": prompt }],
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
    })
}

struct Completion {
    body: String,
    latency_ms: u64,
}

/// Request transports. `Mock` never opens a socket.
pub enum Transport {
    Http(HttpTransport),
    Mock(MockTransport),
}

impl Transport {
    pub fn http() -> Self {
        Transport::Http(HttpTransport)
    }

    pub fn mock_from_file(path: &Path) -> Result<Self, LlmError> {
        Ok(Transport::Mock(MockTransport::from_file(path)?))
    }

    fn complete(&self, cfg: &LlmConfig, api_key: Option<&str>, input: &str, prompt: &str) -> Result<Completion, LlmError> {
        match self {
            Transport::Http(t) => t.complete(cfg, api_key, prompt),
            Transport::Mock(t) => t.complete(input),
        }
    }

    fn is_mock(&self) -> bool {
        matches!(self, Transport::Mock(_))
    }
}

pub struct HttpTransport;

impl HttpTransport {
    fn complete(&self, cfg: &LlmConfig, api_key: Option<&str>, prompt: &str) -> Result<Completion, LlmError> {
        let key = api_key.ok_or_else(|| LlmError::MissingApiKey(cfg.api_key_env.clone()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Http(e.to_string()))?;
        let started = std::time::Instant::now();
        let response = client
            .post(&cfg.endpoint)
            .bearer_auth(key)
            .json(&build_request_body(cfg, prompt))
            .send()
            .map_err(|e| LlmError::Http(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        if !response.status().is_success() {
            return Err(LlmError::Http(format!("status {}", response.status())));
        }
        let value: serde_json::Value = response.json().map_err(|e| LlmError::Http(e.to_string()))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| LlmError::Http("response missing choices[0].message.content".into()))?;
        Ok(Completion { body: content.to_string(), latency_ms })
    }
}

/// One fixture row: response scheduled for the next request carrying `input`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockFixture {
    pub input: String,
    #[serde(default)]
    pub response: String,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub fail: bool,
}

/// Replays fixtures in file order, per input. A retry for the same input
/// consumes the next queued fixture, which lets tests script exact
/// retry/latency schedules.
pub struct MockTransport {
    queues: Mutex<HashMap<String, VecDeque<MockFixture>>>,
}

impl MockTransport {
    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let body = fs::read_to_string(path).map_err(|e| LlmError::Io { path: path.display().to_string(), source: e })?;
        let mut fixtures = Vec::new();
        for (i, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: MockFixture =
                serde_json::from_str(line).map_err(|e| LlmError::BadFixture(format!("line {}: {e}", i + 1)))?;
            fixtures.push(f);
        }
        Ok(Self::from_fixtures(fixtures))
    }

    pub fn from_fixtures(fixtures: Vec<MockFixture>) -> Self {
        let mut queues: HashMap<String, VecDeque<MockFixture>> = HashMap::new();
        for f in fixtures {
            queues.entry(f.input.clone()).or_default().push_back(f);
        }
        Self { queues: Mutex::new(queues) }
    }

    fn complete(&self, input: &str) -> Result<Completion, LlmError> {
        let fixture = {
            let mut queues = self.queues.lock().expect("mock queue lock");
            queues.get_mut(input).and_then(VecDeque::pop_front)
        };
        match fixture {
            Some(f) if f.fail => Err(LlmError::Http(format!("scripted failure after {}ms", f.latency_ms))),
            Some(f) => Ok(Completion { body: f.response, latency_ms: f.latency_ms }),
            None => Err(LlmError::Http(format!("no fixture queued for input {input:?}"))),
        }
    }
}

/// Strips any model preamble down to the transliteration line: the last
/// non-empty line, trimmed, with surrounding quotes removed.
fn extract_transliteration(raw: &str) -> String {
    let line = raw.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    line.trim_matches('"').trim().to_string()
}

/// Transliterates a batch, one request per item, preserving input order.
/// Failures are retried with exponential backoff (sleeps apply to the HTTP
/// transport only); items still failing are flagged, not fatal.
pub fn transliterate_batch(
    items: &[(String, Direction)],
    cfg: &LlmConfig,
    transport: &Transport,
) -> Result<Transcript, LlmError> {
    let api_key = match transport {
        Transport::Http(_) => Some(std::env::var(&cfg.api_key_env).map_err(|_| LlmError::MissingApiKey(cfg.api_key_env.clone()))?),
        Transport::Mock(_) => None,
    };

    let run_item = |(input, direction): &(String, Direction)| -> Result<TranscriptItem, LlmError> {
        let prompt = render_prompt(&cfg.prompt_template_id, input, *direction)?;
        let mut retries = 0u32;
        let mut latency_total = 0u64;
        let mut last_raw = String::new();
        loop {
            let attempt = transport.complete(cfg, api_key.as_deref(), input, &prompt);
            match attempt {
                Ok(completion) => {
                    latency_total += completion.latency_ms;
                    let extracted = extract_transliteration(&completion.body);
                    last_raw = completion.body;
                    if !extracted.is_empty() {
                        return Ok(TranscriptItem {
                            input: input.clone(),
                            direction: *direction,
                            raw_response: last_raw,
                            extracted,
                            latency_ms: latency_total,
                            retries,
                            failed: false,
                        });
                    }
                }
                Err(LlmError::MissingApiKey(v)) => return Err(LlmError::MissingApiKey(v)),
                Err(_) => {}
            }
            if retries >= cfg.max_retries {
                return Ok(TranscriptItem {
                    input: input.clone(),
                    direction: *direction,
                    raw_response: last_raw,
                    extracted: String::new(),
                    latency_ms: latency_total,
                    retries,
                    failed: true,
                });
            }
            retries += 1;
            if !transport.is_mock() {
                std::thread::sleep(Duration::from_millis(250u64.saturating_mul(1 << retries.min(6))));
            }
        }
    };

    let items_out: Vec<TranscriptItem> = if cfg.max_in_flight <= 1 || items.len() <= 1 {
        items.iter().map(run_item).collect::<Result<_, _>>()?
    } else {
        // fixed worker pool over an index queue; output slots keep input order
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<TranscriptItem, LlmError>>>> =
            (0..items.len()).map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..cfg.max_in_flight.min(items.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let result = run_item(&items[i]);
                    *slots[i].lock().expect("slot lock") = Some(result);
                });
            }
        });
        let mut out = Vec::with_capacity(items.len());
        for slot in slots {
            out.push(slot.into_inner().expect("slot lock").expect("worker filled slot")?);
        }
        out
    };

    Ok(Transcript { model: cfg.model.clone(), template_id: cfg.prompt_template_id.clone(), items: items_out })
}

/// Scores a transcript against aligned references. Failed items score as
/// empty hypotheses.
pub fn score_transcript(transcript: &Transcript, refs: &[String]) -> Result<MetricReport, LlmError> {
    if transcript.items.len() != refs.len() {
        return Err(LlmError::AlignmentMismatch { items: transcript.items.len(), refs: refs.len() });
    }
    let hyps: Vec<String> =
        transcript.items.iter().map(|i| if i.failed { String::new() } else { i.extracted.clone() }).collect();
    Ok(metric_report(&hyps, refs)?)
}

//! LLM-as-judge client.
//!
//! Renders the yes/no grading prompt, sends it to an OpenAI-compatible
//! chat-completions endpoint, parses the verdict and caches it under the
//! SHA-256 of the rendered prompt. Transient transport failures (connection
//! errors, timeouts, HTTP 429 and 5xx) are retried with capped exponential
//! backoff.
//!
//! The cache file holds one `{"key": …, "verdict": …, "raw": …}` object per line.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Grading instruction placed before the question and answers.
pub const JUDGE_INSTRUCTION: &str = "Your task is to compare the model's answer to the expected \
answer and determine if the model's answer is correct. Respond with \"yes\" if the answer is \
correct, and \"no\" if it is incorrect. Do not include any explanations.";

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge request field {0:?} is empty")]
    EmptyField(&'static str),
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("verdict cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("verdict cache line {line}: {message}")]
    CacheFormat { line: usize, message: String },
    #[error("API key variable {0} is not set")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub question: String,
    pub expected_answer: String,
    pub model_answer: String,
}

impl JudgeRequest {
    pub fn new(
        question: impl Into<String>,
        expected_answer: impl Into<String>,
        model_answer: impl Into<String>,
    ) -> Result<Self, JudgeError> {
        let req = Self {
            question: question.into(),
            expected_answer: expected_answer.into(),
            model_answer: model_answer.into(),
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), JudgeError> {
        for (name, value) in [
            ("question", &self.question),
            ("expected_answer", &self.expected_answer),
            ("model_answer", &self.model_answer),
        ] {
            if value.is_empty() {
                return Err(JudgeError::EmptyField(name));
            }
        }
        Ok(())
    }
}

/// Substitutes the three fields verbatim; no escaping.
pub fn render_prompt(req: &JudgeRequest) -> Result<String, JudgeError> {
    req.validate()?;
    Ok(format!("{JUDGE_INSTRUCTION}\n\n{}", render_fields(req)))
}

fn render_fields(req: &JudgeRequest) -> String {
    format!(
        "Question: {}\nExpected Answer: {}\nModel's Answer: {}",
        req.question, req.expected_answer, req.model_answer
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
    Unparseable,
}

/// Trims, lowercases and compares the leading alphabetic run to `yes`/`no`.
pub fn parse_verdict(raw: &str) -> Verdict {
    let lowered = raw.trim().to_lowercase();
    let word: String = lowered.chars().take_while(|c| c.is_alphabetic()).collect();
    match word.as_str() {
        "yes" => Verdict::Yes,
        "no" => Verdict::No,
        _ => Verdict::Unparseable,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgeVerdict {
    pub verdict: Verdict,
    pub raw_response: String,
    pub cached: bool,
}

pub fn cache_key(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    verdict: Verdict,
    raw: String,
}

/// Verdicts keyed by prompt hash, optionally persisted to an append-only file.
#[derive(Debug, Default)]
pub struct VerdictCache {
    entries: Mutex<HashMap<String, CacheEntry>>,
    file: Option<Mutex<File>>,
}

impl VerdictCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing entries from `path` (if present) and appends new ones to it.
    pub fn open(path: &Path) -> Result<Self, JudgeError> {
        let mut entries = HashMap::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheEntry =
                    serde_json::from_str(&line).map_err(|e| JudgeError::CacheFormat {
                        line: i + 1,
                        message: e.to_string(),
                    })?;
                entries.insert(entry.key.clone(), entry);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<(Verdict, String)> {
        self.entries
            .lock()
            .unwrap()
            .get(key)
            .map(|e| (e.verdict, e.raw.clone()))
    }

    pub fn insert(&self, key: &str, verdict: Verdict, raw: &str) -> Result<(), JudgeError> {
        let entry = CacheEntry {
            key: key.to_string(),
            verdict,
            raw: raw.to_string(),
        };
        if let Some(file) = &self.file {
            let mut line = serde_json::to_string(&entry).map_err(std::io::Error::from)?;
            line.push('\n');
            let mut f = file.lock().unwrap();
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        self.entries
            .lock()
            .unwrap()
            .insert(entry.key.clone(), entry);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    fn new(role: &str, content: String) -> Self {
        Self {
            role: role.to_string(),
            content,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

/// Something that completes a chat and returns the assistant text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    /// Full chat-completions URL, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Requests in flight at once in [`Judge::judge_all`].
    pub concurrency: usize,
    /// Send the instruction as a system message and the fields as the user
    /// message, instead of everything in one user message.
    pub instruction_as_system: bool,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "meta-llama/Llama-3.1-8B-Instruct".into(),
            api_key_env: None,
            temperature: 0.0,
            max_tokens: 8,
            timeout_secs: 60,
            max_retries: 3,
            backoff_base_ms: 250,
            backoff_max_ms: 4000,
            concurrency: 4,
            instruction_as_system: false,
        }
    }
}

impl JudgeConfig {
    pub fn messages(&self, req: &JudgeRequest) -> Result<Vec<ChatMessage>, JudgeError> {
        if self.instruction_as_system {
            req.validate()?;
            Ok(vec![
                ChatMessage::new("system", JUDGE_INSTRUCTION.to_string()),
                ChatMessage::new("user", render_fields(req)),
            ])
        } else {
            Ok(vec![ChatMessage::new("user", render_prompt(req)?)])
        }
    }

    fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

/// Blocking HTTP transport for OpenAI-compatible servers.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    max_tokens: u32,
}

impl HttpTransport {
    pub fn new(config: &JudgeConfig) -> Result<Self, JudgeError> {
        let api_key = match &config.api_key_env {
            Some(var) => {
                Some(std::env::var(var).map_err(|_| JudgeError::MissingApiKey(var.clone()))?)
            }
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            endpoint: config.endpoint.clone(),
            model: config.model.clone(),
            api_key,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, TransportError> {
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        });
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        match status {
            200..=299 => {}
            429 | 500..=599 => {
                return Err(TransportError::Transient(format!("HTTP {status}: {text}")))
            }
            _ => return Err(TransportError::Fatal(format!("HTTP {status}: {text}"))),
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| TransportError::Fatal(format!("response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| {
                TransportError::Fatal(format!("no choices[0].message.content in {text}"))
            })
    }
}

pub struct Judge<T> {
    transport: T,
    cache: VerdictCache,
    config: JudgeConfig,
    network_calls: AtomicUsize,
}

impl<T: ChatTransport> Judge<T> {
    pub fn new(transport: T, cache: VerdictCache, config: JudgeConfig) -> Self {
        Self {
            transport,
            cache,
            config,
            network_calls: AtomicUsize::new(0),
        }
    }

    pub fn cache(&self) -> &VerdictCache {
        &self.cache
    }

    /// Transport calls made so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::Relaxed)
    }

    /// Verdict from the cache if present, without contacting the endpoint.
    pub fn cached(&self, req: &JudgeRequest) -> Result<Option<JudgeVerdict>, JudgeError> {
        let key = cache_key(&render_prompt(req)?);
        Ok(self
            .cache
            .get(&key)
            .map(|(verdict, raw_response)| JudgeVerdict {
                verdict,
                raw_response,
                cached: true,
            }))
    }

    pub fn judge(&self, req: &JudgeRequest) -> Result<JudgeVerdict, JudgeError> {
        let prompt = render_prompt(req)?;
        let key = cache_key(&prompt);
        if let Some((verdict, raw_response)) = self.cache.get(&key) {
            return Ok(JudgeVerdict {
                verdict,
                raw_response,
                cached: true,
            });
        }
        let messages = self.config.messages(req)?;
        let raw = self.complete_with_retry(&messages)?;
        let verdict = parse_verdict(&raw);
        if verdict == Verdict::Unparseable {
            log::warn!("unparseable judge response {raw:?}");
        }
        self.cache.insert(&key, verdict, &raw)?;
        Ok(JudgeVerdict {
            verdict,
            raw_response: raw,
            cached: false,
        })
    }

    fn complete_with_retry(&self, messages: &[ChatMessage]) -> Result<String, JudgeError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            match self.transport.complete(messages) {
                Ok(text) => return Ok(text),
                Err(TransportError::Transient(msg)) if attempt <= self.config.max_retries => {
                    let wait = self.config.backoff(attempt - 1);
                    log::debug!("judge attempt {attempt} failed ({msg}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
                Err(e) => {
                    return Err(JudgeError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })
                }
            }
        }
    }

    /// Judges every request with at most `config.concurrency` in flight.
    /// Results are in request order.
    pub fn judge_all(&self, requests: &[JudgeRequest]) -> Vec<Result<JudgeVerdict, JudgeError>> {
        let workers = self.config.concurrency.clamp(1, requests.len().max(1));
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<JudgeVerdict, JudgeError>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(req) = requests.get(i) else { break };
                    *results[i].lock().unwrap() = Some(self.judge(req));
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every request judged"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{MockChatServer, MockReply};
    use std::sync::atomic::AtomicU32;

    fn req() -> JudgeRequest {
        JudgeRequest::new("Q?", "A", "B").unwrap()
    }

    fn fast_config(endpoint: String) -> JudgeConfig {
        JudgeConfig {
            endpoint,
            backoff_base_ms: 1,
            backoff_max_ms: 4,
            timeout_secs: 5,
            ..Default::default()
        }
    }

    #[test]
    fn prompt_layout() {
        let p = render_prompt(&req()).unwrap();
        assert!(p.starts_with("Your task is to compare"));
        assert!(p.ends_with("\n\nQuestion: Q?\nExpected Answer: A\nModel's Answer: B"));
        assert_eq!(p.matches("Question: ").count(), 1);
    }

    #[test]
    fn newlines_kept_verbatim() {
        let r = JudgeRequest::new("line1\nline2", "A", "B\n").unwrap();
        assert!(render_prompt(&r)
            .unwrap()
            .ends_with("Question: line1\nline2\nExpected Answer: A\nModel's Answer: B\n"));
    }

    #[test]
    fn empty_fields_rejected() {
        assert!(matches!(
            JudgeRequest::new("", "A", "B"),
            Err(JudgeError::EmptyField("question"))
        ));
        let r = JudgeRequest {
            question: "q".into(),
            expected_answer: "a".into(),
            model_answer: String::new(),
        };
        assert!(matches!(
            render_prompt(&r),
            Err(JudgeError::EmptyField("model_answer"))
        ));
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("Yes."), Verdict::Yes);
        assert_eq!(parse_verdict("  YES"), Verdict::Yes);
        assert_eq!(parse_verdict("no"), Verdict::No);
        assert_eq!(parse_verdict("No, it is wrong"), Verdict::No);
        assert_eq!(parse_verdict("maybe"), Verdict::Unparseable);
        assert_eq!(parse_verdict("I think so"), Verdict::Unparseable);
        assert_eq!(parse_verdict("nobody"), Verdict::Unparseable);
        assert_eq!(parse_verdict(""), Verdict::Unparseable);
    }

    #[test]
    fn system_message_switch() {
        let mut c = JudgeConfig::default();
        assert_eq!(c.messages(&req()).unwrap().len(), 1);
        c.instruction_as_system = true;
        let m = c.messages(&req()).unwrap();
        assert_eq!(m[0].role, "system");
        assert_eq!(m[0].content, JUDGE_INSTRUCTION);
        assert!(m[1].content.starts_with("Question: Q?"));
    }

    #[test]
    fn backoff_is_capped() {
        let c = JudgeConfig {
            backoff_base_ms: 100,
            backoff_max_ms: 500,
            ..Default::default()
        };
        let waits: Vec<u64> = (0..5).map(|r| c.backoff(r).as_millis() as u64).collect();
        assert_eq!(waits, [100, 200, 400, 500, 500]);
    }

    #[test]
    fn http_round_trip_and_cache() {
        let server = MockChatServer::start(|_| MockReply::ok("Yes."));
        let config = fast_config(server.url());
        let judge = Judge::new(
            HttpTransport::new(&config).unwrap(),
            VerdictCache::in_memory(),
            config,
        );
        let first = judge.judge(&req()).unwrap();
        assert_eq!(first.verdict, Verdict::Yes);
        assert!(!first.cached);
        let second = judge.judge(&req()).unwrap();
        assert!(second.cached);
        assert_eq!(second.raw_response, "Yes.");
        assert_eq!(server.calls(), 1);
        assert_eq!(
            server.last_prompt().unwrap(),
            render_prompt(&req()).unwrap()
        );
    }

    #[test]
    fn retries_transient_failures() {
        let failures = AtomicU32::new(2);
        let server = MockChatServer::start(move |_| {
            if failures
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |f| f.checked_sub(1))
                .is_ok()
            {
                MockReply::status(503)
            } else {
                MockReply::ok("no")
            }
        });
        let config = fast_config(server.url());
        let judge = Judge::new(
            HttpTransport::new(&config).unwrap(),
            VerdictCache::in_memory(),
            config,
        );
        assert_eq!(judge.judge(&req()).unwrap().verdict, Verdict::No);
        assert_eq!(server.calls(), 3);
        assert_eq!(judge.network_calls(), 3);
    }

    #[test]
    fn gives_up_after_bounded_retries() {
        let server = MockChatServer::start(|_| MockReply::status(500));
        let config = JudgeConfig {
            max_retries: 2,
            ..fast_config(server.url())
        };
        let judge = Judge::new(
            HttpTransport::new(&config).unwrap(),
            VerdictCache::in_memory(),
            config,
        );
        match judge.judge(&req()) {
            Err(JudgeError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(server.calls(), 3);
        assert!(judge.cache().is_empty());
    }

    #[test]
    fn client_errors_are_not_retried() {
        let server = MockChatServer::start(|_| MockReply::status(400));
        let config = fast_config(server.url());
        let judge = Judge::new(
            HttpTransport::new(&config).unwrap(),
            VerdictCache::in_memory(),
            config,
        );
        assert!(matches!(
            judge.judge(&req()),
            Err(JudgeError::Transport { attempts: 1, .. })
        ));
    }

    #[test]
    fn connection_refused_is_transport_error() {
        let url = {
            let server = MockChatServer::start(|_| MockReply::ok("yes"));
            server.url()
        };
        let config = JudgeConfig {
            max_retries: 1,
            ..fast_config(url)
        };
        let judge = Judge::new(
            HttpTransport::new(&config).unwrap(),
            VerdictCache::in_memory(),
            config,
        );
        assert!(matches!(
            judge.judge(&req()),
            Err(JudgeError::Transport { attempts: 2, .. })
        ));
    }

    #[test]
    fn persistent_cache_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("verdicts.jsonl");
        let server = MockChatServer::start(|p| {
            if p.contains("Model's Answer: B") {
                MockReply::ok("yes")
            } else {
                MockReply::ok("maybe")
            }
        });
        let config = fast_config(server.url());
        {
            let judge = Judge::new(
                HttpTransport::new(&config).unwrap(),
                VerdictCache::open(&path).unwrap(),
                config.clone(),
            );
            judge.judge(&req()).unwrap();
            let odd = JudgeRequest::new("Q?", "A", "C").unwrap();
            assert_eq!(judge.judge(&odd).unwrap().verdict, Verdict::Unparseable);
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let first: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["verdict"], "yes");
        assert_eq!(first["raw"], "yes");
        assert_eq!(first["key"], cache_key(&render_prompt(&req()).unwrap()));

        let judge = Judge::new(
            HttpTransport::new(&config).unwrap(),
            VerdictCache::open(&path).unwrap(),
            config,
        );
        assert!(judge.judge(&req()).unwrap().cached);
        assert_eq!(server.calls(), 2);
    }

    #[test]
    fn concurrent_judging_preserves_order() {
        let server = MockChatServer::start(|p| {
            if p.ends_with("odd") {
                MockReply::ok("no")
            } else {
                MockReply::ok("yes")
            }
        });
        let config = JudgeConfig {
            concurrency: 3,
            ..fast_config(server.url())
        };
        let judge = Judge::new(
            HttpTransport::new(&config).unwrap(),
            VerdictCache::in_memory(),
            config,
        );
        let reqs: Vec<JudgeRequest> = (0..10)
            .map(|i| {
                let tag = if i % 2 == 1 { "odd" } else { "even" };
                JudgeRequest::new(format!("q{i}"), "a", tag).unwrap()
            })
            .collect();
        let out = judge.judge_all(&reqs);
        for (i, r) in out.iter().enumerate() {
            let expected = if i % 2 == 1 {
                Verdict::No
            } else {
                Verdict::Yes
            };
            assert_eq!(r.as_ref().unwrap().verdict, expected);
        }
        assert_eq!(server.calls(), 10);
        assert!(judge.cached(&reqs[0]).unwrap().is_some());
    }

    #[test]
    fn missing_api_key_variable() {
        let config = JudgeConfig {
            api_key_env: Some("DOCPACK_TEST_SURELY_UNSET_KEY".into()),
            ..Default::default()
        };
        assert!(matches!(
            HttpTransport::new(&config),
            Err(JudgeError::MissingApiKey(_))
        ));
    }
}

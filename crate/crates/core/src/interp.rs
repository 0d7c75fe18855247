// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpreters that explain a unit from its top-activating samples and
//! predict its activation on new samples.
//!
//! Three implementations:
//! - [`MockInterpreter`]: token intersection for explanations, Jaccard
//!   overlap for predictions. Pure and offline.
//! - [`LookupInterpreter`]: returns stored predictions; used as an oracle.
//! - [`RemoteInterpreter`]: a chat-completion client with retries, bounded
//!   concurrency and a replay cache keyed by request hash.
//!
//! Remote wire format (request body, one per call):
//!
//! ```text
//! {"model": M, "temperature": 0.0,
//!  "messages": [{"role": "system", "content": ...}, {"role": "user", "content": ...}]}
//! ```
//!
//! The reply is read from `choices[0].message.content`. Explanations use the
//! text verbatim; predictions take the first number in the text.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::toylm::split_words;

pub const EXPLAIN_SAMPLES: usize = 3;

/// A sample shown to the interpreter, with its activation scaled to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub text: String,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub text: String,
    pub unit: String,
    pub exemplars: Vec<Exemplar>,
}

pub trait Interpreter: Sync {
    /// Describes a unit from exactly three top-activating exemplars.
    fn explain(&self, unit: &str, top: &[Exemplar]) -> Result<Explanation>;

    /// Predicted activations in [0, 1], one per sample.
    fn predict(&self, explanation: &Explanation, samples: &[String]) -> Result<Vec<f64>>;
}

fn check_exemplars(top: &[Exemplar]) -> Result<()> {
    if top.len() != EXPLAIN_SAMPLES {
        return Err(Error::config(format!(
            "explain needs exactly {EXPLAIN_SAMPLES} exemplars, got {}",
            top.len()
        )));
    }
    Ok(())
}

fn token_set(text: &str) -> BTreeSet<String> {
    split_words(text).into_iter().map(|w| w.to_lowercase()).collect()
}

// ---------------------------------------------------------------------------
// Offline interpreters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct MockInterpreter;

impl Interpreter for MockInterpreter {
    /// Tokens common to all three exemplars, in first-exemplar order.
    fn explain(&self, unit: &str, top: &[Exemplar]) -> Result<Explanation> {
        check_exemplars(top)?;
        let others: Vec<BTreeSet<String>> = top[1..].iter().map(|e| token_set(&e.text)).collect();
        let mut seen = BTreeSet::new();
        let words: Vec<String> = split_words(&top[0].text)
            .into_iter()
            .map(|w| w.to_lowercase())
            .filter(|w| others.iter().all(|s| s.contains(w)) && seen.insert(w.clone()))
            .collect();
        Ok(Explanation {
            text: words.join(" "),
            unit: unit.to_string(),
            exemplars: top.to_vec(),
        })
    }

    /// Jaccard overlap between explanation tokens and sample tokens.
    fn predict(&self, explanation: &Explanation, samples: &[String]) -> Result<Vec<f64>> {
        let e = token_set(&explanation.text);
        Ok(samples
            .iter()
            .map(|s| {
                let t = token_set(s);
                let union = e.union(&t).count();
                if union == 0 {
                    0.0
                } else {
                    (e.intersection(&t).count() as f64 / union as f64).clamp(0.0, 1.0)
                }
            })
            .collect())
    }
}

/// Predicts from a fixed table of sample text to value; unknown samples get
/// 0. Handy as a perfect or adversarial oracle.
#[derive(Debug, Clone, Default)]
pub struct LookupInterpreter {
    pub table: HashMap<String, f64>,
}

impl Interpreter for LookupInterpreter {
    fn explain(&self, unit: &str, top: &[Exemplar]) -> Result<Explanation> {
        check_exemplars(top)?;
        Ok(Explanation {
            text: "lookup".into(),
            unit: unit.to_string(),
            exemplars: top.to_vec(),
        })
    }

    fn predict(&self, _: &Explanation, samples: &[String]) -> Result<Vec<f64>> {
        Ok(samples
            .iter()
            .map(|s| self.table.get(s).copied().unwrap_or(0.0).clamp(0.0, 1.0))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Remote interpreter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpreterConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    pub max_concurrency: usize,
    /// Delay before the first retry; doubles each time.
    pub backoff_ms: u64,
    pub cache_path: Option<PathBuf>,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: "INTERPRETER_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            temperature: 0.0,
            max_concurrency: 4,
            backoff_ms: 500,
            cache_path: None,
        }
    }
}

impl InterpreterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::config("interpreter timeout must be positive"));
        }
        if self.max_concurrency == 0 {
            return Err(Error::config("max_concurrency must be at least 1"));
        }
        Ok(())
    }
}

/// Sends one JSON body and returns the raw response body.
pub trait Transport: Sync {
    fn post(&self, url: &str, api_key: Option<&str>, body: &str, timeout: Duration) -> Result<String>;
}

/// HTTPS transport over `ureq`.
#[derive(Debug, Default)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post(&self, url: &str, api_key: Option<&str>, body: &str, timeout: Duration) -> Result<String> {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        let agent = ureq::Agent::new_with_config(config);
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| Error::Transport(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))
    }
}

/// Request-hash to response map, persisted as a JSON object.
#[derive(Debug, Default)]
pub struct ReplayCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, String>>,
}

impl ReplayCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads the cache at `path` if it exists.
    pub fn open(path: &Path) -> Result<Self> {
        let entries = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(path)?)?
        } else {
            HashMap::new()
        };
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: Mutex::new(entries),
        })
    }

    pub fn key(body: &str) -> String {
        hex::encode(Sha256::digest(body.as_bytes()))
    }

    pub fn get(&self, body: &str) -> Option<String> {
        self.entries.lock().unwrap().get(&Self::key(body)).cloned()
    }

    pub fn insert(&self, body: &str, response: String) {
        self.entries.lock().unwrap().insert(Self::key(body), response);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes the cache to its file, sorted by key for stable bytes.
    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let entries = self.entries.lock().unwrap();
        let sorted: std::collections::BTreeMap<_, _> = entries.iter().collect();
        std::fs::write(path, serde_json::to_string_pretty(&sorted)?)?;
        Ok(())
    }
}

pub struct RemoteInterpreter<T: Transport = UreqTransport> {
    pub config: InterpreterConfig,
    transport: T,
    cache: ReplayCache,
    /// When set, cache misses fail instead of reaching the network.
    pub offline: bool,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: Vec<Message<'a>>,
}

const EXPLAIN_SYSTEM: &str = "You explain what a unit inside a language model responds to. \
Given text samples with activation levels between 0 and 1, answer with one short phrase describing the common pattern.";

const PREDICT_SYSTEM: &str = "You predict how strongly a unit inside a language model activates on a text. \
Answer with a single number between 0 and 1 and nothing else.";

impl RemoteInterpreter<UreqTransport> {
    pub fn new(config: InterpreterConfig) -> Result<Self> {
        Self::with_transport(config, UreqTransport)
    }
}

impl<T: Transport> RemoteInterpreter<T> {
    pub fn with_transport(config: InterpreterConfig, transport: T) -> Result<Self> {
        config.validate()?;
        let cache = match &config.cache_path {
            Some(p) => ReplayCache::open(p)?,
            None => ReplayCache::in_memory(),
        };
        Ok(Self {
            config,
            transport,
            cache,
            offline: false,
        })
    }

    pub fn cache(&self) -> &ReplayCache {
        &self.cache
    }

    fn body(&self, system: &str, user: String) -> String {
        serde_json::to_string(&ChatRequest {
            model: &self.config.model,
            temperature: self.config.temperature,
            messages: vec![
                Message {
                    role: "system",
                    content: system.to_string(),
                },
                Message { role: "user", content: user },
            ],
        })
        .expect("request serializes")
    }

    /// Sends with retries, consulting and filling the replay cache.
    fn send(&self, body: &str) -> Result<String> {
        if let Some(hit) = self.cache.get(body) {
            return Ok(hit);
        }
        if self.offline {
            return Err(Error::Transport("offline and request not in replay cache".into()));
        }
        let key = std::env::var(&self.config.api_key_env).ok();
        let timeout = Duration::from_secs_f64(self.config.timeout_secs);
        let mut last = None;
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 && self.config.backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(10)));
            }
            match self.transport.post(&self.config.endpoint, key.as_deref(), body, timeout) {
                Ok(resp) => {
                    self.cache.insert(body, resp.clone());
                    return Ok(resp);
                }
                Err(e) => {
                    log::warn!("interpreter request attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(Error::Transport(format!(
            "{} attempts failed; last error: {}",
            self.config.max_retries + 1,
            last.map(|e| e.to_string()).unwrap_or_default()
        )))
    }

    /// Sends several bodies with at most `max_concurrency` in flight,
    /// returning results in input order.
    fn send_all(&self, bodies: &[String]) -> Vec<Result<String>> {
        let mut out: Vec<Option<Result<String>>> = (0..bodies.len()).map(|_| None).collect();
        for (chunk_idx, chunk) in bodies.chunks(self.config.max_concurrency).enumerate() {
            let results: Vec<Result<String>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|b| s.spawn(move || self.send(b))).collect();
                handles.into_iter().map(|h| h.join().expect("request thread")).collect()
            });
            for (i, r) in results.into_iter().enumerate() {
                out[chunk_idx * self.config.max_concurrency + i] = Some(r);
            }
        }
        out.into_iter().map(|r| r.expect("filled")).collect()
    }
}

/// `choices[0].message.content` of a chat-completion response.
pub fn response_content(payload: &str) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(payload).map_err(|e| Error::Protocol {
        message: format!("response is not JSON: {e}"),
        payload: payload.to_string(),
    })?;
    v["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::Protocol {
            message: "missing choices[0].message.content".into(),
            payload: payload.to_string(),
        })
}

/// First number in `text`, clipped to [0, 1].
pub fn parse_score(text: &str) -> Result<f64> {
    let re = Regex::new(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?").expect("static pattern");
    re.find(text)
        .and_then(|m| m.as_str().parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .map(|v| v.clamp(0.0, 1.0))
        .ok_or_else(|| Error::Protocol {
            message: "no number in prediction".into(),
            payload: text.to_string(),
        })
}

impl<T: Transport> Interpreter for RemoteInterpreter<T> {
    fn explain(&self, unit: &str, top: &[Exemplar]) -> Result<Explanation> {
        check_exemplars(top)?;
        let mut user = String::from("Samples:\n");
        for e in top {
            user.push_str(&format!("- \"{}\" (activation {:.2})\n", e.text, e.activation));
        }
        user.push_str("What does this unit respond to?");
        let payload = self.send(&self.body(EXPLAIN_SYSTEM, user))?;
        let text = response_content(&payload)?.trim().to_string();
        if text.is_empty() {
            return Err(Error::Protocol {
                message: "empty explanation".into(),
                payload,
            });
        }
        self.cache.save()?;
        Ok(Explanation {
            text,
            unit: unit.to_string(),
            exemplars: top.to_vec(),
        })
    }

    fn predict(&self, explanation: &Explanation, samples: &[String]) -> Result<Vec<f64>> {
        let bodies: Vec<String> = samples
            .iter()
            .map(|s| {
                self.body(
                    PREDICT_SYSTEM,
                    format!("Unit explanation: {}\nText: \"{s}\"\nActivation:", explanation.text),
                )
            })
            .collect();
        let results = self.send_all(&bodies);
        self.cache.save()?;
        results
            .into_iter()
            .map(|r| parse_score(&response_content(&r?)?))
            .collect()
    }
}

//! Optional LLM judge. Speaks chat-completions-shaped JSON over HTTPS, or
//! replays a recorded fixture offline.
//!
//! Fixture and raw-response files are JSONL, one attempt per line:
//! `{"sample_id": "...", "attempt": 0, "response": "..."}`, or with `error`
//! in place of `response` for a failed request. A raw file written by an
//! online run can be replayed as a fixture unchanged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RUBRIC: &str = "\
You are grading an answer about how an object feels to the touch.
Score the candidate answer on four dimensions, each an integer from 1 (worst) to 10 (best), and give a short reason for each.
accuracy: agreement with the reference answer, with no factual mistakes.
relevance: stays on the question, without padding or drifting off topic.
completeness: includes the key points of the reference and leaves nothing important out.
fluency: reads naturally, with correct grammar.

Question: {question}
Reference answer: {reference}
Candidate answer: {answer}

Reply with exactly four lines of the form `<dimension>: <score> - <reason>`, in the order accuracy, relevance, completeness, fluency.";

pub const DIMENSIONS: [&str; 4] = ["accuracy", "relevance", "completeness", "fluency"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    /// Label used in reports.
    pub name: String,
    /// Chat-completions URL; unused when `fixture` is set.
    pub endpoint: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    /// Prompt with `{question}`, `{reference}` and `{answer}` slots.
    pub rubric: String,
    pub timeout_secs: u64,
    /// Extra attempts after a failed request or unparsable reply.
    pub retries: u32,
    /// Minimum spacing between requests.
    pub min_interval_ms: u64,
    /// Recorded responses to replay instead of calling the endpoint.
    pub fixture: Option<PathBuf>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            name: "judge".into(),
            endpoint: None,
            model: String::new(),
            api_key_env: "TOUCHMOE_JUDGE_API_KEY".into(),
            rubric: DEFAULT_RUBRIC.into(),
            timeout_secs: 60,
            retries: 2,
            min_interval_ms: 0,
            fixture: None,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<()> {
        for slot in ["{question}", "{reference}", "{answer}"] {
            if !self.rubric.contains(slot) {
                return Err(Error::Config { field: "judge.rubric".into(), message: format!("missing {slot}") });
            }
        }
        if let Some(f) = &self.fixture {
            if !f.is_file() {
                return Err(Error::Config {
                    field: "judge.fixture".into(),
                    message: format!("{} does not exist", f.display()),
                });
            }
            return Ok(());
        }
        if self.endpoint.as_deref().is_none_or(str::is_empty) {
            return Err(Error::Config { field: "judge.endpoint".into(), message: "online mode needs an endpoint".into() });
        }
        if self.model.is_empty() {
            return Err(Error::Config { field: "judge.model".into(), message: "online mode needs a model name".into() });
        }
        if std::env::var(&self.api_key_env).map_or(true, |k| k.is_empty()) {
            return Err(Error::Config {
                field: "judge.api_key_env".into(),
                message: format!("environment variable {} is not set", self.api_key_env),
            });
        }
        Ok(())
    }

    pub fn prompt(&self, question: &str, reference: &str, answer: &str) -> String {
        self.rubric.replace("{question}", question).replace("{reference}", reference).replace("{answer}", answer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawAttempt {
    pub sample_id: String,
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub accuracy: u8,
    pub relevance: u8,
    pub completeness: u8,
    pub fluency: u8,
    pub mean: f64,
    pub rationale: String,
}

/// Result for one sample. `scores` is `None` when every attempt failed;
/// `missing` then says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub judge: String,
    pub scores: Option<JudgeScores>,
    pub missing: Option<String>,
    pub attempts: u32,
}

/// Reads four 1–10 scores from a reply. Labelled scores
/// (`accuracy: 9 ...`) win; otherwise the first four integers are used.
pub fn parse_scores(text: &str) -> Result<JudgeScores> {
    let lower = text.to_lowercase();
    let labelled: Option<Vec<i64>> =
        DIMENSIONS.iter().map(|d| lower.find(d).and_then(|at| integers(&lower[at + d.len()..]).first().copied())).collect();
    let values = match labelled {
        Some(v) => v,
        None => {
            let all = integers(&lower);
            if all.len() < 4 {
                return Err(Error::Judge(format!("expected four scores, found {}", all.len())));
            }
            all[..4].to_vec()
        }
    };
    let mut s = [0u8; 4];
    for (i, v) in values.into_iter().enumerate() {
        if !(1..=10).contains(&v) {
            return Err(Error::Judge(format!("{} score {v} is outside 1..=10", DIMENSIONS[i])));
        }
        s[i] = v as u8;
    }
    Ok(JudgeScores {
        accuracy: s[0],
        relevance: s[1],
        completeness: s[2],
        fluency: s[3],
        mean: s.iter().map(|&x| f64::from(x)).sum::<f64>() / 4.0,
        rationale: text.trim().to_string(),
    })
}

fn integers(text: &str) -> Vec<i64> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            // skip decimals such as "8.5" rather than reading two integers
            if i < bytes.len() && bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit) {
                while i < bytes.len() && (bytes[i] == b'.' || bytes[i].is_ascii_digit()) {
                    i += 1;
                }
                continue;
            }
            if let Ok(v) = text[start..i].parse() {
                out.push(v);
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Source of judge replies.
pub trait JudgeBackend {
    fn complete(&mut self, sample_id: &str, attempt: u32, prompt: &str) -> Result<String>;
}

/// Replays recorded replies keyed by sample id and attempt.
pub struct FixtureBackend {
    entries: BTreeMap<(String, u32), RawAttempt>,
}

impl FixtureBackend {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let a: RawAttempt = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
            entries.insert((a.sample_id.clone(), a.attempt), a);
        }
        Ok(FixtureBackend { entries })
    }
}

impl JudgeBackend for FixtureBackend {
    fn complete(&mut self, sample_id: &str, attempt: u32, _prompt: &str) -> Result<String> {
        match self.entries.get(&(sample_id.to_string(), attempt)) {
            Some(RawAttempt { response: Some(r), .. }) => Ok(r.clone()),
            Some(RawAttempt { error: Some(e), .. }) => Err(Error::Judge(e.clone())),
            _ => Err(Error::Judge(format!("no recorded reply for {sample_id} attempt {attempt}"))),
        }
    }
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    key: String,
    min_interval: Duration,
    last: Option<Instant>,
}

impl HttpBackend {
    pub fn new(config: &JudgeConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(HttpBackend {
            agent,
            endpoint: config.endpoint.clone().unwrap_or_default(),
            model: config.model.clone(),
            key: std::env::var(&config.api_key_env).unwrap_or_default(),
            min_interval: Duration::from_millis(config.min_interval_ms),
            last: None,
        })
    }
}

impl JudgeBackend for HttpBackend {
    fn complete(&mut self, _sample_id: &str, _attempt: u32, prompt: &str) -> Result<String> {
        if let Some(last) = self.last {
            let wait = self.min_interval.saturating_sub(last.elapsed());
            std::thread::sleep(wait);
        }
        self.last = Some(Instant::now());
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.key))
            .send_json(&body)
            .map_err(|e| Error::Judge(e.to_string()))?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| Error::Judge(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Judge("reply has no choices[0].message.content".into()))
    }
}

/// Drives a backend with retries and keeps every raw attempt.
pub struct Judge {
    pub config: JudgeConfig,
    backend: Box<dyn JudgeBackend>,
    pub raw: Vec<RawAttempt>,
}

impl Judge {
    pub fn new(config: JudgeConfig) -> Result<Self> {
        config.validate()?;
        let backend: Box<dyn JudgeBackend> = match &config.fixture {
            Some(f) => Box::new(FixtureBackend::load(f)?),
            None => Box::new(HttpBackend::new(&config)?),
        };
        Ok(Judge { config, backend, raw: Vec::new() })
    }

    pub fn with_backend(config: JudgeConfig, backend: Box<dyn JudgeBackend>) -> Self {
        Judge { config, backend, raw: Vec::new() }
    }

    /// Never invents a score: after the last failed attempt the outcome is
    /// marked missing.
    pub fn score(&mut self, sample_id: &str, question: &str, reference: &str, answer: &str) -> JudgeOutcome {
        let prompt = self.config.prompt(question, reference, answer);
        let mut last_error = String::new();
        for attempt in 0..=self.config.retries {
            let reply = self.backend.complete(sample_id, attempt, &prompt);
            let (raw, parsed) = match reply {
                Ok(text) => {
                    let parsed = parse_scores(&text);
                    (RawAttempt { sample_id: sample_id.into(), attempt, response: Some(text), error: None }, parsed)
                }
                Err(e) => {
                    let msg = match &e {
                        Error::Judge(m) => m.clone(),
                        other => other.to_string(),
                    };
                    (RawAttempt { sample_id: sample_id.into(), attempt, response: None, error: Some(msg) }, Err(e))
                }
            };
            self.raw.push(raw);
            match parsed {
                Ok(scores) => {
                    return JudgeOutcome {
                        judge: self.config.name.clone(),
                        scores: Some(scores),
                        missing: None,
                        attempts: attempt + 1,
                    }
                }
                Err(e) => {
                    log::warn!("judge {} on {sample_id}, attempt {attempt}: {e}", self.config.name);
                    last_error = e.to_string();
                }
            }
        }
        JudgeOutcome {
            judge: self.config.name.clone(),
            scores: None,
            missing: Some(last_error),
            attempts: self.config.retries + 1,
        }
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for a in &self.raw {
            out.push_str(&serde_json::to_string(a)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

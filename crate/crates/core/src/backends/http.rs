use std::sync::{Condvar, LazyLock, Mutex};
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    parse_bbox, render_template, Backend, BackendDescriptor, BackendError, BackendKind,
    EvaluationRequest, GenerationMode, GenerationRequest,
};
use crate::jsonl::Query;
use crate::policy::ToyPolicy;
use crate::types::{ChainStep, ResponseChain, StepRole};

pub const API_KEY_ENV: &str = "UVCOT_API_KEY";
pub const API_BASE_ENV: &str = "UVCOT_API_BASE";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Credentials {
    pub api_key: Option<String>,
    /// Overrides the descriptor's endpoint when set.
    pub api_base: Option<String>,
}

impl Credentials {
    pub fn from_env() -> Self {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Self {
            api_key: get(API_KEY_ENV),
            api_base: get(API_BASE_ENV),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub max_retries: usize,
    /// Delay before the first retry; doubles on every further retry.
    pub retry_base: Duration,
    pub max_inflight: usize,
    pub timeout: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            retry_base: Duration::from_secs(1),
            max_inflight: 4,
            timeout: Duration::from_secs(120),
        }
    }
}

/// Counting gate bounding the number of in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Client for `POST {endpoint}/chat/completions`.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    desc: BackendDescriptor,
    api_key: Option<String>,
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
}

enum AttemptError {
    Retry(BackendError),
    Fatal(BackendError),
}

static SCORE_TOKEN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)score\s*:\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)").unwrap()
});

/// Reads `score: <number>` (any case) and clips it to `[0, 1]`.
pub fn parse_score(text: &str) -> Result<f64, BackendError> {
    let caps = SCORE_TOKEN
        .captures(text)
        .ok_or_else(|| BackendError::ScoreParse(text.to_string()))?;
    let v: f64 = caps[1]
        .parse()
        .map_err(|_| BackendError::ScoreParse(text.to_string()))?;
    Ok(v.clamp(0.0, 1.0))
}

fn transcript(chain: &ResponseChain) -> String {
    let mut out = String::new();
    for step in chain.steps() {
        let line = match step.role() {
            StepRole::Query => format!("Question: {}", step.text()),
            StepRole::Region => format!("Region: {}", step.text()),
            StepRole::Answer => format!("Answer: {}", step.text()),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn task_prompt(query: &Query) -> (String, String) {
    match &query.task {
        serde_json::Value::String(s) => (s.clone(), String::new()),
        serde_json::Value::Object(m) => {
            let get = |k: &str| m.get(k).and_then(|v| v.as_str()).unwrap_or("").to_string();
            (get("prompt"), get("standard_answer"))
        }
        _ => (String::new(), String::new()),
    }
}

fn question_with_prompt(query: &Query) -> String {
    let (prompt, _) = task_prompt(query);
    if prompt.is_empty() {
        query.question.clone()
    } else {
        format!("{prompt}\n{}", query.question)
    }
}

impl HttpBackend {
    pub fn new(
        desc: BackendDescriptor,
        creds: Credentials,
        cfg: HttpConfig,
    ) -> Result<Self, BackendError> {
        if desc.kind != BackendKind::Http {
            return Err(BackendError::Config("descriptor kind is not http".into()));
        }
        let mut desc = desc;
        if let Some(base) = creds.api_base.clone() {
            desc.endpoint = Some(base);
        }
        desc.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            endpoint: desc
                .endpoint
                .clone()
                .unwrap_or_default()
                .trim_end_matches('/')
                .to_string(),
            model: desc.model_name.clone().unwrap_or_default(),
            desc,
            api_key: creds.api_key,
            cfg,
            client,
            gate: Gate::new(cfg.max_inflight),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn backoff(&self, retry: usize) -> Duration {
        self.cfg
            .retry_base
            .saturating_mul(1u32 << (retry - 1).min(16))
    }

    /// One chat-completion round trip; returns `choices[0].message.content`.
    fn chat_once(
        &self,
        system: &str,
        user: &str,
        temperature: f64,
        seed: u64,
        attempts: usize,
    ) -> Result<String, AttemptError> {
        let body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "temperature": temperature,
            "seed": seed,
        });
        let _permit = self.gate.acquire();
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            AttemptError::Retry(BackendError::Transport {
                attempts,
                message: e.to_string(),
            })
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            AttemptError::Retry(BackendError::Transport {
                attempts,
                message: e.to_string(),
            })
        })?;
        if !status.is_success() {
            let err = BackendError::Status {
                status: status.as_u16(),
                attempts,
                body: text,
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                AttemptError::Retry(err)
            } else {
                AttemptError::Fatal(err)
            });
        }
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Fatal(BackendError::Body(e.to_string())))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| {
                AttemptError::Fatal(BackendError::Body(
                    "missing choices[0].message.content".into(),
                ))
            })
    }

    /// Runs `op` up to `max_retries + 1` times with exponential backoff.
    fn with_retries<T>(
        &self,
        mut op: impl FnMut(usize) -> Result<T, AttemptError>,
    ) -> Result<T, BackendError> {
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retry(e)) => {
                    if attempt > self.cfg.max_retries {
                        return Err(e);
                    }
                    log::debug!("attempt {attempt} failed, retrying: {e}");
                    thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }

    pub fn http_generate(
        &self,
        query: &Query,
        req: &GenerationRequest,
    ) -> Result<ChainStep, BackendError> {
        let question = question_with_prompt(query);
        let (role, mode) = match req.mode {
            GenerationMode::EmitRegion => ("region", req.mode),
            GenerationMode::EmitAnswer => ("answer", req.mode),
        };
        let system = render_template(self.desc.template(role), &question, "", "");
        let user = transcript(&req.context);
        let mut last_parse_error = None;
        let result = self.with_retries(|attempt| {
            let content = self.chat_once(&system, &user, req.temperature, req.seed, attempt)?;
            match mode {
                GenerationMode::EmitAnswer => Ok(ChainStep::answer(content.trim())),
                GenerationMode::EmitRegion => match parse_bbox(&content, None) {
                    Ok(b) => Ok(ChainStep::region(content.trim(), b)),
                    Err(e) => {
                        last_parse_error = Some(e.clone());
                        Err(AttemptError::Retry(BackendError::Generation(format!(
                            "unparseable bounding box after {attempt} attempt(s): {e}"
                        ))))
                    }
                },
            }
        });
        if let Err(e) = &result {
            log::debug!(
                "generation failed for {}: {e} ({last_parse_error:?})",
                query.query_id
            );
        }
        result
    }

    pub fn http_score(&self, query: &Query, req: &EvaluationRequest) -> Result<f64, BackendError> {
        if req.response.role() != StepRole::Answer {
            return Err(BackendError::NotScorable(req.response.role().to_string()));
        }
        let (_, standard) = task_prompt(query);
        let system = render_template(
            self.desc.template("evaluator"),
            &query.question,
            req.response.text(),
            &standard,
        );
        let user = format!(
            "{}Model answer: {}\n",
            transcript(&req.context),
            req.response.text()
        );
        let content =
            self.with_retries(|attempt| self.chat_once(&system, &user, 0.0, req.seed, attempt))?;
        parse_score(&content)
    }
}

impl Backend for HttpBackend {
    fn horizon(&self, _query: &Query) -> Result<Option<usize>, BackendError> {
        Ok(None)
    }

    fn generate(
        &self,
        query: &Query,
        req: &GenerationRequest,
        _policy: &ToyPolicy,
    ) -> Result<ChainStep, BackendError> {
        self.http_generate(query, req)
    }

    fn score(&self, query: &Query, req: &EvaluationRequest) -> Result<f64, BackendError> {
        self.http_score(query, req)
    }
}

//! Model backends driving data generation: a deterministic simulator over
//! synthetic tasks and a client for OpenAI-compatible chat endpoints.

mod bbox;
mod http;
mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bbox::{parse_bbox, BboxError};
pub use http::{parse_score, Credentials, HttpBackend, HttpConfig};
pub use sim::{sim_generate, sim_score, SimBackend};

use crate::jsonl::Query;
use crate::policy::{PolicyError, ToyPolicy};
use crate::synthbench::BenchError;
use crate::types::{ChainStep, ResponseChain};

pub const REGION_TEMPLATE: &str = include_str!("../../prompts/region.txt");
pub const ANSWER_TEMPLATE: &str = include_str!("../../prompts/answer.txt");
pub const EVALUATOR_TEMPLATE: &str = include_str!("../../prompts/evaluator.txt");

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Bbox(#[from] BboxError),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("only answer steps can be scored, got a {0} step")]
    NotScorable(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("HTTP status {status} after {attempts} attempt(s): {body}")]
    Status {
        status: u16,
        attempts: usize,
        body: String,
    },
    #[error("no `score:` token in evaluator reply: {0:?}")]
    ScoreParse(String),
    #[error("malformed response body: {0}")]
    Body(String),
    #[error(transparent)]
    Task(#[from] BenchError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    EmitRegion,
    EmitAnswer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub context: ResponseChain,
    pub seed: u64,
    pub temperature: f64,
    pub mode: GenerationMode,
}

/// Inputs of `f_eval(response | context)`. The seed drives evaluator noise.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRequest {
    pub context: ResponseChain,
    pub response: ChainStep,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Simulated,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    /// Role (`region`, `answer`, `evaluator`) to template text. Missing roles
    /// fall back to the shipped templates.
    pub prompt_templates: BTreeMap<String, String>,
}

impl BackendDescriptor {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::Http {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(BackendError::Config(
                    "http backend requires an endpoint".into(),
                ));
            }
            if self.model_name.as_deref().is_none_or(str::is_empty) {
                return Err(BackendError::Config(
                    "http backend requires a model_name".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn template(&self, role: &str) -> &str {
        if let Some(t) = self.prompt_templates.get(role) {
            return t;
        }
        match role {
            "region" => REGION_TEMPLATE,
            "answer" => ANSWER_TEMPLATE,
            _ => EVALUATOR_TEMPLATE,
        }
    }
}

/// Substitutes `{question}`, `{answer}` and `{standard_answer}`.
pub fn render_template(
    template: &str,
    question: &str,
    answer: &str,
    standard_answer: &str,
) -> String {
    template
        .replace("{question}", question)
        .replace("{answer}", answer)
        .replace("{standard_answer}", standard_answer)
}

/// What the data generator needs from a model backend.
pub trait Backend: Send + Sync {
    /// Number of region steps a query supports, if the backend knows it.
    fn horizon(&self, query: &Query) -> Result<Option<usize>, BackendError>;

    fn generate(
        &self,
        query: &Query,
        req: &GenerationRequest,
        policy: &ToyPolicy,
    ) -> Result<ChainStep, BackendError>;

    /// Evaluator score in `[0, 1]`.
    fn score(&self, query: &Query, req: &EvaluationRequest) -> Result<f64, BackendError>;
}

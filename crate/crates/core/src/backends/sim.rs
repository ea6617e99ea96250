use rand::Rng;

use super::{Backend, BackendError, EvaluationRequest, GenerationMode, GenerationRequest};
use crate::jsonl::Query;
use crate::policy::{sample_region, ToyPolicy};
use crate::seed::rng_from;
use crate::synthbench::{candidate_set, glyph_text, oracle_answer, SyntheticTask};
use crate::types::{ChainStep, StepRole};

/// Simulated target model and evaluator over [`SyntheticTask`]s.
///
/// Region steps are not scorable: region quality is only observable through
/// the answers reached from a region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimBackend {
    /// Half-width of the uniform evaluator noise.
    pub noise_eta: f64,
}

impl Default for SimBackend {
    fn default() -> Self {
        Self { noise_eta: 0.05 }
    }
}

impl SimBackend {
    pub fn new(noise_eta: f64) -> Self {
        Self { noise_eta }
    }
}

pub fn sim_generate(
    task: &SyntheticTask,
    req: &GenerationRequest,
    policy: &ToyPolicy,
) -> Result<ChainStep, BackendError> {
    match req.mode {
        GenerationMode::EmitRegion => {
            let stage = req.context.region_count() + 1;
            let cs = candidate_set(task, stage, req.context.last_region())?;
            let idx = sample_region(policy, &cs.features, req.seed, req.temperature)?;
            let bbox = cs.regions[idx];
            Ok(ChainStep::region(
                format!("The key region is {bbox}."),
                bbox,
            ))
        }
        GenerationMode::EmitAnswer => {
            let last = req.context.steps().last();
            let region = match last {
                Some(s) if s.role() == StepRole::Region => s.bbox().copied(),
                _ => None,
            }
            .ok_or_else(|| {
                BackendError::Generation("emit_answer requires a preceding region step".into())
            })?;
            Ok(ChainStep::answer(glyph_text(oracle_answer(
                task, &region, req.seed,
            ))))
        }
    }
}

/// `1` for the correct answer, `0` otherwise, plus seeded uniform noise of
/// half-width `noise_eta`, clipped to `[0, 1]`.
pub fn sim_score(
    task: &SyntheticTask,
    req: &EvaluationRequest,
    noise_eta: f64,
) -> Result<f64, BackendError> {
    if req.response.role() != StepRole::Answer {
        return Err(BackendError::NotScorable(req.response.role().to_string()));
    }
    let base = if req.response.text() == task.ground_truth_text() {
        1.0
    } else {
        0.0
    };
    if noise_eta <= 0.0 {
        return Ok(base);
    }
    let eps = rng_from(req.seed).random_range(-noise_eta..noise_eta);
    Ok((base + eps).clamp(0.0, 1.0))
}

impl Backend for SimBackend {
    fn horizon(&self, query: &Query) -> Result<Option<usize>, BackendError> {
        Ok(Some(SyntheticTask::from_query(query)?.stage_mode.stages()))
    }

    fn generate(
        &self,
        query: &Query,
        req: &GenerationRequest,
        policy: &ToyPolicy,
    ) -> Result<ChainStep, BackendError> {
        sim_generate(&SyntheticTask::from_query(query)?, req, policy)
    }

    fn score(&self, query: &Query, req: &EvaluationRequest) -> Result<f64, BackendError> {
        sim_score(&SyntheticTask::from_query(query)?, req, self.noise_eta)
    }
}

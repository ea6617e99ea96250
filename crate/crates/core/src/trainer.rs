//! sDPO training of the region policy and the iterative generate/train loop.
//!
//! Training is full-batch gradient descent on the mean sDPO loss. The
//! weight gradient chains the loss gradient w.r.t. the two policy
//! log-probabilities through the softmax:
//!
//! ```text
//! dL/dw = mean_pairs [ dL/dlp_w * dlp_w/dw + dL/dlp_l * dlp_l/dw ]
//! ```

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Backend;
use crate::datagen::{generate_dataset, DatagenConfig, DatagenError, RunDiagnostics};
use crate::jsonl::Query;
use crate::loss::{sdpo_grad_logps, sdpo_loss, LogpGrads, LossConfig, PairLogps};
use crate::policy::{logprob_grad, region_logprob, snapshot_reference, RegionFeatures, ToyPolicy};
use crate::seed::{rng_from, stable_hash, Purpose};
use crate::synthbench::{candidate_set, evaluate_policy, BenchError, EvalResult, SyntheticTask};
use crate::types::PreferencePair;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("pair for `{query_id}` at timestep {timestep} cannot be resolved: {reason}")]
    Unresolvable {
        query_id: String,
        timestep: usize,
        reason: String,
    },
    #[error("no usable pairs ({skipped} skipped)")]
    NoUsablePairs { skipped: usize },
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefMode {
    /// Re-snapshot the reference from the current policy every iteration.
    #[default]
    PerIteration,
    /// Keep the policy the loop started from as the reference throughout.
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub m_iterations: usize,
    pub batch: BatchMode,
    pub seed: u64,
    pub ref_mode: RefMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learning_rate: 0.5,
            epochs: 4,
            m_iterations: 4,
            batch: BatchMode::Full,
            seed: 0,
            ref_mode: RefMode::PerIteration,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.m_iterations < 1 {
            return Err(TrainError::Config("m_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// A pair mapped onto the candidate set it was drawn from. Reference
/// log-probabilities are fixed at resolution time.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPair {
    pub features: Vec<RegionFeatures>,
    pub winner: usize,
    pub loser: usize,
    pub logp_w_ref: f64,
    pub logp_l_ref: f64,
    pub s_w: f64,
    pub s_l: f64,
}

impl ResolvedPair {
    pub fn logps(&self, policy: &ToyPolicy) -> PairLogps {
        let lp = policy
            .log_probs(&self.features)
            .expect("features were checked at resolution");
        PairLogps {
            logp_w_policy: lp[self.winner],
            logp_w_ref: self.logp_w_ref,
            logp_l_policy: lp[self.loser],
            logp_l_ref: self.logp_l_ref,
            s_w: self.s_w,
            s_l: self.s_l,
        }
    }
}

pub fn resolve_pair(
    reference: &ToyPolicy,
    pair: &PreferencePair,
    task: &SyntheticTask,
) -> Result<ResolvedPair, TrainError> {
    let fail = |reason: String| TrainError::Unresolvable {
        query_id: pair.query_id().to_string(),
        timestep: pair.timestep(),
        reason,
    };
    let cs = candidate_set(task, pair.timestep(), pair.context().last_region())
        .map_err(|e| fail(e.to_string()))?;
    let find = |who: &str, r: &crate::types::ScoredResponse| {
        let bbox = r
            .step()
            .bbox()
            .ok_or_else(|| fail(format!("{who} is not a region step")))?;
        cs.find(bbox)
            .ok_or_else(|| fail(format!("{who} box {bbox} matches no candidate region")))
    };
    let winner = find("winner", pair.winner())?;
    let loser = find("loser", pair.loser())?;
    let ref_lp = reference
        .log_probs(&cs.features)
        .map_err(|e| fail(e.to_string()))?;
    Ok(ResolvedPair {
        features: cs.features,
        winner,
        loser,
        logp_w_ref: ref_lp[winner],
        logp_l_ref: ref_lp[loser],
        s_w: pair.winner().score(),
        s_l: pair.loser().score(),
    })
}

/// The four chain log-probabilities of a pair plus its scores.
pub fn pair_logps(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &PreferencePair,
    task: &SyntheticTask,
) -> Result<PairLogps, TrainError> {
    let r = resolve_pair(reference, pair, task)?;
    let lp_w =
        region_logprob(policy, &r.features, r.winner).map_err(|e| TrainError::Unresolvable {
            query_id: pair.query_id().to_string(),
            timestep: pair.timestep(),
            reason: e.to_string(),
        })?;
    let lp_l = region_logprob(policy, &r.features, r.loser).expect("checked above");
    Ok(PairLogps {
        logp_w_policy: lp_w,
        logp_l_policy: lp_l,
        ..r.logps(reference)
    })
}

/// Resolves every pair whose task is known; the rest are counted as skipped.
pub fn resolve_pairs(
    reference: &ToyPolicy,
    pairs: &[PreferencePair],
    tasks: &HashMap<String, SyntheticTask>,
) -> (Vec<ResolvedPair>, usize) {
    let mut out = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for p in pairs {
        let resolved = match tasks.get(p.query_id()) {
            Some(task) => resolve_pair(reference, p, task),
            None => Err(TrainError::Unresolvable {
                query_id: p.query_id().to_string(),
                timestep: p.timestep(),
                reason: "unknown query".into(),
            }),
        };
        match resolved {
            Ok(r) => out.push(r),
            Err(e) => {
                log::warn!("skipping pair: {e}");
                skipped += 1;
            }
        }
    }
    (out, skipped)
}

/// Mean loss and its gradient w.r.t. the policy weights.
pub fn loss_and_gradient(
    policy: &ToyPolicy,
    pairs: &[ResolvedPair],
    cfg: &LossConfig,
    grad_fn: fn(&PairLogps, &LossConfig) -> LogpGrads,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; policy.feature_dim()];
    let mut total = 0.0;
    for r in pairs {
        let p = r.logps(policy);
        total += sdpo_loss(&p, cfg);
        let g = grad_fn(&p, cfg);
        let gw = logprob_grad(policy, &r.features, r.winner).expect("resolved");
        let gl = logprob_grad(policy, &r.features, r.loser).expect("resolved");
        for ((acc, a), b) in grad.iter_mut().zip(&gw).zip(&gl) {
            *acc += g.d_logp_w * a + g.d_logp_l * b;
        }
    }
    let n = pairs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

pub fn mean_loss(policy: &ToyPolicy, pairs: &[ResolvedPair], cfg: &LossConfig) -> f64 {
    pairs
        .iter()
        .map(|r| sdpo_loss(&r.logps(policy), cfg))
        .sum::<f64>()
        / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    /// Mean loss at the start of each epoch, before that epoch's update.
    pub loss_curve: Vec<f64>,
    /// Mean loss after the last update.
    pub final_loss: f64,
    pub n_used: usize,
    pub n_skipped: usize,
}

/// Full-batch gradient descent on already resolved pairs.
pub fn train_resolved(
    policy: &ToyPolicy,
    pairs: &[ResolvedPair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_resolved_with(policy, pairs, cfg, sdpo_grad_logps)
}

pub(crate) fn train_resolved_with(
    policy: &ToyPolicy,
    pairs: &[ResolvedPair],
    cfg: &TrainConfig,
    grad_fn: fn(&PairLogps, &LossConfig) -> LogpGrads,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::NoUsablePairs { skipped: 0 });
    }
    let mut policy = policy.clone();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (loss, grad) = loss_and_gradient(&policy, pairs, &cfg.loss, grad_fn);
        loss_curve.push(loss);
        policy.apply_gradient(&grad, cfg.learning_rate);
    }
    let final_loss = mean_loss(&policy, pairs, &cfg.loss);
    Ok(TrainOutcome {
        policy,
        loss_curve,
        final_loss,
        n_used: pairs.len(),
        n_skipped: 0,
    })
}

/// Trains `policy` against a fixed `reference` on a pair file's contents.
pub fn train_on_pairs(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[PreferencePair],
    tasks: &HashMap<String, SyntheticTask>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let (resolved, skipped) = resolve_pairs(reference, pairs, tasks);
    if resolved.is_empty() {
        return Err(TrainError::NoUsablePairs { skipped });
    }
    let mut out = train_resolved(policy, &resolved, cfg)?;
    out.n_skipped = skipped;
    Ok(out)
}

/// Parses every query that carries a synthetic task payload.
pub fn task_index(queries: &[Query]) -> Result<HashMap<String, SyntheticTask>, BenchError> {
    queries
        .iter()
        .map(|q| SyntheticTask::from_query(q).map(|t| (q.query_id.clone(), t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub n_pairs: usize,
    pub mean_loss_start: f64,
    pub mean_loss_end: f64,
    pub eval_score: f64,
    pub region_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationArtifacts {
    pub pairs: Vec<PreferencePair>,
    pub diagnostics: RunDiagnostics,
    pub loss_curve: Vec<f64>,
    /// Policy after this iteration's training.
    pub policy: ToyPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeOutcome {
    pub policy: ToyPolicy,
    pub initial_eval: EvalResult,
    pub reports: Vec<IterationReport>,
    pub iterations: Vec<IterationArtifacts>,
}

#[derive(Debug, Error)]
#[error("iteration {iteration} aborted after {} completed iteration(s): {reason}", .completed.reports.len())]
pub struct IterationAbort {
    pub iteration: usize,
    pub reason: String,
    pub completed: Box<IterativeOutcome>,
}

/// Seeded shuffle, then `m` contiguous, evenly sized subsets with the
/// remainder going to the last one.
pub fn split_queries(queries: &[Query], m: usize, seed: u64) -> Vec<Vec<Query>> {
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut rng_from(stable_hash(
        "split",
        &[seed, Purpose::Shuffle as u64],
    )));
    let size = queries.len() / m;
    (0..m)
        .map(|i| {
            let end = if i + 1 == m {
                order.len()
            } else {
                (i + 1) * size
            };
            order[i * size..end]
                .iter()
                .map(|&j| queries[j].clone())
                .collect()
        })
        .collect()
}

/// Alternates data generation with the current policy and sDPO training,
/// once per query subset, evaluating on `eval_tasks` after each round.
pub fn iterative_learn(
    initial: &ToyPolicy,
    backend: &dyn Backend,
    queries: &[Query],
    datagen_cfg: &DatagenConfig,
    train_cfg: &TrainConfig,
    eval_tasks: &[SyntheticTask],
) -> Result<IterativeOutcome, IterationAbort> {
    let mut outcome = IterativeOutcome {
        policy: initial.clone(),
        initial_eval: EvalResult {
            region_accuracy: 0.0,
            answer_score: 0.0,
        },
        reports: Vec::new(),
        iterations: Vec::new(),
    };
    let abort = |outcome: IterativeOutcome, iteration: usize, reason: String| IterationAbort {
        iteration,
        reason,
        completed: Box::new(outcome),
    };
    if let Err(e) = train_cfg.validate() {
        return Err(abort(outcome, 0, e.to_string()));
    }
    if let Err(e) = datagen_cfg.validate() {
        return Err(abort(outcome, 0, e.to_string()));
    }
    match evaluate_policy(initial, eval_tasks) {
        Ok(e) => outcome.initial_eval = e,
        Err(e) => return Err(abort(outcome, 0, e.to_string())),
    }
    let tasks = match task_index(queries) {
        Ok(t) => t,
        Err(e) => return Err(abort(outcome, 0, e.to_string())),
    };
    let initial_ref = snapshot_reference(initial);
    let subsets = split_queries(queries, train_cfg.m_iterations, train_cfg.seed);

    for (i, subset) in subsets.iter().enumerate() {
        let iteration = i + 1;
        let dataset = match generate_dataset(backend, &outcome.policy, subset, datagen_cfg) {
            Ok(d) => d,
            Err(e) => return Err(abort(outcome, iteration, e.to_string())),
        };
        if dataset.pairs.is_empty() {
            return Err(abort(
                outcome,
                iteration,
                "no preference pairs generated".into(),
            ));
        }
        let reference = match train_cfg.ref_mode {
            RefMode::PerIteration => snapshot_reference(&outcome.policy),
            RefMode::Initial => initial_ref.clone(),
        };
        let trained = match train_on_pairs(
            &outcome.policy,
            &reference,
            &dataset.pairs,
            &tasks,
            train_cfg,
        ) {
            Ok(t) => t,
            Err(e) => return Err(abort(outcome, iteration, e.to_string())),
        };
        let eval = match evaluate_policy(&trained.policy, eval_tasks) {
            Ok(e) => e,
            Err(e) => return Err(abort(outcome, iteration, e.to_string())),
        };
        log::info!(
            "iteration {iteration}: {} pairs, loss {:.4} -> {:.4}, eval {:.3}, region acc {:.3}",
            dataset.pairs.len(),
            trained.loss_curve[0],
            trained.final_loss,
            eval.answer_score,
            eval.region_accuracy
        );
        outcome.reports.push(IterationReport {
            iteration,
            n_pairs: dataset.pairs.len(),
            mean_loss_start: trained.loss_curve[0],
            mean_loss_end: trained.final_loss,
            eval_score: eval.answer_score,
            region_accuracy: eval.region_accuracy,
            label: None,
        });
        outcome.policy = trained.policy.clone();
        outcome.iterations.push(IterationArtifacts {
            pairs: dataset.pairs,
            diagnostics: dataset.diagnostics,
            loss_curve: trained.loss_curve,
            policy: trained.policy,
        });
    }
    Ok(outcome)
}

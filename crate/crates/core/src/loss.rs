//! DPO and Score-DPO losses with analytic gradients w.r.t. the policy
//! log-probabilities of the winner and loser chains.
//!
//! With implicit rewards `r(y) = beta * ln(pi(y)/pi_ref(y)) + beta * ln Z(x)`,
//! the partition term is shared by both members of a pair and drops out of
//! `r(y_w) - r(y_l)`. Score-DPO subtracts the mapped score margin
//! `g(s_w) - g(s_l)` inside the sigmoid:
//!
//! ```text
//! z = beta * [(lp_w - lp_w_ref) - (lp_l - lp_l_ref)] - (g(s_w) - g(s_l))
//! L = -ln sigmoid(z) = softplus(-z)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prefmath::{sigmoid, softplus};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("beta must be > 0, got {0}")]
    Beta(f64),
    #[error("gamma must be >= 0, got {0}")]
    Gamma(f64),
    #[error("g_scale must be >= 0, got {0}")]
    GScale(f64),
    #[error("min_margin must be >= 0, got {0}")]
    MinMargin(f64),
    #[error("batch is empty")]
    EmptyBatch,
}

/// Functional form of the score map `g`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GKind {
    /// `g(s) = g_scale * s`
    #[default]
    Affine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
    pub g_kind: GKind,
    pub g_scale: f64,
    pub min_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 0.5,
            g_kind: GKind::Affine,
            g_scale: 1.0,
            min_margin: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LossError::Beta(self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::Gamma(self.gamma));
        }
        if !(self.g_scale >= 0.0 && self.g_scale.is_finite()) {
            return Err(LossError::GScale(self.g_scale));
        }
        if !(self.min_margin >= 0.0 && self.min_margin.is_finite()) {
            return Err(LossError::MinMargin(self.min_margin));
        }
        Ok(())
    }
}

/// Chain log-probabilities under the policy and the frozen reference, plus
/// the evaluator scores of the two chains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogps {
    pub logp_w_policy: f64,
    pub logp_w_ref: f64,
    pub logp_l_policy: f64,
    pub logp_l_ref: f64,
    pub s_w: f64,
    pub s_l: f64,
}

/// Gradient of a pair loss w.r.t. the two policy log-probabilities.
/// Reference log-probabilities receive none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogpGrads {
    pub d_logp_w: f64,
    pub d_logp_l: f64,
}

pub fn g_map(s: f64, cfg: &LossConfig) -> f64 {
    match cfg.g_kind {
        GKind::Affine => cfg.g_scale * s,
    }
}

/// `r(y_w) - r(y_l)`; the `beta * ln Z(x)` terms cancel.
pub fn implicit_reward_diff(p: &PairLogps, beta: f64) -> f64 {
    beta * ((p.logp_w_policy - p.logp_w_ref) - (p.logp_l_policy - p.logp_l_ref))
}

/// `g(s_w) - g(s_l)`.
pub fn score_margin(p: &PairLogps, cfg: &LossConfig) -> f64 {
    g_map(p.s_w, cfg) - g_map(p.s_l, cfg)
}

/// Argument `z` of the sigmoid in the sDPO loss.
pub fn sdpo_logit(p: &PairLogps, cfg: &LossConfig) -> f64 {
    implicit_reward_diff(p, cfg.beta) - score_margin(p, cfg)
}

pub fn sdpo_loss(p: &PairLogps, cfg: &LossConfig) -> f64 {
    softplus(-sdpo_logit(p, cfg))
}

pub fn dpo_loss(p: &PairLogps, beta: f64) -> f64 {
    softplus(-implicit_reward_diff(p, beta))
}

pub fn sdpo_grad_logps(p: &PairLogps, cfg: &LossConfig) -> LogpGrads {
    // dL/dz = -(1 - sigmoid(z)) = -sigmoid(-z)
    let w = cfg.beta * sigmoid(-sdpo_logit(p, cfg));
    LogpGrads {
        d_logp_w: -w,
        d_logp_l: w,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean_loss: f64,
    pub per_pair: Vec<f64>,
}

/// Mean sDPO loss over the batch, summed in input order.
pub fn batch_loss(pairs: &[PairLogps], cfg: &LossConfig) -> Result<BatchLoss, LossError> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let per_pair: Vec<f64> = pairs.iter().map(|p| sdpo_loss(p, cfg)).collect();
    let mean_loss = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(BatchLoss {
        mean_loss,
        per_pair,
    })
}

//! Linear-softmax region selector: `pi(i) = softmax_i(w . phi_i)`.
//!
//! It stands in for the bounding-box head of the target model. The answer
//! produced from a region is not learnable, so a chain's log-probability
//! ratio reduces to the ratio of its region log-probabilities.

use std::fs;
use std::path::Path;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_from;

/// Temperatures below this use the argmax branch.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("feature dimension mismatch: policy has {expected}, candidate {index} has {found}")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        index: usize,
    },
    #[error("candidate index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("temperature must be > 0, got {0}")]
    Temperature(f64),
    #[error("non-finite weights or features")]
    NonFinite,
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// Feature vector `phi(x, b)` of one candidate region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures(Vec<f64>);

impl RegionFeatures {
    pub fn new(values: Vec<f64>) -> Result<Self, PolicyError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(Self(values))
        } else {
            Err(PolicyError::NonFinite)
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    feature_dim: usize,
    weights: Vec<f64>,
}

impl ToyPolicy {
    /// All-zero weights, i.e. the uniform policy.
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            weights: vec![0.0; feature_dim],
        }
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self, PolicyError> {
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(Self {
            feature_dim: weights.len(),
            weights,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `w <- w - lr * grad`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        assert_eq!(grad.len(), self.feature_dim, "gradient dimension");
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }

    fn check(&self, candidates: &[RegionFeatures]) -> Result<(), PolicyError> {
        if candidates.is_empty() {
            return Err(PolicyError::NoCandidates);
        }
        for (index, c) in candidates.iter().enumerate() {
            if c.dim() != self.feature_dim {
                return Err(PolicyError::DimensionMismatch {
                    expected: self.feature_dim,
                    found: c.dim(),
                    index,
                });
            }
        }
        Ok(())
    }

    fn logit(&self, phi: &RegionFeatures) -> f64 {
        self.weights
            .iter()
            .zip(phi.values())
            .map(|(w, x)| w * x)
            .sum()
    }

    pub fn logits(&self, candidates: &[RegionFeatures]) -> Result<Vec<f64>, PolicyError> {
        self.check(candidates)?;
        Ok(candidates.iter().map(|c| self.logit(c)).collect())
    }

    /// Log-softmax over every candidate, max-subtracted.
    pub fn log_probs(&self, candidates: &[RegionFeatures]) -> Result<Vec<f64>, PolicyError> {
        Ok(log_softmax(&self.logits(candidates)?))
    }

    pub fn probs(&self, candidates: &[RegionFeatures]) -> Result<Vec<f64>, PolicyError> {
        Ok(self
            .log_probs(candidates)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let text = serde_json::to_string(self).expect("policy is serializable");
        fs::write(path, text + "\n").map_err(|e| PolicyError::Checkpoint {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let err = |message: String| PolicyError::Checkpoint {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let p: ToyPolicy = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if p.weights.len() != p.feature_dim {
            return Err(err(format!(
                "feature_dim {} but {} weights",
                p.feature_dim,
                p.weights.len()
            )));
        }
        if !p.weights.iter().all(|w| w.is_finite()) {
            return Err(err("non-finite weight".into()));
        }
        Ok(p)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn region_logprob(
    policy: &ToyPolicy,
    candidates: &[RegionFeatures],
    index: usize,
) -> Result<f64, PolicyError> {
    if index >= candidates.len() {
        return Err(PolicyError::IndexOutOfRange {
            index,
            len: candidates.len(),
        });
    }
    Ok(policy.log_probs(candidates)?[index])
}

/// Seeded categorical draw from `softmax(logits / temperature)`.
pub fn sample_region(
    policy: &ToyPolicy,
    candidates: &[RegionFeatures],
    seed: u64,
    temperature: f64,
) -> Result<usize, PolicyError> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(PolicyError::Temperature(temperature));
    }
    let logits = policy.logits(candidates)?;
    if temperature < GREEDY_TEMPERATURE {
        return Ok(argmax(&logits));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    let u: f64 = rng_from(seed).sample(Open01);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // Rounding left the cumulative sum just under u.
    Ok(probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1))
}

/// `d/dw log pi(index) = phi_index - sum_j pi_j phi_j`.
pub fn logprob_grad(
    policy: &ToyPolicy,
    candidates: &[RegionFeatures],
    index: usize,
) -> Result<Vec<f64>, PolicyError> {
    if index >= candidates.len() {
        return Err(PolicyError::IndexOutOfRange {
            index,
            len: candidates.len(),
        });
    }
    let probs = policy.probs(candidates)?;
    let mut grad = candidates[index].values().to_vec();
    for (p, c) in probs.iter().zip(candidates) {
        for (g, x) in grad.iter_mut().zip(c.values()) {
            *g -= p * x;
        }
    }
    Ok(grad)
}

/// Frozen, independent copy used as the reference policy.
pub fn snapshot_reference(policy: &ToyPolicy) -> ToyPolicy {
    policy.clone()
}

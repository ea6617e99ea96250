//! Probability layer: sigmoid, Bradley-Terry preference, Gumbel draws and
//! the margin-shifted preference probability.
//!
//! If `R_w ~ Gumbel(r_w, 1)` and `R_l ~ Gumbel(r_l, 1)` are independent,
//! then `R_w - R_l` is logistic with location `r_w - r_l`, so
//! `P(R_w - R_l > delta) = sigmoid(r_w - r_l - delta)`. With `delta = 0`
//! this is the Bradley-Terry model. [`mc_preference_prob`] checks the
//! identity by direct sampling.

use rand::distr::Open01;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrefMathError {
    #[error("Monte-Carlo estimate needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
}

pub const MIN_MC_SAMPLES: usize = 1000;

/// Logistic sigmoid, stable over the whole finite range.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln sigmoid(x) = -softplus(-x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Bradley-Terry `P(y_w > y_l) = sigmoid(r_w - r_l)`.
pub fn bt_preference_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// `P(R_w - R_l > delta_r)` for unit-scale Gumbel rewards centred on
/// `r_w` and `r_l`.
pub fn shifted_preference_prob(r_w: f64, r_l: f64, delta_r: f64) -> f64 {
    sigmoid(r_w - r_l - delta_r)
}

/// Gumbel location/scale. The scale is pinned to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelParams {
    location: f64,
    scale: f64,
}

impl GumbelParams {
    pub fn unit(location: f64) -> Self {
        Self {
            location,
            scale: 1.0,
        }
    }

    pub fn location(&self) -> f64 {
        self.location
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// `location - scale * ln(-ln U)`, `U` uniform on the open interval (0,1).
pub fn gumbel_sample<R: Rng + ?Sized>(params: GumbelParams, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    params.location - params.scale * (-u.ln()).ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_err: f64,
    pub n_samples: usize,
}

impl McEstimate {
    /// Whether `target` lies within `k` standard errors of the estimate.
    pub fn agrees_with(&self, target: f64, k: f64) -> bool {
        (self.estimate - target).abs() <= k * self.std_err
    }
}

/// Fraction of draws with `gumbel(r_w) - gumbel(r_l) > delta_r`.
pub fn mc_preference_prob<R: Rng + ?Sized>(
    r_w: f64,
    r_l: f64,
    delta_r: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate, PrefMathError> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(PrefMathError::TooFewSamples {
            min: MIN_MC_SAMPLES,
            got: n_samples,
        });
    }
    let gw = GumbelParams::unit(r_w);
    let gl = GumbelParams::unit(r_l);
    let hits = (0..n_samples)
        .filter(|_| gumbel_sample(gw, rng) - gumbel_sample(gl, rng) > delta_r)
        .count();
    let p = hits as f64 / n_samples as f64;
    Ok(McEstimate {
        estimate: p,
        std_err: (p * (1.0 - p) / n_samples as f64).sqrt(),
        n_samples,
    })
}

//! Self-check suite behind `uvcot verify`.
//!
//! Each check recomputes a property from first principles (finite
//! differences, Monte-Carlo, re-serialization) and compares it with the
//! library's answer. The loss gradient is injectable so a deliberately
//! broken gradient can be shown to fail.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::backends::SimBackend;
use crate::datagen::{generate_dataset, DatagenConfig};
use crate::jsonl::{deserialize_pair, serialize_pair, Query};
use crate::loss::{
    dpo_loss, sdpo_grad_logps, sdpo_logit, sdpo_loss, LogpGrads, LossConfig, PairLogps,
};
use crate::policy::ToyPolicy;
use crate::prefmath::{mc_preference_prob, shifted_preference_prob};
use crate::seed::{rng_from, stable_hash};
use crate::synthbench::{candidate_set, make_task, make_tasks, StageMode, SyntheticTask};
use crate::trainer::{loss_and_gradient, mean_loss, resolve_pairs};
use crate::types::{ChainStep, PairMeta, PreferencePair, ResponseChain, ScoredResponse};

pub type GradFn = fn(&PairLogps, &LossConfig) -> LogpGrads;

pub const FD_STEP: f64 = 1e-5;
pub const LOGP_GRAD_TOL: f64 = 1e-6;
pub const WEIGHT_GRAD_TOL: f64 = 1e-5;
pub const MC_SE_BOUND: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(f, "{status}  {:width$}  {}", c.name, c.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub grad_fn: GradFn,
    pub seed: u64,
    pub n_configs: usize,
    pub n_reduction: usize,
    pub mc_samples: usize,
    pub n_pair_tasks: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            grad_fn: sdpo_grad_logps,
            seed: 0,
            n_configs: 200,
            n_reduction: 10_000,
            mc_samples: 1_000_000,
            n_pair_tasks: 1_300,
        }
    }
}

pub fn run_suite(opts: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        checks: vec![
            check_dpo_reduction(opts.n_reduction, opts.seed),
            check_logp_gradients(opts.n_configs, opts.seed, opts.grad_fn),
            check_weight_gradients(opts.n_configs, opts.seed, opts.grad_fn),
            check_gumbel_grid(opts.mc_samples, opts.seed),
            check_pair_invariants(opts.n_pair_tasks, opts.seed),
        ],
    }
}

/// Max-norm relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_pair_logps<R: Rng>(rng: &mut R) -> PairLogps {
    PairLogps {
        logp_w_policy: rng.random_range(-8.0..0.0),
        logp_w_ref: rng.random_range(-8.0..0.0),
        logp_l_policy: rng.random_range(-8.0..0.0),
        logp_l_ref: rng.random_range(-8.0..0.0),
        s_w: rng.random_range(0.0..1.5),
        s_l: rng.random_range(0.0..1.5),
    }
}

pub fn random_loss_config<R: Rng>(rng: &mut R) -> LossConfig {
    LossConfig {
        beta: rng.random_range(0.05..1.0),
        g_scale: rng.random_range(0.0..2.0),
        ..Default::default()
    }
}

pub fn check_dpo_reduction(n: usize, seed: u64) -> CheckResult {
    let mut rng = rng_from(seed);
    let mut mismatches = 0;
    for _ in 0..n {
        let p = random_pair_logps(&mut rng);
        let cfg = LossConfig {
            g_scale: 0.0,
            ..random_loss_config(&mut rng)
        };
        if sdpo_loss(&p, &cfg).to_bits() != dpo_loss(&p, cfg.beta).to_bits() {
            mismatches += 1;
        }
    }
    CheckResult {
        name: "dpo_reduction",
        passed: mismatches == 0,
        detail: format!("{mismatches}/{n} pairs differ bitwise at g_scale=0"),
    }
}

/// Central differences of the pair loss w.r.t. the two policy log-probs.
/// Configurations are redrawn until the logit is moderate so the gradient
/// is not vanishingly small next to finite-difference rounding error.
pub fn check_logp_gradients(n: usize, seed: u64, grad_fn: GradFn) -> CheckResult {
    let mut rng = rng_from(stable_hash("verify.loss_gradient", &[seed]));
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < n {
        let p = random_pair_logps(&mut rng);
        let cfg = random_loss_config(&mut rng);
        if sdpo_logit(&p, &cfg).abs() > 6.0 {
            continue;
        }
        let g = grad_fn(&p, &cfg);
        let fd_w = (sdpo_loss(
            &PairLogps {
                logp_w_policy: p.logp_w_policy + FD_STEP,
                ..p
            },
            &cfg,
        ) - sdpo_loss(
            &PairLogps {
                logp_w_policy: p.logp_w_policy - FD_STEP,
                ..p
            },
            &cfg,
        )) / (2.0 * FD_STEP);
        let fd_l = (sdpo_loss(
            &PairLogps {
                logp_l_policy: p.logp_l_policy + FD_STEP,
                ..p
            },
            &cfg,
        ) - sdpo_loss(
            &PairLogps {
                logp_l_policy: p.logp_l_policy - FD_STEP,
                ..p
            },
            &cfg,
        )) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(&[g.d_logp_w, g.d_logp_l], &[fd_w, fd_l]));
        done += 1;
    }
    CheckResult {
        name: "loss_gradient",
        passed: worst < LOGP_GRAD_TOL,
        detail: format!("max rel err {worst:.2e} over {n} configs (tol {LOGP_GRAD_TOL:.0e})"),
    }
}

fn random_cell_pairs<R: Rng>(task: &SyntheticTask, n: usize, rng: &mut R) -> Vec<PreferencePair> {
    let cs = candidate_set(task, 1, None).expect("single-stage stage 1");
    let ctx = ResponseChain::start(&task.task_id, &task.question);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = rng.random_range(0..cs.len());
        let l = rng.random_range(0..cs.len());
        if w == l {
            continue;
        }
        let s_l: f64 = rng.random_range(0.0..0.5);
        let s_w: f64 = rng.random_range(0.5..1.0);
        let resp = |i: usize, s: f64| {
            ScoredResponse::combine(ChainStep::region("r", cs.regions[i]), s, 0.0, 0.0)
                .expect("scores in range")
        };
        let meta = PairMeta {
            gamma: 0.5,
            n_candidates: cs.len(),
        };
        out.push(
            PreferencePair::new(ctx.clone(), 1, resp(w, s_w), resp(l, s_l), meta)
                .expect("distinct cells, ordered scores"),
        );
    }
    out
}

fn random_policy<R: Rng>(dim: usize, rng: &mut R) -> ToyPolicy {
    ToyPolicy::from_weights((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("finite weights")
}

/// Central differences of the trainer's mean batch loss w.r.t. each weight.
pub fn check_weight_gradients(n: usize, seed: u64, grad_fn: GradFn) -> CheckResult {
    let mut rng = rng_from(stable_hash("verify.weight_gradient", &[seed]));
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let task = make_task(rng.random(), 4, StageMode::Single, 0.9).expect("valid task");
        let pairs = random_cell_pairs(&task, rng.random_range(1..6), &mut rng);
        let tasks = HashMap::from([(task.task_id.clone(), task)]);
        let reference = random_policy(8, &mut rng);
        let policy = random_policy(8, &mut rng);
        let cfg = random_loss_config(&mut rng);
        let (resolved, skipped) = resolve_pairs(&reference, &pairs, &tasks);
        debug_assert_eq!(skipped, 0, "config {i}");
        let (_, g) = loss_and_gradient(&policy, &resolved, &cfg, grad_fn);
        let fd: Vec<f64> = (0..policy.feature_dim())
            .map(|k| {
                let at = |d: f64| {
                    let mut w = policy.weights().to_vec();
                    w[k] += d;
                    mean_loss(
                        &ToyPolicy::from_weights(w).expect("finite"),
                        &resolved,
                        &cfg,
                    )
                };
                (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP)
            })
            .collect();
        worst = worst.max(relative_error(&g, &fd));
    }
    CheckResult {
        name: "weight_gradient",
        passed: worst < WEIGHT_GRAD_TOL,
        detail: format!("max rel err {worst:.2e} over {n} configs (tol {WEIGHT_GRAD_TOL:.0e})"),
    }
}

pub const GUMBEL_GAPS: [f64; 3] = [-1.0, 0.0, 1.5];
pub const GUMBEL_DELTAS: [f64; 3] = [0.0, 0.5, 2.0];

/// Monte-Carlo `P(R_w - R_l > delta)` against `sigmoid(r_w - r_l - delta)`.
pub fn check_gumbel_grid(n_samples: usize, seed: u64) -> CheckResult {
    let mut rng = rng_from(stable_hash("verify.gumbel", &[seed]));
    let mut worst_z: f64 = 0.0;
    let mut err = None;
    for gap in GUMBEL_GAPS {
        for delta in GUMBEL_DELTAS {
            match mc_preference_prob(gap, 0.0, delta, n_samples, &mut rng) {
                Ok(est) => {
                    let target = shifted_preference_prob(gap, 0.0, delta);
                    worst_z = worst_z.max((est.estimate - target).abs() / est.std_err);
                }
                Err(e) => err = Some(e.to_string()),
            }
        }
    }
    let (passed, detail) = match err {
        Some(e) => (false, e),
        None => (
            worst_z <= MC_SE_BOUND,
            format!("worst |MC - sigmoid| = {worst_z:.2} SE over 3x3 grid, {n_samples} samples"),
        ),
    };
    CheckResult {
        name: "gumbel_shift",
        passed,
        detail,
    }
}

/// Generates pairs with the simulated backend on two-stage tasks and checks
/// ordering, context, score composition and JSONL round-trip.
pub fn check_pair_invariants(n_tasks: usize, seed: u64) -> CheckResult {
    let tasks = match make_tasks(seed, n_tasks, 4, StageMode::TwoStage, 0.9) {
        Ok(t) => t,
        Err(e) => return fail_pairs(e.to_string()),
    };
    let queries: Vec<Query> = tasks.iter().map(SyntheticTask::to_query).collect();
    let cfg = DatagenConfig {
        t_steps: 2,
        base_seed: seed,
        ..Default::default()
    };
    let policy = ToyPolicy::zeros(StageMode::TwoStage.feature_dim());
    let data = match generate_dataset(&SimBackend::default(), &policy, &queries, &cfg) {
        Ok(d) => d,
        Err(e) => return fail_pairs(e.to_string()),
    };
    let finals: HashMap<&str, &ResponseChain> = data
        .final_chains
        .iter()
        .map(|c| (c.query_id(), c))
        .collect();
    let mut bad = Vec::new();
    for (i, p) in data.pairs.iter().enumerate() {
        let w = p.winner();
        let l = p.loser();
        if w.score() <= l.score() + cfg.min_margin {
            bad.push(format!("pair {i}: margin"));
        }
        let ctx = p.context();
        let prefix_ok = finals
            .get(p.query_id())
            .is_some_and(|f| f.steps().starts_with(ctx.steps()));
        if ctx.region_count() + 1 != p.timestep() || !prefix_ok {
            bad.push(format!("pair {i}: context"));
        }
        let is_final = p.timestep() == cfg.t_steps;
        for r in [w, l] {
            let ok = if is_final {
                r.score_next() == 0.0 && r.score() == r.score_cur()
            } else {
                r.score() == r.score_cur() + cfg.gamma * r.score_next()
            };
            if !ok {
                bad.push(format!("pair {i}: score composition"));
            }
        }
        match deserialize_pair(&serialize_pair(p)) {
            Ok(back) if &back == p => {}
            _ => bad.push(format!("pair {i}: round trip")),
        }
    }
    let n = data.pairs.len();
    CheckResult {
        name: "pair_invariants",
        passed: bad.is_empty() && n > 0,
        detail: if bad.is_empty() {
            format!("{n} pairs from {n_tasks} tasks")
        } else {
            format!("{} violation(s) in {n} pairs, first: {}", bad.len(), bad[0])
        },
    }
}

fn fail_pairs(detail: String) -> CheckResult {
    CheckResult {
        name: "pair_invariants",
        passed: false,
        detail,
    }
}

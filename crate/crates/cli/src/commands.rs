use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use uvcot::backends::{Backend, Credentials, HttpBackend, SimBackend};
use uvcot::datagen::generate_dataset;
use uvcot::jsonl::{read_pairs, read_queries, write_pairs, write_queries, Query};
use uvcot::loss::{sdpo_grad_logps, LogpGrads, LossConfig, PairLogps};
use uvcot::policy::{snapshot_reference, ToyPolicy};
use uvcot::synthbench::{make_task, make_tasks, SyntheticTask};
use uvcot::trainer::{iterative_learn, task_index, train_on_pairs, TrainError};
use uvcot::types::PreferencePair;
use uvcot::verify::{run_suite, VerifyOptions};

use crate::config::{BackendChoice, BenchSection, RunConfig};
use crate::{Ablation, Fault};

/// Failure of a command, carrying the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Usage, configuration or I/O problem (exit 1).
    #[error("{0}")]
    Fatal(String),
    /// The command ran but produced nothing usable (exit 2).
    #[error("{0}")]
    Empty(String),
    /// The iterative loop stopped early (exit 3).
    #[error("{0}")]
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Fatal(_) => 1,
            CliError::Empty(_) => 2,
            CliError::Partial(_) => 3,
        }
    }
}

fn fatal(e: impl std::fmt::Display) -> CliError {
    CliError::Fatal(e.to_string())
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| fatal(format!("cannot write {}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn make_backend(
    cfg: &RunConfig,
    choice: Option<BackendChoice>,
) -> Result<Box<dyn Backend>, CliError> {
    match choice.unwrap_or(cfg.backend.kind) {
        BackendChoice::Sim => Ok(Box::new(SimBackend::new(cfg.backend.noise_eta))),
        BackendChoice::Http => {
            let mut section = cfg.backend.clone();
            section.kind = BackendChoice::Http;
            let backend = HttpBackend::new(
                section.descriptor(),
                Credentials::from_env(),
                section.http_config(),
            )
            .map_err(fatal)?;
            Ok(Box::new(backend))
        }
    }
}

fn initial_policy(path: Option<&Path>, bench: &BenchSection) -> Result<ToyPolicy, CliError> {
    match path {
        Some(p) => ToyPolicy::load(p).map_err(fatal),
        None => Ok(ToyPolicy::zeros(bench.stage_mode.feature_dim())),
    }
}

pub fn gen_tasks(config: &Path, out: &Path, count: usize, first_seed: u64) -> Result<(), CliError> {
    let cfg = RunConfig::load(config).map_err(fatal)?;
    let b = &cfg.bench;
    let tasks = make_tasks(first_seed, count, b.grid_size, b.stage_mode, b.p_hit).map_err(fatal)?;
    let queries: Vec<Query> = tasks.iter().map(SyntheticTask::to_query).collect();
    write_queries(out, &queries).map_err(fatal)?;
    println!("wrote {} tasks to {}", queries.len(), out.display());
    Ok(())
}

pub struct GenDataArgs {
    pub config: PathBuf,
    pub queries: PathBuf,
    pub out: PathBuf,
    pub backend: Option<BackendChoice>,
    pub policy: Option<PathBuf>,
    pub diagnostics: Option<PathBuf>,
}

pub fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config).map_err(fatal)?;
    let queries = read_queries(&args.queries).map_err(fatal)?;
    let policy = initial_policy(args.policy.as_deref(), &cfg.bench)?;
    let backend = make_backend(&cfg, args.backend)?;
    let data = generate_dataset(backend.as_ref(), &policy, &queries, &cfg.datagen_config())
        .map_err(fatal)?;
    write_pairs(&args.out, &data.pairs).map_err(fatal)?;
    let diag_path = args
        .diagnostics
        .unwrap_or_else(|| with_suffix(&args.out, ".diagnostics.json"));
    let diag = serde_json::to_string_pretty(&data.diagnostics).map_err(fatal)?;
    write_file(&diag_path, &(diag + "\n"))?;
    let d = &data.diagnostics;
    println!(
        "pairs: {}  queries: {}  skipped: {}  dropped candidates: {}",
        d.n_pairs, d.n_queries, d.n_skipped, d.n_dropped_candidates
    );
    if data.pairs.is_empty() {
        return Err(CliError::Empty("no preference pairs generated".into()));
    }
    Ok(())
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub pairs: PathBuf,
    pub policy_in: PathBuf,
    pub policy_out: PathBuf,
    pub queries: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
}

/// Rebuilds synthetic tasks from `task-<seed>` query ids.
fn tasks_from_ids(
    pairs: &[PreferencePair],
    bench: &BenchSection,
) -> HashMap<String, SyntheticTask> {
    let mut out = HashMap::new();
    for p in pairs {
        let id = p.query_id();
        if out.contains_key(id) {
            continue;
        }
        let seed = id.strip_prefix("task-").and_then(|s| s.parse::<u64>().ok());
        match seed.map(|s| make_task(s, bench.grid_size, bench.stage_mode, bench.p_hit)) {
            Some(Ok(task)) => {
                out.insert(id.to_string(), task);
            }
            _ => log::warn!("cannot rebuild task for query `{id}`"),
        }
    }
    out
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config).map_err(fatal)?;
    let pairs =
        read_pairs(&args.pairs).map_err(|e| fatal(format!("{}: {e}", args.pairs.display())))?;
    let policy = ToyPolicy::load(&args.policy_in).map_err(fatal)?;
    let tasks = match &args.queries {
        Some(q) => task_index(&read_queries(q).map_err(fatal)?).map_err(fatal)?,
        None => tasks_from_ids(&pairs, &cfg.bench),
    };
    let reference = snapshot_reference(&policy);
    let out = match train_on_pairs(&policy, &reference, &pairs, &tasks, &cfg.train_config()) {
        Ok(o) => o,
        Err(e @ TrainError::NoUsablePairs { .. }) => return Err(CliError::Empty(e.to_string())),
        Err(e) => return Err(fatal(e)),
    };
    out.policy.save(&args.policy_out).map_err(fatal)?;
    let mut csv = String::from("epoch,mean_loss\n");
    for (e, l) in out.loss_curve.iter().chain([&out.final_loss]).enumerate() {
        csv.push_str(&format!("{e},{l}\n"));
    }
    let csv_path = args
        .loss_csv
        .unwrap_or_else(|| with_suffix(&args.policy_out, ".loss.csv"));
    write_file(&csv_path, &csv)?;
    println!(
        "trained on {} pairs ({} skipped): loss {:.6} -> {:.6}",
        out.n_used, out.n_skipped, out.loss_curve[0], out.final_loss
    );
    Ok(())
}

pub struct IterateArgs {
    pub config: PathBuf,
    pub queries: PathBuf,
    pub out_dir: PathBuf,
    pub ablate: Option<Ablation>,
    pub backend: Option<BackendChoice>,
    pub policy: Option<PathBuf>,
}

pub fn apply_ablation(cfg: &mut RunConfig, ablate: Option<Ablation>) {
    match ablate {
        Some(Ablation::NoGamma) => cfg.loss.gamma = 0.0,
        Some(Ablation::NaiveDpo) => cfg.loss.g_scale = 0.0,
        Some(Ablation::SinglePass) => cfg.train.m_iterations = 1,
        None => {}
    }
}

pub fn iterate(args: IterateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config).map_err(fatal)?;
    apply_ablation(&mut cfg, args.ablate);
    let label = args.ablate.map_or("sdpo-iterative", Ablation::label);
    let queries = read_queries(&args.queries).map_err(fatal)?;
    let policy = initial_policy(args.policy.as_deref(), &cfg.bench)?;
    let backend = make_backend(&cfg, args.backend)?;
    let eval = cfg.bench.eval_set().map_err(fatal)?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| fatal(format!("cannot create {}: {e}", args.out_dir.display())))?;

    let result = iterative_learn(
        &policy,
        backend.as_ref(),
        &queries,
        &cfg.datagen_config(),
        &cfg.train_config(),
        &eval,
    );
    let (outcome, abort) = match result {
        Ok(o) => (o, None),
        Err(a) => (*a.completed, Some((a.iteration, a.reason))),
    };
    for (i, it) in outcome.iterations.iter().enumerate() {
        let n = i + 1;
        it.policy
            .save(&args.out_dir.join(format!("policy_iter_{n}.json")))
            .map_err(fatal)?;
        write_pairs(
            &args.out_dir.join(format!("pairs_iter_{n}.jsonl")),
            &it.pairs,
        )
        .map_err(fatal)?;
    }
    let reports: Vec<_> = outcome
        .reports
        .iter()
        .cloned()
        .map(|mut r| {
            r.label = Some(label.to_string());
            r
        })
        .collect();
    let json = serde_json::to_string_pretty(&reports).map_err(fatal)?;
    write_file(&args.out_dir.join("reports.json"), &(json + "\n"))?;
    let initial = serde_json::to_string_pretty(&outcome.initial_eval).map_err(fatal)?;
    write_file(&args.out_dir.join("eval_initial.json"), &(initial + "\n"))?;

    println!(
        "{label}: initial eval {:.4} (region accuracy {:.4})",
        outcome.initial_eval.answer_score, outcome.initial_eval.region_accuracy
    );
    for r in &reports {
        println!(
            "iteration {}: {} pairs, loss {:.6} -> {:.6}, eval {:.4}, region accuracy {:.4}",
            r.iteration,
            r.n_pairs,
            r.mean_loss_start,
            r.mean_loss_end,
            r.eval_score,
            r.region_accuracy
        );
    }
    match abort {
        None => Ok(()),
        Some((iteration, reason)) => Err(CliError::Partial(format!(
            "iteration {iteration} aborted after {} completed iteration(s): {reason}",
            reports.len()
        ))),
    }
}

fn sign_flipped_grad(p: &PairLogps, cfg: &LossConfig) -> LogpGrads {
    let g = sdpo_grad_logps(p, cfg);
    LogpGrads {
        d_logp_w: -g.d_logp_w,
        d_logp_l: -g.d_logp_l,
    }
}

pub fn verify(seed: u64, fault: Option<Fault>) -> Result<(), CliError> {
    let opts = VerifyOptions {
        seed,
        grad_fn: match fault {
            Some(Fault::SignFlip) => sign_flipped_grad,
            None => sdpo_grad_logps,
        },
        ..Default::default()
    };
    let report = run_suite(&opts);
    print!("{report}");
    if report.all_passed() {
        return Ok(());
    }
    let failed: Vec<_> = report.failed().map(|c| c.name).collect();
    Err(fatal(format!("failed properties: {}", failed.join(", "))))
}

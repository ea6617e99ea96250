mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::BackendChoice;

#[derive(Debug, Parser)]
#[command(
    name = "uvcot",
    version,
    about = "Score-DPO over bounding-box reasoning chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic grid tasks as query JSONL.
    GenTasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
    /// Generate preference pairs for a query file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<BackendChoice>,
        /// Policy checkpoint used as the target; defaults to a uniform policy.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Diagnostics JSON; defaults to `<out>.diagnostics.json`.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Train one round of sDPO on a pair file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        policy_in: PathBuf,
        #[arg(long)]
        policy_out: PathBuf,
        /// Query file the pairs were generated from. Without it, tasks are
        /// rebuilt from `task-<seed>` ids and the `[bench]` settings.
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Loss curve CSV; defaults to `<policy-out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Run the full generate/train loop over query subsets.
    Iterate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        #[arg(long, value_enum)]
        backend: Option<BackendChoice>,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Run the self-check suite and print a pass/fail table.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoGamma,
    NaiveDpo,
    SinglePass,
}

impl Ablation {
    pub fn label(self) -> &'static str {
        match self {
            Ablation::NoGamma => "no-gamma",
            Ablation::NaiveDpo => "naive-dpo",
            Ablation::SinglePass => "single-pass",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    SignFlip,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTasks {
            config,
            out,
            count,
            first_seed,
        } => commands::gen_tasks(&config, &out, count, first_seed),
        Command::GenData {
            config,
            queries,
            out,
            backend,
            policy,
            diagnostics,
        } => commands::gen_data(commands::GenDataArgs {
            config,
            queries,
            out,
            backend,
            policy,
            diagnostics,
        }),
        Command::Train {
            config,
            pairs,
            policy_in,
            policy_out,
            queries,
            loss_csv,
        } => commands::train(commands::TrainArgs {
            config,
            pairs,
            policy_in,
            policy_out,
            queries,
            loss_csv,
        }),
        Command::Iterate {
            config,
            queries,
            out_dir,
            ablate,
            backend,
            policy,
        } => commands::iterate(commands::IterateArgs {
            config,
            queries,
            out_dir,
            ablate,
            backend,
            policy,
        }),
        Command::Verify { seed, inject_fault } => commands::verify(seed, inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

use std::path::Path;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;
use uvcot::backends::{BackendDescriptor, BackendKind, HttpConfig};
use uvcot::datagen::DatagenConfig;
use uvcot::loss::LossConfig;
use uvcot::synthbench::{make_tasks, StageMode, SyntheticTask};
use uvcot::trainer::{BatchMode, RefMode, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    #[default]
    Sim,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub n_seeds: usize,
    pub k_pairs: usize,
    pub n_next_samples: usize,
    pub t_steps: usize,
    pub base_seed: u64,
    pub temperature: f64,
}

impl Default for DatagenSection {
    fn default() -> Self {
        let d = DatagenConfig::default();
        Self {
            n_seeds: d.n_seeds,
            k_pairs: d.k_pairs,
            n_next_samples: d.n_next_samples,
            t_steps: d.t_steps,
            base_seed: d.base_seed,
            temperature: d.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub m_iterations: usize,
    pub batch: BatchMode,
    pub ref_mode: RefMode,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            m_iterations: t.m_iterations,
            batch: t.batch,
            ref_mode: t.ref_mode,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub grid_size: usize,
    pub stage_mode: StageMode,
    pub p_hit: f64,
    /// Number of held-out evaluation tasks.
    pub eval_tasks: usize,
    /// Seed of the first held-out task; keep it far from training seeds.
    pub eval_first_seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            grid_size: 4,
            stage_mode: StageMode::Single,
            p_hit: 0.9,
            eval_tasks: 1000,
            eval_first_seed: 1_000_000_000,
        }
    }
}

impl BenchSection {
    pub fn eval_set(&self) -> Result<Vec<SyntheticTask>, ConfigError> {
        make_tasks(
            self.eval_first_seed,
            self.eval_tasks,
            self.grid_size,
            self.stage_mode,
            self.p_hit,
        )
        .map_err(|e| ConfigError::Invalid(format!("bench: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendChoice,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub max_retries: usize,
    pub max_inflight: usize,
    pub retry_base_ms: u64,
    pub timeout_secs: u64,
    pub noise_eta: f64,
}

impl Default for BackendSection {
    fn default() -> Self {
        let h = HttpConfig::default();
        Self {
            kind: BackendChoice::Sim,
            endpoint: None,
            model_name: None,
            max_retries: h.max_retries,
            max_inflight: h.max_inflight,
            retry_base_ms: h.retry_base.as_millis() as u64,
            timeout_secs: h.timeout.as_secs(),
            noise_eta: 0.05,
        }
    }
}

impl BackendSection {
    pub fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: match self.kind {
                BackendChoice::Sim => BackendKind::Simulated,
                BackendChoice::Http => BackendKind::Http,
            },
            endpoint: self.endpoint.clone(),
            model_name: self.model_name.clone(),
            prompt_templates: Default::default(),
        }
    }

    pub fn http_config(&self) -> HttpConfig {
        HttpConfig {
            max_retries: self.max_retries,
            retry_base: Duration::from_millis(self.retry_base_ms),
            max_inflight: self.max_inflight,
            timeout: Duration::from_secs(self.timeout_secs),
        }
    }
}

/// Everything a run needs, loaded from one TOML file with sections
/// `[loss]`, `[datagen]`, `[train]`, `[bench]` and `[backend]`.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub datagen: DatagenSection,
    pub train: TrainSection,
    pub bench: BenchSection,
    pub backend: BackendSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<string>".into(),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.datagen_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let b = &self.bench;
        if b.grid_size < 2 {
            return Err(ConfigError::Invalid(format!(
                "bench.grid_size must be >= 2, got {}",
                b.grid_size
            )));
        }
        if !(b.p_hit > 0.0 && b.p_hit <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "bench.p_hit must lie in (0, 1], got {}",
                b.p_hit
            )));
        }
        if !(0.0..1.0).contains(&self.backend.noise_eta) {
            return Err(ConfigError::Invalid(format!(
                "backend.noise_eta must lie in [0, 1), got {}",
                self.backend.noise_eta
            )));
        }
        if self.backend.max_inflight < 1 {
            return Err(ConfigError::Invalid(
                "backend.max_inflight must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Datagen settings; `gamma` and `min_margin` come from `[loss]`.
    pub fn datagen_config(&self) -> DatagenConfig {
        let d = &self.datagen;
        DatagenConfig {
            n_seeds: d.n_seeds,
            k_pairs: d.k_pairs,
            n_next_samples: d.n_next_samples,
            gamma: self.loss.gamma,
            t_steps: d.t_steps,
            min_margin: self.loss.min_margin,
            base_seed: d.base_seed,
            temperature: d.temperature,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss: self.loss,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            m_iterations: t.m_iterations,
            batch: t.batch,
            seed: t.seed,
            ref_mode: t.ref_mode,
        }
    }
}

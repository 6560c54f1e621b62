//! Experiment configuration: a TOML document mirroring `TrainConfig` plus the
//! scenario, strategy, seed list and output directory.
//!
//! ```toml
//! strategy = "md"              # required: naive | cumulative | replay | ld | md
//! seeds = [0, 1, 2, 3, 4]
//! output_dir = "results"       # relative to the config file
//!
//! [scenario]
//! task_count = 5
//! [scenario.synthetic]         # default when no [scenario.idx] is given
//! classes = 10
//! per_class = 200
//! feature_dim = 16
//! spread = 0.3
//! seed = 0
//!
//! [train]                      # every TrainConfig field, with its default
//! head_mode = "cascaded_gates"
//! [train.loss]
//! lambda = 0.1
//!
//! [grid]
//! lambdas = [1.0, 0.5, 0.25, 0.1, 0.05, 0.025, 0.01]
//! alphas = [0.1, 0.25, 0.5, 0.75, 1.0]
//!
//! [overhead]                   # defaults: flat samples, memory_capacity of them
//! samples = 500
//! geometry = { image = { channels = 3, height = 32, width = 32 } }
//! ```

use std::path::{Path, PathBuf};

use contistream_core::metrics::SampleGeometry;
use contistream_core::scenario::{generate_synthetic, load_idx, SplitDataset, SyntheticSpec};
use contistream_core::strategies::{Strategy, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Environment variable that replaces the seed list with a single seed.
pub const SEED_ENV: &str = "CONTISTREAM_SEED";

pub const DEFAULT_LAMBDAS: [f64; 7] = [1.0, 0.5, 0.25, 0.1, 0.05, 0.025, 0.01];
pub const DEFAULT_ALPHAS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

/// Problems with the configuration or command-line input. These exit with
/// status 2 and are raised before anything is written.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub overhead: OverheadConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub task_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            task_count: 5,
            synthetic: None,
            idx: None,
        }
    }
}

/// The toy scenario: 10 Gaussian classes in 16 dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub feature_dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 200,
            feature_dim: 16,
            spread: 0.3,
            seed: 0,
        }
    }
}

impl From<SyntheticConfig> for SyntheticSpec {
    fn from(c: SyntheticConfig) -> Self {
        SyntheticSpec {
            classes: c.classes,
            per_class: c.per_class,
            feature_dim: c.feature_dim,
            spread: c.spread,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            alphas: DEFAULT_ALPHAS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverheadConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geometry: Option<SampleGeometry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
}

/// A parsed, validated configuration with paths resolved against the file.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub path: String,
    source: String,
    pub config: ExperimentConfig,
}

/// 1-based line of the first `key = ...` or `[key...` line.
fn line_of(source: &str, key: &str) -> usize {
    source
        .lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key).is_some_and(|rest| {
                rest.trim_start().starts_with('=') || rest.starts_with(']') || rest.starts_with('.')
            }) || l
                .strip_prefix('[')
                .is_some_and(|rest| rest.starts_with(key))
        })
        .map_or(1, |i| i + 1)
}

pub fn parse_seed_list(text: &str) -> Result<Vec<u64>, ConfigError> {
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ConfigError::Usage(format!("bad seed list {text:?}: {e}")))?;
    if seeds.is_empty() {
        return Err(ConfigError::Usage("empty seed list".into()));
    }
    Ok(seeds)
}

impl Loaded {
    pub fn from_file(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_str(&source, &path.display().to_string(), base, overrides)
    }

    /// Parses `source`; relative paths inside it are taken from `base`.
    pub fn from_str(
        source: &str,
        path: &str,
        base: &Path,
        overrides: &Overrides,
    ) -> Result<Self, ConfigError> {
        let mut config: ExperimentConfig =
            toml::from_str(source).map_err(|e| ConfigError::Parse {
                path: path.to_string(),
                message: e.to_string().trim_end().to_string(),
            })?;
        let mut loaded = Self {
            path: path.to_string(),
            source: source.to_string(),
            config: config.clone(),
        };

        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse::<u64>()
                .map_err(|e| ConfigError::Usage(format!("{SEED_ENV}={v:?}: {e}")))?;
            config.seeds = vec![seed];
        }
        if let Some(seeds) = &overrides.seeds {
            config.seeds = seeds.clone();
        }
        match &overrides.out {
            Some(out) => config.output_dir = out.clone(),
            None if config.output_dir.is_relative() => {
                config.output_dir = base.join(&config.output_dir)
            }
            None => {}
        }
        if let Some(idx) = &mut config.scenario.idx {
            for p in [
                &mut idx.train_images,
                &mut idx.train_labels,
                &mut idx.test_images,
                &mut idx.test_labels,
            ] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if config.scenario.idx.is_none() && config.scenario.synthetic.is_none() {
            config.scenario.synthetic = Some(SyntheticConfig::default());
        }
        loaded.config = config;
        loaded.validate()?;
        Ok(loaded)
    }

    fn invalid(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            path: self.path.clone(),
            line: line_of(&self.source, key),
            message: message.into(),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        if c.seeds.is_empty() {
            return Err(self.invalid("seeds", "seed list is empty"));
        }
        if c.scenario.idx.is_some() && c.scenario.synthetic.is_some() {
            return Err(self.invalid(
                "scenario",
                "give either [scenario.synthetic] or [scenario.idx], not both",
            ));
        }
        if c.scenario.task_count == 0 {
            return Err(self.invalid("task_count", "task_count must be at least 1"));
        }
        if let Some(s) = c.scenario.synthetic {
            if s.classes % c.scenario.task_count != 0 {
                return Err(self.invalid(
                    "task_count",
                    format!(
                        "{} classes cannot be split into {} equal tasks",
                        s.classes, c.scenario.task_count
                    ),
                ));
            }
        }
        c.train.validate().map_err(|e| {
            let key = match e.to_string() {
                m if m.contains("lambda") => "lambda",
                m if m.contains("alpha") => "alpha",
                m if m.contains("learning") => "learning_rate",
                m if m.contains("momentum") => "momentum",
                m if m.contains("batch") => "batch_size",
                m if m.contains("epoch") => "epochs",
                m if m.contains("embedding") => "embedding_dim",
                m if m.contains("gamma") => "gate",
                _ => "train",
            };
            self.invalid(key, e.to_string())
        })?;
        if c.strategy.uses_memory() && c.train.memory_capacity == 0 {
            return Err(self.invalid("memory_capacity", format!("{} needs a memory", c.strategy)));
        }
        for (key, values) in [("lambdas", &c.grid.lambdas), ("alphas", &c.grid.alphas)] {
            if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(self.invalid(key, format!("grid value {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Builds the dataset the scenario section describes. Problems here stem
    /// from the configuration, so they are reported as config errors.
    pub fn dataset(&self) -> Result<SplitDataset, ConfigError> {
        let sc = &self.config.scenario;
        let data = match (&sc.synthetic, &sc.idx) {
            (Some(s), _) => generate_synthetic(&(*s).into())
                .map_err(|e| self.invalid("synthetic", e.to_string()))?,
            (None, Some(idx)) => {
                let train = load_idx(&idx.train_images, &idx.train_labels)
                    .map_err(|e| self.invalid("train_images", e.to_string()))?;
                let test = load_idx(&idx.test_images, &idx.test_labels)
                    .map_err(|e| self.invalid("test_images", e.to_string()))?;
                SplitDataset::new(train, test).map_err(|e| self.invalid("idx", e.to_string()))?
            }
            (None, None) => unreachable!("resolved in from_str"),
        };
        if data.train.class_count() % sc.task_count != 0 {
            return Err(self.invalid(
                "task_count",
                format!(
                    "{} classes cannot be split into {} equal tasks",
                    data.train.class_count(),
                    sc.task_count
                ),
            ));
        }
        Ok(data)
    }

    /// The resolved configuration, as written next to the outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.config).expect("config serializes")
    }
}

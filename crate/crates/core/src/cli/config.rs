//! Layered command-line configuration: flag > environment > file > default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{ExecutionTarget, HpcConfig, VizToolchain};
use crate::llm::provider::{API_BASE_ENV, API_KEY_ENV};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path} is invalid: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    #[default]
    Real,
    Fake,
}

/// Where query and record embeddings come from. Both sides of a search
/// must use the same source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    #[default]
    Hash,
    Provider,
}

/// The `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_iterations: Option<u32>,
    pub reviewer: Option<bool>,
    pub file_dependency: Option<bool>,
    pub target: Option<ExecutionTarget>,
    pub executor: Option<ExecutorKind>,
    pub embeddings: Option<EmbeddingSource>,
    pub api_base: Option<String>,
    pub api_key: Option<String>,
    pub kb: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub hpc: Option<HpcConfig>,
    /// Scheduler polling period.
    pub poll_interval_ms: Option<u64>,
    /// Concurrent jobs of the tool server.
    pub workers: Option<usize>,
    pub toolchain: ToolchainPaths,
}

/// Interpreters for generated scripts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolchainPaths {
    pub python: Option<String>,
    pub visualization: Option<VizToolchain>,
    pub visualization_interpreter: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Parses config text that did not come from a file.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })
    }
}

/// Values given on the command line; `None` or `false` means not given.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlagConfig {
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_iterations: Option<u32>,
    pub no_reviewer: bool,
    pub no_file_dependency: bool,
    pub target: Option<ExecutionTarget>,
    pub executor: Option<ExecutorKind>,
    pub embeddings: Option<EmbeddingSource>,
    pub kb: Option<PathBuf>,
    pub fixtures: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

/// The merged view every subcommand works from.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub model: String,
    pub temperature: f64,
    pub max_iterations: u32,
    pub enable_reviewer: bool,
    pub enable_file_dependency: bool,
    pub target: ExecutionTarget,
    pub executor: ExecutorKind,
    pub embeddings: EmbeddingSource,
    pub api_base: Option<String>,
    pub api_key: Option<String>,
    pub kb: PathBuf,
    pub fixtures: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub hpc: HpcConfig,
    pub poll_interval_ms: u64,
    pub workers: usize,
    pub toolchain: ToolchainPaths,
}

pub const DEFAULT_MODEL: &str = "gpt-4o";
pub const DEFAULT_MAX_ITERATIONS: u32 = 10;
pub const DEFAULT_DATA_DIR: &str = "foamflow-data";
pub const DEFAULT_POLL_INTERVAL_MS: u64 = 30_000;
pub const DEFAULT_WORKERS: usize = 4;

impl CliConfig {
    /// Merges the layers. `env` looks up an environment variable.
    pub fn resolve(
        flags: FlagConfig,
        env: &dyn Fn(&str) -> Option<String>,
        file: FileConfig,
    ) -> Result<Self, ConfigError> {
        let non_empty = |name: &str| env(name).filter(|v| !v.trim().is_empty());
        let data_dir = flags
            .data_dir
            .or(file.data_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let config = Self {
            model: flags
                .model
                .or(file.model)
                .unwrap_or_else(|| DEFAULT_MODEL.into()),
            temperature: flags.temperature.or(file.temperature).unwrap_or(0.0),
            max_iterations: flags
                .max_iterations
                .or(file.max_iterations)
                .unwrap_or(DEFAULT_MAX_ITERATIONS),
            enable_reviewer: !flags.no_reviewer && file.reviewer.unwrap_or(true),
            enable_file_dependency: !flags.no_file_dependency
                && file.file_dependency.unwrap_or(true),
            target: flags.target.or(file.target).unwrap_or_default(),
            executor: flags.executor.or(file.executor).unwrap_or_default(),
            embeddings: flags.embeddings.or(file.embeddings).unwrap_or_default(),
            api_base: non_empty(API_BASE_ENV).or(file.api_base),
            api_key: non_empty(API_KEY_ENV).or(file.api_key),
            kb: flags.kb.or(file.kb).unwrap_or_else(|| data_dir.join("kb")),
            fixtures: flags.fixtures.or(file.fixtures),
            data_dir,
            hpc: file.hpc.unwrap_or_default(),
            poll_interval_ms: file.poll_interval_ms.unwrap_or(DEFAULT_POLL_INTERVAL_MS),
            workers: file.workers.unwrap_or(DEFAULT_WORKERS),
            toolchain: file.toolchain,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::Invalid(format!(
                "temperature {} is outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_iterations < 1 {
            return Err(ConfigError::Invalid(
                "max-iterations must be at least 1".into(),
            ));
        }
        if self.workers < 1 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.model.trim().is_empty() {
            return Err(ConfigError::Invalid("model name is empty".into()));
        }
        Ok(())
    }

    /// Key-value summary for the progress log; the key is never shown.
    pub fn summary(&self) -> BTreeMap<&'static str, String> {
        let mut out = BTreeMap::new();
        out.insert("model", self.model.clone());
        out.insert("temperature", self.temperature.to_string());
        out.insert("max_iterations", self.max_iterations.to_string());
        out.insert("reviewer", self.enable_reviewer.to_string());
        out.insert("file_dependency", self.enable_file_dependency.to_string());
        out.insert("target", format!("{:?}", self.target).to_lowercase());
        out.insert("executor", format!("{:?}", self.executor).to_lowercase());
        out.insert(
            "backend",
            match &self.fixtures {
                Some(dir) => format!("fixtures {}", dir.display()),
                None => self.api_base.clone().unwrap_or_else(|| "unset".into()),
            },
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env_of(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: BTreeMap<String, String> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults_apply_without_any_layer() {
        let c =
            CliConfig::resolve(FlagConfig::default(), &env_of(&[]), FileConfig::default()).unwrap();
        assert_eq!(c.model, DEFAULT_MODEL);
        assert_eq!(c.max_iterations, DEFAULT_MAX_ITERATIONS);
        assert!(c.enable_reviewer && c.enable_file_dependency);
        assert_eq!(c.kb, PathBuf::from(DEFAULT_DATA_DIR).join("kb"));
        assert_eq!(c.api_base, None);
    }

    #[test]
    fn flag_beats_env_beats_file() {
        let file: FileConfig = toml::from_str(
            "model = \"file-model\"\nmax_iterations = 4\napi_base = \"http://file\"\napi_key = \"file-key\"\nreviewer = true\n",
        )
        .unwrap();
        let env = env_of(&[(API_BASE_ENV, "http://env")]);
        let flags = FlagConfig {
            model: Some("flag-model".into()),
            no_reviewer: true,
            ..FlagConfig::default()
        };
        let c = CliConfig::resolve(flags, &env, file).unwrap();
        assert_eq!(c.model, "flag-model");
        assert_eq!(c.max_iterations, 4);
        assert_eq!(c.api_base.as_deref(), Some("http://env"));
        assert_eq!(c.api_key.as_deref(), Some("file-key"));
        assert!(!c.enable_reviewer);
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let flags = FlagConfig {
            temperature: Some(3.0),
            ..FlagConfig::default()
        };
        assert!(CliConfig::resolve(flags, &env_of(&[]), FileConfig::default()).is_err());
        let flags = FlagConfig {
            max_iterations: Some(0),
            ..FlagConfig::default()
        };
        assert!(CliConfig::resolve(flags, &env_of(&[]), FileConfig::default()).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("modle = \"x\"").is_err());
        let file: FileConfig = toml::from_str("[hpc]\naccount = \"abc\"\nntasks = 32\n").unwrap();
        assert_eq!(file.hpc.unwrap().ntasks, 32);
    }
}

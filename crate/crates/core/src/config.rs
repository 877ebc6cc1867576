//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::ClientConfig;
use crate::dataset::PromptScaffold;
use crate::dpo::DpoConfig;
use crate::eval::PromptStyle;
use crate::sampler::{Task, MAX_HOPS};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    Llm,
    #[default]
    Fallback,
}

impl std::str::FromStr for GenMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "llm" => Ok(Self::Llm),
            "fallback" => Ok(Self::Fallback),
            other => Err(ConfigError::Invalid(format!("unknown mode `{other}`"))),
        }
    }
}

/// What the offline client answers with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockReplay {
    #[default]
    Faithful,
    Stubborn,
    /// Prompt-hash text unrelated to either answer.
    Hashed,
}

impl std::str::FromStr for MockReplay {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "faithful" => Ok(Self::Faithful),
            "stubborn" => Ok(Self::Stubborn),
            "hashed" => Ok(Self::Hashed),
            other => Err(ConfigError::Invalid(format!("unknown mock replay `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphPaths {
    pub entities: PathBuf,
    pub relations: PathBuf,
    pub triples: PathBuf,
}

impl GraphPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            entities: dir.join("entities.tsv"),
            relations: dir.join("relations.tsv"),
            triples: dir.join("triples.tsv"),
        }
    }

    pub fn all(&self) -> [&Path; 3] {
        [&self.entities, &self.relations, &self.triples]
    }
}

pub fn bundled_sample_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("sample")
}

impl Default for GraphPaths {
    fn default() -> Self {
        Self::in_dir(&bundled_sample_dir())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub style: String,
    pub shots: Option<usize>,
    pub strict_only: bool,
    pub max_error_rate: f64,
    pub scaffold: PromptScaffold,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            style: "base".into(),
            shots: None,
            strict_only: true,
            max_error_rate: 0.02,
            scaffold: PromptScaffold::default(),
        }
    }
}

impl EvalSettings {
    /// `shots` wins over any count embedded in `style`.
    pub fn prompt_style(&self) -> Result<PromptStyle, ConfigError> {
        let style: PromptStyle = self.style.parse().map_err(ConfigError::Invalid)?;
        match (style, self.shots) {
            (PromptStyle::Ice(_), Some(k)) => PromptStyle::ice(k).map_err(|e| ConfigError::Invalid(e.to_string())),
            (_, Some(_)) => Err(ConfigError::Invalid("shots only apply to the ice style".into())),
            (s, None) => Ok(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub graph: GraphPaths,
    pub task: Task,
    pub count: usize,
    /// Fixed hop count; when absent the per-task policy applies.
    pub hops: Option<usize>,
    pub seed: Option<u64>,
    pub mode: GenMode,
    pub out: PathBuf,
    pub workers: usize,
    /// Use the offline client instead of the HTTP endpoint.
    pub mock: bool,
    pub mock_replay: MockReplay,
    pub client: ClientConfig,
    pub eval: EvalSettings,
    pub dpo: DpoConfig,
    pub top_k: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            graph: GraphPaths::default(),
            task: Task::Qa,
            count: 10,
            hops: None,
            seed: None,
            mode: GenMode::Fallback,
            out: PathBuf::from("out"),
            workers: 4,
            mock: false,
            mock_replay: MockReplay::Faithful,
            client: ClientConfig::default(),
            eval: EvalSettings::default(),
            dpo: DpoConfig::default(),
            top_k: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.count == 0 {
            return bad("count must be positive".into());
        }
        if let Some(h) = self.hops {
            if !(1..=MAX_HOPS).contains(&h) {
                return bad(format!("hops must be in 1..={MAX_HOPS}, got {h}"));
            }
            if h == 1 && self.task != Task::Qa {
                return bad(format!("{} needs at least 2 hops", self.task));
            }
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if self.dpo.beta.is_nan() || self.dpo.beta <= 0.0 {
            return bad(format!("beta must be positive, got {}", self.dpo.beta));
        }
        if self.dpo.learning_rate < 0.0 || !self.dpo.learning_rate.is_finite() {
            return bad(format!("invalid learning rate {}", self.dpo.learning_rate));
        }
        if self.top_k == 0 || self.top_k > self.client.max_top_logprobs {
            return bad(format!(
                "top_k must be in 1..={}, got {}",
                self.client.max_top_logprobs, self.top_k
            ));
        }
        if !(0.0..=1.0).contains(&self.eval.max_error_rate) {
            return bad("max_error_rate must be within 0..=1".into());
        }
        self.eval.prompt_style()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            task = "MR"
            count = 3
            seed = 11
            [dpo]
            beta = 0.5
            [eval]
            style = "ice"
            shots = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.task, Task::Mr);
        assert_eq!(cfg.dpo.beta, 0.5);
        assert_eq!(cfg.dpo.steps, DpoConfig::default().steps);
        assert_eq!(cfg.eval.prompt_style().unwrap(), PromptStyle::Ice(3));
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
        let cfg = RunConfig {
            count: 0,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig {
            task: Task::Mc,
            hops: Some(1),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.eval.style = "ice".into();
        cfg.eval.shots = Some(2);
        assert!(cfg.validate().is_err());
    }
}

//! Pipeline configuration, read from a commented TOML file. Every field has
//! a default so an empty file is a valid config.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::abstractor::DEFAULT_WINDOW;
use crate::evaluator::ScenarioThresholds;
use crate::gateway::{GatewayConfig, Sampling, DEFAULT_TEMPERATURE, DEFAULT_TOP_P};
use crate::graph::{Similarity, DEFAULT_NEIGHBORS};
use crate::orchestrator::{TeacherConfig, DEFAULT_MAX_TOOL_ROUNDS};
use crate::rewards::{DEFAULT_GROUP_SIZE, DEFAULT_RATIO, DEFAULT_RL_TARGET};
use crate::template::{TemplateError, TemplateSet};
use crate::verbalizer::DEFAULT_POOL_LIMIT;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub graph: PathBuf,
    pub cache: PathBuf,
    /// Directory of prompt templates; the built-in set when unset.
    pub templates: Option<PathBuf>,
    pub outputs: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "work/corpus".into(),
            graph: "work/graph.json".into(),
            cache: "work/evidence.jsonl".into(),
            templates: None,
            outputs: "work".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: Option<u32>,
    /// Completions per instance for rollouts.
    pub group_size: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: DEFAULT_TEMPERATURE, top_p: DEFAULT_TOP_P, max_tokens: None, group_size: DEFAULT_GROUP_SIZE }
    }
}

impl SamplingConfig {
    pub fn sampling(&self, seed: Option<u64>) -> Sampling {
        Sampling { temperature: self.temperature, top_p: self.top_p, max_tokens: self.max_tokens, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    pub k_items: usize,
    pub k_users: usize,
    pub pool_limit: usize,
    /// Neighbor ordering: `count` (co-occurrence) or `jaccard`.
    pub similarity: Similarity,
    pub max_tool_rounds: usize,
    /// Let the ranker call tools too.
    pub rank_tools: bool,
}

impl Default for ToolConfig {
    fn default() -> Self {
        Self {
            k_items: DEFAULT_NEIGHBORS,
            k_users: DEFAULT_NEIGHBORS,
            pool_limit: DEFAULT_POOL_LIMIT,
            similarity: Similarity::Count,
            max_tool_rounds: DEFAULT_MAX_TOOL_ROUNDS,
            rank_tools: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub target_total: usize,
    /// Easy, medium, hard.
    pub ratio: [u32; 3],
}

impl Default for RlConfig {
    fn default() -> Self {
        Self { target_total: DEFAULT_RL_TARGET, ratio: DEFAULT_RATIO }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub parallel: usize,
    /// Substituted for `{dataset}` in the prompts.
    pub dataset: String,
    /// Abstraction window m.
    pub window: usize,
    pub paths: Paths,
    pub gateway: GatewayConfig,
    pub sampling: SamplingConfig,
    pub tools: ToolConfig,
    pub rl: RlConfig,
    pub scenarios: ScenarioThresholds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            parallel: 4,
            dataset: "Goodreads".into(),
            window: DEFAULT_WINDOW,
            paths: Paths::default(),
            gateway: GatewayConfig::default(),
            sampling: SamplingConfig::default(),
            tools: ToolConfig::default(),
            rl: RlConfig::default(),
            scenarios: ScenarioThresholds::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut config = Self::from_toml(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })?;
        if let Some(base) = path.parent() {
            config.paths.rebase(base);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        let s = &self.sampling;
        if !(0.0..=2.0).contains(&s.temperature) {
            return bad("sampling.temperature must be in [0, 2]");
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return bad("sampling.top_p must be in (0, 1]");
        }
        if s.group_size == 0 {
            return bad("sampling.group_size must be positive");
        }
        if self.window == 0 {
            return bad("window must be positive");
        }
        if self.parallel == 0 || self.gateway.max_parallel == 0 {
            return bad("parallel and gateway.max_parallel must be positive");
        }
        if self.tools.k_items == 0 || self.tools.k_users == 0 {
            return bad("tools.k_items and tools.k_users must be positive");
        }
        if self.rl.ratio.iter().all(|&r| r == 0) {
            return bad("rl.ratio must not be all zero");
        }
        if let Some(dir) = &self.paths.templates {
            TemplateSet::from_dir(dir)?;
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<TemplateSet, ConfigError> {
        let set = match &self.paths.templates {
            Some(dir) => TemplateSet::from_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        Ok(set.with_dataset(self.dataset.clone()))
    }

    pub fn window(&self) -> NonZeroUsize {
        NonZeroUsize::new(self.window).unwrap_or(NonZeroUsize::MIN)
    }

    pub fn teacher(&self) -> TeacherConfig {
        TeacherConfig {
            max_tool_rounds: self.tools.max_tool_rounds,
            rank_tools: self.tools.rank_tools,
            sampling: self.sampling.sampling(None),
            window: self.window(),
        }
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.corpus, &mut self.graph, &mut self.cache, &mut self.outputs] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(t) = &mut self.templates {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
    }
}

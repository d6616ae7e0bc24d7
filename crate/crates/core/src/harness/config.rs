//! Run configuration, read from a TOML file and overridden by CLI flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::synth::SynthSpec;
use crate::consensus::DEFAULT_TAU_C;
use crate::crs::{ScoreOptions, DEFAULT_BUDGET_CAP, DEFAULT_K};
use crate::execution::SandboxConfig;
use crate::metrics::Method;
use crate::proposal::gateway::GatewayConfig;
use crate::proposal::prompts::{PromptPaths, PromptVariant};
use crate::repair::MinimalityMetric;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerKind {
    /// Model proposals through the gateway.
    #[default]
    Gateway,
    /// Offline numeric mutations, seeded with fault-record hints when known.
    Mutator,
}

/// How far the pipeline goes for the scoring method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Responsibility scores only.
    Score,
    /// Scores, repair selection, consensus gate and pair export.
    #[default]
    Repair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    /// Directory of trace documents; mutually exclusive with `synthetic`.
    pub corpus: Option<PathBuf>,
    pub synthetic: Option<SynthSpec>,
    pub benchmark: String,
    pub methods: Vec<Method>,
    pub stage: Stage,
    pub proposer: ProposerKind,
    pub k: usize,
    pub early_break: bool,
    pub stop_after_first_causal_step: bool,
    pub budget_cap: Option<usize>,
    pub metric: MinimalityMetric,
    pub prompt_variant: PromptVariant,
    pub tau_c: f64,
    /// Run the consensus gate for deterministic verifiers too.
    pub force_consensus: bool,
    /// Refinement cap for the self-refine baseline; per-task default if unset.
    pub max_iters: Option<usize>,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub seed: u64,
    /// Directory of canned replies used instead of the network.
    pub stub_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            corpus: None,
            synthetic: None,
            benchmark: "corpus".into(),
            methods: vec![Method::CrsRepair],
            stage: Stage::Repair,
            proposer: ProposerKind::Gateway,
            k: DEFAULT_K,
            early_break: true,
            stop_after_first_causal_step: false,
            budget_cap: Some(DEFAULT_BUDGET_CAP),
            metric: MinimalityMetric::Lexical,
            prompt_variant: PromptVariant::WithGold,
            tau_c: DEFAULT_TAU_C,
            force_consensus: false,
            max_iters: None,
            output_dir: PathBuf::from("run"),
            workers: 4,
            seed: 0,
            stub_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub gateway: GatewayConfig,
    pub sandbox: SandboxConfig,
    pub prompts: PromptPaths,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source: Box::new(source),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.run;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        match (&r.corpus, &r.synthetic) {
            (None, None) => return bad("set either run.corpus or run.synthetic"),
            (Some(_), Some(_)) => {
                return bad("run.corpus and run.synthetic are mutually exclusive")
            }
            _ => {}
        }
        if r.k == 0 {
            return bad("k must be at least 1");
        }
        if r.workers == 0 {
            return bad("workers must be at least 1");
        }
        if r.methods.is_empty() {
            return bad("no methods selected");
        }
        if !(0.0..=1.0).contains(&r.tau_c) {
            return bad("tau_c must be in [0, 1]");
        }
        if r.max_iters == Some(0) {
            return bad("max_iters must be at least 1");
        }
        if let Some(s) = &r.synthetic {
            s.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.gateway
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn score_options(&self) -> ScoreOptions {
        ScoreOptions {
            k: self.run.k,
            early_break: self.run.early_break,
            stop_after_first_causal_step: self.run.stop_after_first_causal_step,
            budget_cap: self.run.budget_cap,
        }
    }
}

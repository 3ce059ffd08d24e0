//! Run configuration: one TOML file covering the model, both training
//! stages, evaluation and analysis. Unknown keys are rejected with the
//! path of the offending field.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::PromptTemplate;
use crate::error::{Error, Result};
use crate::eval::{JudgeConfig, MetricSelection};
use crate::model::ModelConfig;
use crate::train::StageConfig;

/// Deserializes TOML, reporting failures with the dotted path of the field.
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text)
        .map_err(|e| Error::Config { field: "<file>".into(), message: e.to_string() })?;
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config { field: e.path().to_string(), message: e.inner().message().to_string() })
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Comma-separated subset of `bleu4,cider,meteor,conclusion`.
    pub metrics: String,
    pub bleu_smoothing: bool,
    pub max_new_tokens: usize,
    /// Used only when `eval --judge` is given.
    pub judges: Vec<JudgeConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { metrics: "bleu4,cider,meteor".into(), bleu_smoothing: false, max_new_tokens: 32, judges: Vec::new() }
    }
}

impl EvalConfig {
    pub fn selection(&self) -> Result<MetricSelection> {
        let mut s = MetricSelection::parse(&self.metrics)
            .map_err(|e| Error::Config { field: "eval.metrics".into(), message: e.to_string() })?;
        s.bleu_smoothing = self.bleu_smoothing;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Number of token pathways to extract.
    pub pathways: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { pathways: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub template: PromptTemplate,
    /// `vocab_size` is replaced by the size of the vocabulary built from
    /// the training data.
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            template: PromptTemplate::default(),
            model: ModelConfig::default(),
            stage1: StageConfig::stage1_default(),
            stage2: StageConfig::stage2_default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig = parse_toml(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        self.eval.selection()?;
        if self.analysis.pathways == 0 {
            return Err(Error::Config { field: "analysis.pathways".into(), message: "must be at least 1".into() });
        }
        Ok(())
    }
}

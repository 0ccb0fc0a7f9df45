//! The run-config file: one JSON document with a section per stage.
//! Every field is optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisConfig;
use crate::corpus::{Task, TaskParams, Tokenization};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::sampler::DecodeConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub task: Task,
    pub train_count: usize,
    pub eval_count: usize,
    pub params: TaskParams,
    pub tokenization: Tokenization,
    /// Read examples from this file instead of generating them.
    pub path: Option<PathBuf>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            task: Task::AdditionCot,
            train_count: 2000,
            eval_count: 200,
            params: TaskParams::default(),
            tokenization: Tokenization::Char,
            path: None,
        }
    }
}

/// Model shape; the vocabulary size comes from the vocabulary file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1);
        ModelSection {
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_layers: d.n_layers,
            max_seq_len: d.max_seq_len,
            dropout_rate: d.dropout_rate,
        }
    }
}

impl ModelSection {
    pub fn with_vocab(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            max_seq_len: self.max_seq_len,
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k_list: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k_list: vec![1],
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalSection,
    pub analysis: AnalysisConfig,
}

impl RunConfigFile {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.train_count == 0 {
            return Err(Error::Config("corpus.train_count must be positive".into()));
        }
        self.model.with_vocab(1).validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.analysis.validate()?;
        if self.eval.k_list.is_empty() || self.eval.k_list.contains(&0) || self.eval.batch_size == 0 {
            return Err(Error::Config("eval.k_list needs positive entries and eval.batch_size must be positive".into()));
        }
        Ok(())
    }
}

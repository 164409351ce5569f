//! Run configuration: one JSON document, with flags overriding single keys.
//!
//! Defaults are desk-scale so the whole pipeline composes out of the box on
//! a synthetic corpus. Full-data settings (100k main steps, batch 128,
//! 32 mined negatives) come from `TrainConfig::main_phase` /
//! `LossConfig::default` and can be set here explicitly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::TaskMode;
use crate::losses::LossConfig;
use crate::model::EmbeddingConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub word_vectors: Option<PathBuf>,
    pub d_embed: usize,
    pub embedding: EmbeddingConfig,
    pub loss: LossConfig,
    pub main_steps: usize,
    pub main_lr: f64,
    pub knowledge_steps: usize,
    pub knowledge_lr: f64,
    pub eval_every: usize,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub eval_mode: TaskMode,
    pub candidate_pool: usize,
    pub workers: usize,
    pub knn_top: usize,
    pub distance_pools: Vec<usize>,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            corpus: None,
            word_vectors: None,
            d_embed: 200,
            embedding: EmbeddingConfig::default(),
            loss: LossConfig {
                batch_size: 32,
                kprime: 8,
                ..LossConfig::default()
            },
            main_steps: 2_000,
            main_lr: 2.0,
            knowledge_steps: 500,
            knowledge_lr: 0.01,
            eval_every: 200,
            classifier_epochs: 30,
            classifier_lr: 2.0,
            eval_mode: TaskMode::Standard,
            candidate_pool: 50,
            workers: 1,
            knn_top: 10,
            distance_pools: vec![10, 50, 200],
            synthetic: SyntheticSpec::default_with_seed(42),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let config: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                Ok(config)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.embedding.validate()?;
        self.loss.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".to_string()));
        }
        if self.candidate_pool < 4 {
            return Err(Error::Config("candidate pool must be at least 4".to_string()));
        }
        Ok(())
    }

    pub fn require_corpus(&self) -> Result<&PathBuf> {
        self.corpus
            .as_ref()
            .ok_or_else(|| Error::Config("no corpus path given (config key 'corpus' or --corpus)".to_string()))
    }
}

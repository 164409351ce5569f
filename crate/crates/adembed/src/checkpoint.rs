//! Versioned checkpoint files.
//!
//! Tensor payloads are base64-encoded little-endian f64 with explicit
//! shapes, so a load reproduces every parameter bit-exactly. The embedded
//! config snapshot guards against evaluating a checkpoint under a different
//! knowledge-branch mode than it was trained with.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numgrad::{AdagradState, AdamState, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{EmbeddingConfig, KbMode, ModelDims, ModelParams};
use crate::trainer::OptimizerState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

pub fn encode_tensor(t: &Tensor) -> EncodedTensor {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    EncodedTensor {
        shape: t.shape().to_vec(),
        data: B64.encode(bytes),
    }
}

pub fn decode_tensor(e: &EncodedTensor) -> Result<Tensor> {
    let bytes = B64
        .decode(&e.data)
        .map_err(|err| Error::Checkpoint(format!("invalid tensor payload: {err}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensor payload length not a multiple of 8".to_string()));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::from_vec(e.shape.clone(), data)
        .map_err(|err| Error::Checkpoint(format!("tensor shape mismatch: {err}")))
}

fn encode_map(map: &BTreeMap<String, Tensor>) -> BTreeMap<String, EncodedTensor> {
    map.iter().map(|(k, v)| (k.clone(), encode_tensor(v))).collect()
}

fn decode_map(map: &BTreeMap<String, EncodedTensor>) -> Result<BTreeMap<String, Tensor>> {
    map.iter()
        .map(|(k, v)| Ok((k.clone(), decode_tensor(v)?)))
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncodedOptimizer {
    None,
    Adagrad {
        lr: f64,
        eps: f64,
        accum: BTreeMap<String, EncodedTensor>,
    },
    Adam {
        lr: f64,
        eps: f64,
        beta1: f64,
        beta2: f64,
        step: u64,
        m: BTreeMap<String, EncodedTensor>,
        v: BTreeMap<String, EncodedTensor>,
    },
}

impl EncodedOptimizer {
    pub fn from_state(state: Option<&OptimizerState>) -> Self {
        match state {
            None => EncodedOptimizer::None,
            Some(OptimizerState::Adagrad(s)) => EncodedOptimizer::Adagrad {
                lr: s.lr,
                eps: s.eps,
                accum: encode_map(&s.accum),
            },
            Some(OptimizerState::Adam(s)) => EncodedOptimizer::Adam {
                lr: s.lr,
                eps: s.eps,
                beta1: s.beta1,
                beta2: s.beta2,
                step: s.step,
                m: encode_map(&s.m),
                v: encode_map(&s.v),
            },
        }
    }

    pub fn into_state(&self) -> Result<Option<OptimizerState>> {
        Ok(match self {
            EncodedOptimizer::None => None,
            EncodedOptimizer::Adagrad { lr, eps, accum } => {
                Some(OptimizerState::Adagrad(AdagradState {
                    lr: *lr,
                    eps: *eps,
                    accum: decode_map(accum)?,
                }))
            }
            EncodedOptimizer::Adam {
                lr,
                eps,
                beta1,
                beta2,
                step,
                m,
                v,
            } => Some(OptimizerState::Adam(AdamState {
                lr: *lr,
                eps: *eps,
                beta1: *beta1,
                beta2: *beta2,
                step: *step,
                m: decode_map(m)?,
                v: decode_map(v)?,
            })),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncodedRng {
    pub seed: String,
    pub stream: u64,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl EncodedRng {
    pub fn from_rng(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        EncodedRng {
            seed: B64.encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos_lo: pos as u64,
            word_pos_hi: (pos >> 64) as u64,
        }
    }

    pub fn into_rng(&self) -> Result<ChaCha8Rng> {
        let bytes = B64
            .decode(&self.seed)
            .map_err(|e| Error::Checkpoint(format!("invalid rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".to_string()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        Ok(rng)
    }
}

/// Pipeline stage a checkpoint was written by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Main,
    Classifier,
    Kb,
    Knowledge,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub dims: ModelDims,
    pub embedding: EmbeddingConfig,
    pub loss: LossConfig,
    pub stage: Stage,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: CheckpointConfig,
    pub step: u64,
    pub params: BTreeMap<String, EncodedTensor>,
    pub rule_words: Option<Vec<Vec<usize>>>,
    pub optimizer: EncodedOptimizer,
    pub rng: EncodedRng,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        params: &ModelParams,
        embedding: &EmbeddingConfig,
        loss: &LossConfig,
        stage: Stage,
        seed: u64,
        step: u64,
        optimizer: Option<&OptimizerState>,
        rng: &ChaCha8Rng,
    ) -> Checkpoint {
        let tensors = params
            .store
            .iter()
            .map(|(k, v)| (k.clone(), encode_tensor(v)))
            .collect();
        Checkpoint {
            version: FORMAT_VERSION,
            config: CheckpointConfig {
                dims: params.dims,
                embedding: embedding.clone(),
                loss: loss.clone(),
                stage,
                seed,
            },
            step,
            params: tensors,
            rule_words: params.rule_words.clone(),
            optimizer: EncodedOptimizer::from_state(optimizer),
            rng: EncodedRng::from_rng(rng),
        }
    }

    pub fn into_params(&self) -> Result<ModelParams> {
        let mut store = ParamStore::new();
        for (name, enc) in &self.params {
            store.insert(name, decode_tensor(enc)?);
        }
        Ok(ModelParams {
            store,
            dims: self.config.dims,
            rule_words: self.rule_words.clone(),
        })
    }

    /// Reject use under a knowledge-branch mode other than the stored one.
    pub fn ensure_kb_mode(&self, requested: KbMode) -> Result<()> {
        if self.config.embedding.kb_mode != requested {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with kb mode {:?}, requested {:?}",
                self.config.embedding.kb_mode, requested
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string(checkpoint)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if checkpoint.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            checkpoint.version
        )));
    }
    Ok(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let t = Tensor::vector(&[0.1 + 0.2, -1.0 / 3.0, f64::MIN_POSITIVE, 1e300]);
        let back = decode_tensor(&encode_tensor(&t)).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rng_state_roundtrip_continues_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        rng.set_stream(9);
        let _: u64 = rng.gen();
        let encoded = EncodedRng::from_rng(&rng);
        let mut restored = encoded.into_rng().unwrap();
        assert_eq!(rng.gen::<u64>(), restored.gen::<u64>());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(&path, "{\"version\": 1, \"conf").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}

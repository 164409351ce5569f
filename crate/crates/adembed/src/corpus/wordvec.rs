//! Pretrained word-vector loading and embedding-table initialization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use numgrad::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::rng::{rng_for, uniform_init, Stream};

/// Token -> vector map parsed from a GloVe-style text file: one token per
/// line followed by whitespace-separated decimal floats.
#[derive(Clone, Debug)]
pub struct WordVectorTable {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

pub fn parse_word_vectors(path: impl AsRef<Path>) -> Result<WordVectorTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vectors = BTreeMap::new();
    let mut dim = None;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().unwrap().to_lowercase();
        let values: std::result::Result<Vec<f64>, _> =
            parts.map(|p| p.parse::<f64>()).collect();
        let values = values.map_err(|e| Error::Config(format!(
            "word vector for '{token}': {e}"
        )))?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::WordVectorDim {
                    token,
                    expected: d,
                    got: values.len(),
                });
            }
            _ => {}
        }
        vectors.insert(token, values);
    }
    Ok(WordVectorTable {
        dim: dim.unwrap_or(0),
        vectors,
    })
}

/// |vocab| x dim initialization matrix: rows for tokens present in the table
/// are copied verbatim; absent tokens (including the unknown entry) are drawn
/// uniform[-0.08, 0.08] from the seeded fallback stream.
pub fn init_matrix(
    table: Option<&WordVectorTable>,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if let Some(t) = table {
        if t.dim != 0 && t.dim != dim {
            return Err(Error::Config(format!(
                "word vectors have dimension {}, expected {dim}",
                t.dim
            )));
        }
    }
    let mut data = Vec::with_capacity(vocab.len() * dim);
    for token in vocab.tokens() {
        match table.and_then(|t| t.vectors.get(token.as_str())) {
            Some(v) => data.extend_from_slice(v),
            None => data.extend((0..dim).map(|_| uniform_init(rng))),
        }
    }
    Ok(Tensor::matrix(vocab.len(), dim, data)?)
}

/// Parse a word-vector file and build the initialization matrix for a
/// vocabulary in one step.
pub fn load_word_vectors(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
) -> Result<Tensor> {
    let table = parse_word_vectors(path)?;
    let mut rng = rng_for(seed, Stream::WordVectorFallback);
    init_matrix(Some(&table), vocab, dim, &mut rng)
}

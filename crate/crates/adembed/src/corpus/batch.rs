//! Deterministic training batches.
//!
//! An epoch is a seeded shuffle of the train indices followed by contiguous
//! chunks of K; the trailing partial chunk is dropped. One statement per
//! record is sampled for the batch, so row i of the image and text tensors
//! always correspond.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::rng::rng_for_epoch;

#[derive(Clone, Debug)]
pub struct Batch {
    /// Indices into `corpus.records`, all from the train split.
    pub records: Vec<usize>,
    /// For each batch member, which of its statements is the positive.
    pub statement_choice: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One epoch of batches.
pub fn make_batches(corpus: &Corpus, k: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    let train = corpus.split_indices(Split::Train);
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!(
            "batch size {k} out of range for {} train records",
            train.len()
        )));
    }
    let mut rng = rng_for_epoch(seed, epoch);
    let mut order = train;
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(k) {
        if chunk.len() < k {
            break;
        }
        let statement_choice = chunk
            .iter()
            .map(|&idx| {
                let n = corpus.records[idx].statements.len();
                rng.gen_range(0..n)
            })
            .collect();
        batches.push(Batch {
            records: chunk.to_vec(),
            statement_choice,
        });
    }
    Ok(batches)
}

/// Endless stream of batches across epochs, deterministic in (corpus, K, seed).
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    k: usize,
    seed: u64,
    epoch: u64,
    queue: std::vec::IntoIter<Batch>,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a Corpus, k: usize, seed: u64) -> Result<Self> {
        let first = make_batches(corpus, k, seed, 0)?;
        Ok(BatchStream {
            corpus,
            k,
            seed,
            epoch: 0,
            queue: first.into_iter(),
        })
    }
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        loop {
            if let Some(b) = self.queue.next() {
                return Some(b);
            }
            self.epoch += 1;
            let next = make_batches(self.corpus, self.k, self.seed, self.epoch)
                .expect("validated at stream construction");
            self.queue = next.into_iter();
        }
    }
}

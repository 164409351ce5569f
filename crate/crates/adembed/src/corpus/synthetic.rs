//! Seeded synthetic-corpus generator.
//!
//! Each topic gets a fixed random feature prototype; records of that topic
//! get the prototype plus Gaussian noise as their image and region features.
//! Statements mix a few topic-specific words with shared filler words, so
//! topic identity is learnable from text while statements of the same record
//! stay far from identical. Symbols and caption words come from per-topic
//! maps; the output file round-trips through `load_corpus`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AdRecord, Split};
use crate::error::{Error, Result};
use crate::rng::{normal, rng_for, Stream};
use crate::symbols::SYMBOL_NAMES;

pub const REGIONS_PER_RECORD: usize = 10;
pub const STATEMENTS_PER_RECORD: usize = 3;
const TOPIC_TOKENS_PER_STATEMENT: usize = 2;
const FILLER_TOKENS_PER_STATEMENT: usize = 4;
const SLOGANS_PER_RECORD: usize = 2;
const CAPTION_WORDS_PER_TOPIC: usize = 3;
const SYMBOLS_PER_TOPIC: usize = 2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub d_feat: usize,
    /// Scale of the Gaussian noise added to each feature vector.
    pub noise_scale: f64,
    /// Symbol names assigned to records of each topic (index = topic).
    pub symbols_per_topic: Vec<Vec<String>>,
    /// Ranked caption words for each topic (index = topic).
    pub caption_words_per_topic: Vec<Vec<String>>,
    pub statement_vocab_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Desk-scale defaults: 8 topics, 200/50/50 records, 64-dim features.
    pub fn default_with_seed(seed: u64) -> Self {
        let n_topics = 8;
        SyntheticSpec {
            n_topics,
            n_train: 200,
            n_val: 50,
            n_test: 50,
            d_feat: 64,
            noise_scale: 0.4,
            symbols_per_topic: default_symbol_map(n_topics),
            caption_words_per_topic: default_caption_map(n_topics),
            statement_vocab_size: 128,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_topics", self.n_topics),
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("d_feat", self.d_feat),
            ("statement_vocab_size", self.statement_vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("synthetic spec: {name} must be positive")));
            }
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config(
                "synthetic spec: noise_scale must be nonnegative".to_string(),
            ));
        }
        if self.symbols_per_topic.len() != self.n_topics
            || self.caption_words_per_topic.len() != self.n_topics
        {
            return Err(Error::Config(
                "synthetic spec: per-topic maps must have one entry per topic".to_string(),
            ));
        }
        for syms in &self.symbols_per_topic {
            for s in syms {
                if crate::symbols::symbol_index(s).is_none() {
                    return Err(Error::Config(format!(
                        "synthetic spec: '{s}' is not a known symbol"
                    )));
                }
            }
        }
        let topic_pool = self.topic_pool_size();
        if topic_pool < TOPIC_TOKENS_PER_STATEMENT {
            return Err(Error::Config(
                "synthetic spec: statement_vocab_size too small for per-topic word pools"
                    .to_string(),
            ));
        }
        if self.filler_pool_size() < FILLER_TOKENS_PER_STATEMENT {
            return Err(Error::Config(
                "synthetic spec: statement_vocab_size leaves too few filler words".to_string(),
            ));
        }
        Ok(())
    }

    /// Words reserved for each topic: half the vocabulary, split evenly.
    pub fn topic_pool_size(&self) -> usize {
        (self.statement_vocab_size / 2) / self.n_topics
    }

    pub fn filler_pool_size(&self) -> usize {
        self.statement_vocab_size - self.topic_pool_size() * self.n_topics
    }

    pub fn topic_name(&self, t: usize) -> String {
        format!("topic{t}")
    }
}

pub fn default_symbol_map(n_topics: usize) -> Vec<Vec<String>> {
    (0..n_topics)
        .map(|t| {
            (0..SYMBOLS_PER_TOPIC)
                .map(|j| SYMBOL_NAMES[(t * SYMBOLS_PER_TOPIC + j) % SYMBOL_NAMES.len()].to_string())
                .collect()
        })
        .collect()
}

pub fn default_caption_map(n_topics: usize) -> Vec<Vec<String>> {
    (0..n_topics)
        .map(|t| {
            (0..CAPTION_WORDS_PER_TOPIC)
                .map(|j| format!("object{t}x{j}"))
                .collect()
        })
        .collect()
}

/// Ground truth kept next to the generated file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub spec: SyntheticSpec,
    pub topics: Vec<String>,
    pub records_per_topic: Vec<usize>,
}

fn sample_distinct(rng: &mut ChaCha8Rng, pool: &[String], n: usize) -> Vec<String> {
    let mut picks: Vec<&String> = pool.iter().collect();
    picks.shuffle(rng);
    picks.into_iter().take(n).cloned().collect()
}

fn noisy_vector(rng: &mut ChaCha8Rng, prototype: &[f64], scale: f64) -> Vec<f64> {
    prototype.iter().map(|p| p + scale * normal(rng)).collect()
}

/// Generate the full record set plus metadata. Deterministic in the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<AdRecord>, SyntheticMeta)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, Stream::Synthetic);

    let prototypes: Vec<Vec<f64>> = (0..spec.n_topics)
        .map(|_| (0..spec.d_feat).map(|_| normal(&mut rng)).collect())
        .collect();

    let pool = spec.topic_pool_size();
    let topic_words: Vec<Vec<String>> = (0..spec.n_topics)
        .map(|t| (0..pool).map(|j| format!("w{t}x{j}")).collect())
        .collect();
    let filler_words: Vec<String> = (0..spec.filler_pool_size())
        .map(|j| format!("filler{j}"))
        .collect();

    let mut records = Vec::new();
    let mut records_per_topic = vec![0usize; spec.n_topics];
    let splits = [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ];
    let mut serial = 0usize;
    for (split, count) in splits {
        for i in 0..count {
            let topic = i % spec.n_topics;
            records_per_topic[topic] += usize::from(split == Split::Train);
            let statements: Vec<Vec<String>> = (0..STATEMENTS_PER_RECORD)
                .map(|_| {
                    let mut tokens =
                        sample_distinct(&mut rng, &topic_words[topic], TOPIC_TOKENS_PER_STATEMENT);
                    tokens.extend(sample_distinct(
                        &mut rng,
                        &filler_words,
                        FILLER_TOKENS_PER_STATEMENT,
                    ));
                    tokens
                })
                .collect();
            let slogans: Vec<Vec<String>> = (0..SLOGANS_PER_RECORD)
                .map(|_| {
                    let mut tokens = sample_distinct(&mut rng, &topic_words[topic], 1);
                    tokens.extend(sample_distinct(&mut rng, &filler_words, 2));
                    tokens
                })
                .collect();
            let region_features: Vec<Vec<f64>> = (0..REGIONS_PER_RECORD)
                .map(|_| noisy_vector(&mut rng, &prototypes[topic], spec.noise_scale))
                .collect();
            records.push(AdRecord {
                id: format!("ad{serial:05}"),
                split,
                topic: spec.topic_name(topic),
                image_feature: noisy_vector(&mut rng, &prototypes[topic], spec.noise_scale),
                region_features,
                region_count: REGIONS_PER_RECORD,
                statements,
                symbols: spec.symbols_per_topic[topic].clone(),
                caption_words_ranked: spec.caption_words_per_topic[topic].clone(),
                slogans,
            });
            serial += 1;
        }
    }
    let meta = SyntheticMeta {
        spec: spec.clone(),
        topics: (0..spec.n_topics).map(|t| spec.topic_name(t)).collect(),
        records_per_topic,
    };
    // sanity check against the generator's own invariants
    for r in &records {
        debug_assert!(r.image_feature.iter().all(|v| v.is_finite()));
    }
    let _ = rng.gen::<u64>();
    Ok((records, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_corpus, write_corpus, Corpus};
    use std::collections::HashMap;

    #[test]
    fn uniform_topic_histogram() {
        let mut spec = SyntheticSpec::default_with_seed(5);
        spec.n_train = 200;
        let (records, meta) = generate_synthetic(&spec).unwrap();
        assert_eq!(records.len(), 300);
        let mut hist: HashMap<&str, usize> = HashMap::new();
        for r in records.iter().filter(|r| r.split == Split::Train) {
            *hist.entry(r.topic.as_str()).or_default() += 1;
        }
        assert_eq!(hist.len(), 8);
        for (_, count) in hist {
            assert_eq!(count, 25);
        }
        assert_eq!(meta.records_per_topic, vec![25; 8]);
    }

    #[test]
    fn zero_noise_makes_same_topic_features_identical() {
        let mut spec = SyntheticSpec::default_with_seed(5);
        spec.noise_scale = 0.0;
        spec.n_train = 16;
        spec.n_val = 8;
        spec.n_test = 8;
        let (records, _) = generate_synthetic(&spec).unwrap();
        let by_topic: Vec<&AdRecord> = records.iter().filter(|r| r.topic == "topic0").collect();
        assert!(by_topic.len() >= 2);
        for r in &by_topic[1..] {
            assert_eq!(r.image_feature, by_topic[0].image_feature);
            assert_eq!(r.region_features[0], by_topic[0].region_features[0]);
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let spec = SyntheticSpec {
            n_train: 16,
            n_val: 8,
            ..SyntheticSpec::default_with_seed(12)
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        let (r1, _) = generate_synthetic(&spec).unwrap();
        let (r2, _) = generate_synthetic(&spec).unwrap();
        write_corpus(&r1, &p1).unwrap();
        write_corpus(&r2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn roundtrips_through_load_corpus() {
        let mut spec = SyntheticSpec::default_with_seed(3);
        spec.n_train = 16;
        spec.n_val = 8;
        spec.n_test = 8;
        let (records, _) = generate_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&records, &path).unwrap();
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.records.len(), records.len());
        for (a, b) in corpus.records.iter().zip(&records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.statements, b.statements);
            assert_eq!(a.image_feature, b.image_feature);
        }
    }

    #[test]
    fn topic_and_statement_tokens_share_information() {
        // plug-in mutual information between topic and token draws > 0
        let mut spec = SyntheticSpec::default_with_seed(7);
        spec.n_train = 80;
        spec.n_val = 8;
        spec.n_test = 8;
        let (records, _) = generate_synthetic(&spec).unwrap();
        let corpus = Corpus::from_records(records).unwrap();
        let mut joint: HashMap<(String, String), f64> = HashMap::new();
        let mut p_topic: HashMap<String, f64> = HashMap::new();
        let mut p_token: HashMap<String, f64> = HashMap::new();
        let mut total = 0.0;
        for r in corpus.records.iter().filter(|r| r.split == Split::Train) {
            for s in &r.statements {
                for t in s {
                    *joint.entry((r.topic.clone(), t.clone())).or_default() += 1.0;
                    *p_topic.entry(r.topic.clone()).or_default() += 1.0;
                    *p_token.entry(t.clone()).or_default() += 1.0;
                    total += 1.0;
                }
            }
        }
        let mut mi = 0.0;
        for ((topic, token), c) in &joint {
            let pxy = c / total;
            let px = p_topic[topic] / total;
            let py = p_token[token] / total;
            mi += pxy * (pxy / (px * py)).ln();
        }
        assert!(mi > 0.05, "mutual information {mi} too small");
    }
}

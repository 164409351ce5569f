//! Data model, file ingestion, vocabularies, and batching.
//!
//! The corpus file is UTF-8 JSON lines, one record per line. Vocabularies
//! are built from the train split only; unknown tokens in other splits map
//! to index 0. Symbols are not a data-dependent vocabulary: they come from
//! the fixed 53-name list and records may only use those names.

pub mod batch;
pub mod synthetic;
pub mod wordvec;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::symbols::{symbol_index, SYMBOL_NAMES};

pub use batch::{make_batches, Batch, BatchStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One ad: precomputed feature vectors plus its annotations.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdRecord {
    pub id: String,
    pub split: Split,
    pub topic: String,
    pub image_feature: Vec<f64>,
    pub region_features: Vec<Vec<f64>>,
    /// Number of leading rows of `region_features` that are valid; the rest
    /// are padding.
    pub region_count: usize,
    pub statements: Vec<Vec<String>>,
    pub symbols: Vec<String>,
    pub caption_words_ranked: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slogans: Vec<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabDomain {
    Statement,
    Caption,
    Symbol,
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Token/index bijection for one domain. Statement and caption vocabularies
/// reserve index 0 for the unknown token; the symbol vocabulary is the fixed
/// 53-name list with no unknown entry.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    pub domain: VocabDomain,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    has_unknown: bool,
}

impl Vocabulary {
    /// Build from tokens in first-occurrence order, reserving index 0.
    fn from_tokens<'a>(domain: VocabDomain, tokens: impl Iterator<Item = &'a str>) -> Self {
        let mut list = vec![UNKNOWN_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(UNKNOWN_TOKEN.to_string(), 0);
        for token in tokens {
            if !index.contains_key(token) {
                index.insert(token.to_string(), list.len());
                list.push(token.to_string());
            }
        }
        Vocabulary {
            domain,
            tokens: list,
            index,
            has_unknown: true,
        }
    }

    pub fn symbols() -> Self {
        let tokens: Vec<String> = SYMBOL_NAMES.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            domain: VocabDomain::Symbol,
            tokens,
            index,
            has_unknown: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn has_unknown(&self) -> bool {
        self.has_unknown
    }

    /// Index of a token; unknown tokens map to 0 in domains with an unknown
    /// entry and to None otherwise.
    pub fn index_of(&self, token: &str) -> Option<usize> {
        match self.index.get(token) {
            Some(&i) => Some(i),
            None if self.has_unknown => Some(0),
            None => None,
        }
    }

    /// Index of a token only if it is an actual vocabulary entry.
    pub fn known_index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Map a token list to indices (unknowns to 0).
    pub fn indices(&self, tokens: &[String]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.index_of(t).unwrap_or(0))
            .collect()
    }
}

/// A loaded corpus: records in file order plus the train-split vocabularies.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub records: Vec<AdRecord>,
    pub d_feat: usize,
    pub statement_vocab: Vocabulary,
    pub caption_vocab: Vocabulary,
    pub symbol_vocab: Vocabulary,
    /// Distinct train-split topics in first-occurrence order.
    pub train_topics: Vec<String>,
}

impl Corpus {
    pub fn from_records(records: Vec<AdRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            validate_record(r, i + 1)?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateRecordId { id: r.id.clone() });
            }
        }
        let d_feat = records
            .first()
            .map(|r| r.image_feature.len())
            .ok_or_else(|| Error::Config("corpus has no records".to_string()))?;
        for (i, r) in records.iter().enumerate() {
            if r.image_feature.len() != d_feat {
                return Err(Error::CorpusLine {
                    line: i + 1,
                    detail: format!(
                        "image_feature has length {}, expected {d_feat}",
                        r.image_feature.len()
                    ),
                });
            }
            for (j, rf) in r.region_features.iter().enumerate() {
                if rf.len() != d_feat {
                    return Err(Error::CorpusLine {
                        line: i + 1,
                        detail: format!(
                            "region_features[{j}] has length {}, expected {d_feat}",
                            rf.len()
                        ),
                    });
                }
            }
        }

        let train: Vec<&AdRecord> = records
            .iter()
            .filter(|r| r.split == Split::Train)
            .collect();
        let statement_vocab = Vocabulary::from_tokens(
            VocabDomain::Statement,
            train
                .iter()
                .flat_map(|r| r.statements.iter())
                .flat_map(|s| s.iter())
                .map(|t| t.as_str()),
        );
        let caption_vocab = Vocabulary::from_tokens(
            VocabDomain::Caption,
            train
                .iter()
                .flat_map(|r| r.caption_words_ranked.iter())
                .map(|t| t.as_str()),
        );
        let mut train_topics = Vec::new();
        for r in &train {
            if !train_topics.contains(&r.topic) {
                train_topics.push(r.topic.clone());
            }
        }
        Ok(Corpus {
            records,
            d_feat,
            statement_vocab,
            caption_vocab,
            symbol_vocab: Vocabulary::symbols(),
            train_topics,
        })
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn topic_index(&self, topic: &str) -> Option<usize> {
        self.train_topics.iter().position(|t| t == topic)
    }
}

fn validate_record(r: &AdRecord, line: usize) -> Result<()> {
    let fail = |detail: String| Error::CorpusLine { line, detail };
    if r.id.is_empty() {
        return Err(fail("empty id".to_string()));
    }
    if r.split == Split::Train && r.statements.is_empty() {
        return Err(fail(format!("train record '{}' has no statements", r.id)));
    }
    for s in &r.statements {
        if s.is_empty() {
            return Err(fail(format!("record '{}' has an empty statement", r.id)));
        }
    }
    if r.region_count > r.region_features.len() {
        return Err(fail(format!(
            "record '{}': region_count {} exceeds {} region_features",
            r.id,
            r.region_count,
            r.region_features.len()
        )));
    }
    for sym in &r.symbols {
        if symbol_index(sym).is_none() {
            return Err(fail(format!(
                "record '{}': unknown symbol '{sym}'",
                r.id
            )));
        }
    }
    Ok(())
}

/// Lowercase every token field in place.
fn normalize_record(r: &mut AdRecord) {
    for s in &mut r.statements {
        for t in s.iter_mut() {
            *t = t.to_lowercase();
        }
    }
    for s in &mut r.slogans {
        for t in s.iter_mut() {
            *t = t.to_lowercase();
        }
    }
    for t in &mut r.caption_words_ranked {
        *t = t.to_lowercase();
    }
    for t in &mut r.symbols {
        *t = t.to_lowercase();
    }
}

/// Load a JSON-lines corpus file, build the train-split vocabularies, and
/// preserve record order. Blank lines are ignored.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut record: AdRecord =
            serde_json::from_str(line).map_err(|e| Error::CorpusLine {
                line: lineno + 1,
                detail: e.to_string(),
            })?;
        normalize_record(&mut record);
        validate_record(&record, lineno + 1)?;
        records.push(record);
    }
    Corpus::from_records(records)
}

/// Write records as JSON lines.
pub fn write_corpus(records: &[AdRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_record(id: &str, split: Split, statements: Vec<Vec<&str>>) -> AdRecord {
        AdRecord {
            id: id.to_string(),
            split,
            topic: "cars".to_string(),
            image_feature: vec![0.5, -0.5],
            region_features: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            region_count: 2,
            statements: statements
                .into_iter()
                .map(|s| s.into_iter().map(|t| t.to_string()).collect())
                .collect(),
            symbols: vec!["speed".to_string()],
            caption_words_ranked: vec!["car".to_string(), "road".to_string()],
            slogans: Vec::new(),
        }
    }

    #[test]
    fn vocabulary_counts_distinct_train_tokens_plus_unknown() {
        let records = vec![
            tiny_record("a", Split::Train, vec![vec!["buy", "the", "car"]]),
            tiny_record("b", Split::Train, vec![vec!["drive", "the", "fastcar"]]),
        ];
        let corpus = Corpus::from_records(records).unwrap();
        // 5 distinct tokens + unknown
        assert_eq!(corpus.statement_vocab.len(), 6);
        assert_eq!(corpus.statement_vocab.index_of("the"), Some(2));
        assert_eq!(corpus.statement_vocab.index_of("zebra"), Some(0));
    }

    #[test]
    fn train_record_without_statements_rejected() {
        let records = vec![tiny_record("a", Split::Train, vec![])];
        assert!(Corpus::from_records(records).is_err());
    }

    #[test]
    fn test_record_without_statements_allowed() {
        let records = vec![
            tiny_record("a", Split::Train, vec![vec!["x"]]),
            tiny_record("b", Split::Test, vec![]),
        ];
        assert!(Corpus::from_records(records).is_ok());
    }

    #[test]
    fn duplicate_id_rejected() {
        let records = vec![
            tiny_record("a", Split::Train, vec![vec!["x"]]),
            tiny_record("a", Split::Train, vec![vec!["y"]]),
        ];
        assert!(matches!(
            Corpus::from_records(records),
            Err(Error::DuplicateRecordId { .. })
        ));
    }

    #[test]
    fn unknown_symbol_rejected() {
        let mut r = tiny_record("a", Split::Train, vec![vec!["x"]]);
        r.symbols = vec!["notasymbol".to_string()];
        assert!(Corpus::from_records(vec![r]).is_err());
    }

    #[test]
    fn region_count_bounded_by_rows() {
        let mut r = tiny_record("a", Split::Train, vec![vec!["x"]]);
        r.region_count = 3;
        assert!(Corpus::from_records(vec![r]).is_err());
    }

    #[test]
    fn roundtrip_preserves_records_and_vocab() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let records = vec![
            tiny_record("a", Split::Train, vec![vec!["buy", "it"]]),
            tiny_record("b", Split::Val, vec![vec!["skip", "it"]]),
        ];
        write_corpus(&records, &path).unwrap();
        let c1 = load_corpus(&path).unwrap();
        let c2 = load_corpus(&path).unwrap();
        assert_eq!(c1.records.len(), 2);
        assert_eq!(c1.records[0].id, "a");
        assert_eq!(c1.records[1].split, Split::Val);
        assert_eq!(
            c1.statement_vocab.tokens().to_vec(),
            c2.statement_vocab.tokens().to_vec()
        );
        // val tokens are not in the train vocabulary
        assert_eq!(c1.statement_vocab.index_of("skip"), Some(0));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"a\"\n").unwrap();
        match load_corpus(&path) {
            Err(Error::CorpusLine { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected line error, got {other:?}"),
        }
    }
}

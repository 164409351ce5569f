//! Generate a synthetic corpus and inspect what is in it.
//!
//! ```text
//! cargo run --example synthetic_corpus
//! ```

use adembed::corpus::synthetic::{generate_synthetic, SyntheticSpec};
use adembed::corpus::{Corpus, Split};

fn main() -> adembed::Result<()> {
    let spec = SyntheticSpec::default_with_seed(42);
    let (records, meta) = generate_synthetic(&spec)?;
    let corpus = Corpus::from_records(records)?;

    println!(
        "corpus: {} records, d_feat {}, {} topics",
        corpus.records.len(),
        corpus.d_feat,
        meta.topics.len()
    );
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {split}: {} records", corpus.split_indices(split).len());
    }
    println!(
        "vocabularies: {} statement tokens, {} caption tokens, {} symbols",
        corpus.statement_vocab.len(),
        corpus.caption_vocab.len(),
        corpus.symbol_vocab.len()
    );

    let sample = &corpus.records[0];
    println!("\nsample record '{}' (topic {}):", sample.id, sample.topic);
    for s in &sample.statements {
        println!("  statement: {}", s.join(" "));
    }
    println!("  symbols: {}", sample.symbols.join(", "));
    println!("  captions: {}", sample.caption_words_ranked.join(", "));
    println!(
        "  regions: {} x {} features",
        sample.region_count,
        sample.region_features[0].len()
    );
    Ok(())
}

//! k-NN retrieval in the learned space: word-to-word synonyms and
//! word-to-region lookups.
//!
//! ```text
//! cargo run --example word_retrieval
//! ```

use adembed::corpus::synthetic::{default_caption_map, default_symbol_map, generate_synthetic, SyntheticSpec};
use adembed::corpus::{Corpus, Split, VocabDomain};
use adembed::eval::{knn_retrieve, KnnTargets};
use adembed::losses::LossConfig;
use adembed::model::{Embedder, EmbeddingConfig, ModelParams};
use adembed::trainer::{train_main_phase, Phase, TrainConfig};

fn main() -> adembed::Result<()> {
    let mut spec = SyntheticSpec::default_with_seed(23);
    spec.n_topics = 4;
    spec.n_train = 80;
    spec.n_val = 24;
    spec.n_test = 24;
    spec.d_feat = 16;
    spec.statement_vocab_size = 64;
    spec.symbols_per_topic = default_symbol_map(4);
    spec.caption_words_per_topic = default_caption_map(4);
    let (records, _) = generate_synthetic(&spec)?;
    let corpus = Corpus::from_records(records)?;

    let params = ModelParams::init(&corpus, 32, None, 23)?;
    let tcfg = TrainConfig {
        phase: Phase::Main,
        steps: 400,
        lr: 2.0,
        eval_every: 200,
        seed: 23,
    };
    let lcfg = LossConfig {
        kprime: 4,
        batch_size: 16,
        ..LossConfig::default()
    };
    let ecfg = EmbeddingConfig::default();
    let outcome = train_main_phase(&corpus, params, &tcfg, &ecfg, &lcfg)?;
    let embedder = Embedder::new(&outcome.params, &ecfg, &corpus);

    // a topic word from the statement vocabulary
    let query = "w0x0";
    println!("statement words nearest to '{query}':");
    let hits = knn_retrieve(
        &embedder,
        query,
        VocabDomain::Statement,
        KnnTargets::Words(VocabDomain::Statement),
        6,
    )?;
    for hit in &hits {
        println!("  {:12} distance {:.4}", hit.id, hit.distance);
    }

    println!("\nsymbols nearest to '{query}':");
    let hits = knn_retrieve(
        &embedder,
        query,
        VocabDomain::Statement,
        KnnTargets::Words(VocabDomain::Symbol),
        5,
    )?;
    for hit in &hits {
        println!("  {:12} distance {:.4}", hit.id, hit.distance);
    }

    println!("\ntest-split image regions nearest to '{query}':");
    let hits = knn_retrieve(
        &embedder,
        query,
        VocabDomain::Statement,
        KnnTargets::Regions(Split::Test),
        5,
    )?;
    for hit in &hits {
        // the query is a topic-0 word, so topic-0 regions should dominate
        println!("  {:12} distance {:.4}", hit.id, hit.distance);
    }
    Ok(())
}

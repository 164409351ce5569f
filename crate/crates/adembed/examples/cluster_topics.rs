//! Topic clustering quality of the learned image embedding.
//!
//! ```text
//! cargo run --example cluster_topics
//! ```

use adembed::corpus::synthetic::{default_caption_map, default_symbol_map, generate_synthetic, SyntheticSpec};
use adembed::corpus::{Corpus, Split};
use adembed::eval::cluster_homogeneity;
use adembed::losses::LossConfig;
use adembed::model::{Embedder, EmbeddingConfig, ImageMode, ModelParams};
use adembed::trainer::{train_main_phase, Phase, TrainConfig};

fn main() -> adembed::Result<()> {
    let mut spec = SyntheticSpec::default_with_seed(31);
    spec.n_topics = 4;
    spec.n_train = 80;
    spec.n_val = 24;
    spec.n_test = 24;
    spec.d_feat = 16;
    spec.noise_scale = 1.2; // overlap the topics so clustering is nontrivial
    spec.statement_vocab_size = 64;
    spec.symbols_per_topic = default_symbol_map(4);
    spec.caption_words_per_topic = default_caption_map(4);
    let (records, _) = generate_synthetic(&spec)?;
    let corpus = Corpus::from_records(records)?;
    let lcfg = LossConfig {
        kprime: 4,
        batch_size: 16,
        ..LossConfig::default()
    };

    for mode in [ImageMode::Whole, ImageMode::RegionMean, ImageMode::RegionAttention] {
        let ecfg = EmbeddingConfig {
            image_mode: mode,
            ..EmbeddingConfig::default()
        };
        let params = ModelParams::init(&corpus, 32, None, 31)?;
        let tcfg = TrainConfig {
            phase: Phase::Main,
            steps: 300,
            lr: 2.0,
            eval_every: 150,
            seed: 31,
        };
        let outcome = train_main_phase(&corpus, params, &tcfg, &ecfg, &lcfg)?;
        let embedder = Embedder::new(&outcome.params, &ecfg, &corpus);
        let h = cluster_homogeneity(&embedder, Split::Test, None, 31)?;
        println!("{mode:?}: test-split homogeneity {h:.4}");
    }
    Ok(())
}

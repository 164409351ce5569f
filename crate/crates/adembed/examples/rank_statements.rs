//! Rank candidate statements for one test image and show the ordering.
//!
//! ```text
//! cargo run --example rank_statements
//! ```

use adembed::corpus::synthetic::{default_caption_map, default_symbol_map, generate_synthetic, SyntheticSpec};
use adembed::corpus::{Corpus, Split};
use adembed::eval::{assemble_tasks, rank_candidates, TaskMode};
use adembed::losses::LossConfig;
use adembed::model::{Embedder, EmbeddingConfig, ModelParams};
use adembed::trainer::{train_main_phase, Phase, TrainConfig};

fn main() -> adembed::Result<()> {
    let mut spec = SyntheticSpec::default_with_seed(17);
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

    let params = ModelParams::init(&corpus, 32, None, 17)?;
    let tcfg = TrainConfig {
        phase: Phase::Main,
        steps: 400,
        lr: 2.0,
        eval_every: 200,
        seed: 17,
    };
    let lcfg = LossConfig {
        kprime: 4,
        batch_size: 16,
        ..LossConfig::default()
    };
    let ecfg = EmbeddingConfig::default();
    let outcome = train_main_phase(&corpus, params, &tcfg, &ecfg, &lcfg)?;
    let embedder = Embedder::new(&outcome.params, &ecfg, &corpus);

    for mode in [TaskMode::Standard, TaskMode::Hard] {
        let (tasks, _) = assemble_tasks(&corpus, Split::Test, mode, 17, 20);
        let task = &tasks[0];
        let ranking = rank_candidates(&embedder, task)?;
        println!(
            "\n{mode:?} ranking for query '{}' (topic {}, {} candidates):",
            task.query_id,
            task.topic,
            task.candidates.len()
        );
        for (place, &candidate) in ranking.order.iter().take(5).enumerate() {
            let marker = if task.positives.contains(&candidate) {
                "[+]"
            } else {
                "   "
            };
            println!(
                "  {:2}. {marker} {}",
                place + 1,
                task.candidates[candidate].join(" ")
            );
        }
        println!("  positive positions: {:?}", ranking.positions);
    }
    Ok(())
}

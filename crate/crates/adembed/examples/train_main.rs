//! Phase-1 training on a small synthetic corpus, then test-split metrics.
//!
//! ```text
//! cargo run --example train_main
//! ```

use adembed::corpus::synthetic::{default_caption_map, default_symbol_map, generate_synthetic, SyntheticSpec};
use adembed::corpus::{Corpus, Split};
use adembed::eval::{assemble_tasks, compute_metrics, rank_candidates, TaskMode};
use adembed::losses::LossConfig;
use adembed::model::{Embedder, EmbeddingConfig, ModelParams};
use adembed::trainer::{train_main_phase, Phase, TrainConfig};

fn main() -> adembed::Result<()> {
    let mut spec = SyntheticSpec::default_with_seed(42);
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

    let params = ModelParams::init(&corpus, 32, None, 42)?;
    let tcfg = TrainConfig {
        phase: Phase::Main,
        steps: 400,
        lr: 2.0,
        eval_every: 100,
        seed: 42,
    };
    let lcfg = LossConfig {
        kprime: 4,
        batch_size: 16,
        ..LossConfig::default()
    };
    let ecfg = EmbeddingConfig::default();

    println!("training {} steps (K={}, k'={})...", tcfg.steps, lcfg.batch_size, lcfg.kprime);
    let outcome = train_main_phase(&corpus, params, &tcfg, &ecfg, &lcfg)?;
    for row in outcome.history.iter().filter(|r| r.val_recall3.is_some()) {
        println!(
            "  step {:4}  loss {:8.3}  val Recall@3 {:.3}",
            row.step,
            row.loss,
            row.val_recall3.unwrap()
        );
    }
    println!(
        "best validation Recall@3 {:.3} at step {}",
        outcome.best_val_recall3, outcome.best_step
    );

    let embedder = Embedder::new(&outcome.params, &ecfg, &corpus);
    let (tasks, _) = assemble_tasks(&corpus, Split::Test, TaskMode::Standard, 42, 50);
    let outcomes: Vec<_> = tasks
        .iter()
        .map(|t| rank_candidates(&embedder, t))
        .collect::<adembed::Result<_>>()?;
    let report = compute_metrics(&outcomes)?;
    println!(
        "test ({} queries): Rank {:.3} (±{:.3}), Recall@3 {:.3}, Recall@10 {:.3}, \
         RankAvg {:.3}, RankMedian {:.3}",
        report.n_queries,
        report.rank.mean,
        report.rank.stderr,
        report.recall3.mean,
        report.recall10.mean,
        report.rank_avg.mean,
        report.rank_median.mean
    );
    Ok(())
}

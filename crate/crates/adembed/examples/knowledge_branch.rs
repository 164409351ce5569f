//! Full two-phase run: main branch, symbol classifier, object-symbol
//! knowledge base, then the bounded knowledge scalars.
//!
//! ```text
//! cargo run --example knowledge_branch
//! ```

use adembed::corpus::synthetic::{default_caption_map, default_symbol_map, generate_synthetic, SyntheticSpec};
use adembed::corpus::Corpus;
use adembed::losses::LossConfig;
use adembed::model::{build_object_symbol_kb, EmbeddingConfig, KbMode, ModelParams};
use adembed::trainer::{
    alpha_importance, train_knowledge_phase, train_main_phase, train_symbol_classifier, Phase,
    TrainConfig,
};

fn main() -> adembed::Result<()> {
    let mut spec = SyntheticSpec::default_with_seed(9);
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
    let lcfg = LossConfig {
        kprime: 4,
        batch_size: 16,
        ..LossConfig::default()
    };
    let ecfg = EmbeddingConfig::default();

    // phase 1: the main embedding branch
    let params = ModelParams::init(&corpus, 32, None, 9)?;
    let tcfg = TrainConfig {
        phase: Phase::Main,
        steps: 400,
        lr: 2.0,
        eval_every: 100,
        seed: 9,
    };
    let phase1 = train_main_phase(&corpus, params, &tcfg, &ecfg, &lcfg)?;
    println!("phase 1: best val Recall@3 {:.3}", phase1.best_val_recall3);

    // prior knowledge: the multilabel symbol classifier
    let mut params = phase1.params;
    let losses = train_symbol_classifier(&corpus, &mut params, 30, 2.0, 9)?;
    println!(
        "classifier: {} epochs, loss {:.3} -> {:.3}",
        losses.len(),
        losses.first().unwrap(),
        losses.last().unwrap()
    );

    // object-symbol knowledge base from the learned space
    let (rules, report) = build_object_symbol_kb(&params, &corpus.caption_vocab)?;
    params.rule_words = Some(rules);
    println!("\nknowledge-base rules (first 5 symbols):");
    for row in report.iter().take(5) {
        println!("  {:12} -> {}", row.symbol, row.words.join(", "));
    }

    // phase 2: train the 53 bounded importance scalars, everything frozen
    for kb_mode in [KbMode::Symbols, KbMode::Objects] {
        let ecfg2 = EmbeddingConfig {
            kb_mode,
            ..ecfg.clone()
        };
        let tcfg2 = TrainConfig {
            phase: Phase::Knowledge,
            steps: 150,
            lr: 0.01,
            eval_every: 50,
            seed: 9,
        };
        let outcome = train_knowledge_phase(&corpus, params.clone(), &tcfg2, &ecfg2, &lcfg)?;
        println!(
            "\nphase 2 ({kb_mode:?}): best val Recall@3 {:.3} (phase 1 was {:.3})",
            outcome.best_val_recall3, phase1.best_val_recall3
        );
        let table = alpha_importance(&outcome.final_params, kb_mode)?;
        println!("  most useful symbols:");
        for (name, alpha) in table.iter().take(3) {
            println!("    {name:12} alpha {alpha:.4}");
        }
        println!("  least useful symbols:");
        for (name, alpha) in table.iter().rev().take(3) {
            println!("    {name:12} alpha {alpha:.4}");
        }
    }
    Ok(())
}

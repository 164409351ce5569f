//! Finite-difference check of the full combined loss on a small batch.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use std::collections::BTreeSet;

use adembed::corpus::synthetic::{default_caption_map, default_symbol_map, generate_synthetic, SyntheticSpec};
use adembed::corpus::{make_batches, Corpus};
use adembed::losses::{final_loss, LossConfig};
use adembed::model::{build_object_symbol_kb, EmbeddingConfig, KbMode, ModelParams};
use adembed::rng::{rng_for, Stream};
use adembed::trainer::train_symbol_classifier;
use numgrad::check_gradients;

fn main() -> adembed::Result<()> {
    let mut spec = SyntheticSpec::default_with_seed(5);
    spec.n_topics = 2;
    spec.n_train = 4;
    spec.n_val = 2;
    spec.n_test = 2;
    spec.d_feat = 10;
    spec.statement_vocab_size = 24;
    spec.symbols_per_topic = default_symbol_map(2);
    spec.caption_words_per_topic = default_caption_map(2);
    let (records, _) = generate_synthetic(&spec)?;
    let corpus = Corpus::from_records(records)?;

    let mut params = ModelParams::init(&corpus, 12, None, 5)?;
    train_symbol_classifier(&corpus, &mut params, 3, 2.0, 5)?;
    let (rules, _) = build_object_symbol_kb(&params, &corpus.caption_vocab)?;
    params.rule_words = Some(rules);

    let batch = make_batches(&corpus, 4, 5, 0)?.remove(0);
    let lcfg = LossConfig {
        kprime: 2,
        batch_size: 4,
        ..LossConfig::default()
    };
    let mut trainable: BTreeSet<String> = [
        "w", "w_a", "t_stmt", "t_cap", "t_sym", "u_symb", "alpha_sym", "alpha_obj",
        "bn_img.scale", "bn_img.shift", "bn_att.scale", "bn_att.shift",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    trainable.insert("t_topic".to_string());

    for kb_mode in [KbMode::Symbols, KbMode::Objects] {
        let ecfg = EmbeddingConfig {
            kb_mode,
            ..EmbeddingConfig::default()
        };
        let mut rng = rng_for(5, Stream::Dropout);
        let result = final_loss(
            &corpus, &batch, &params, &ecfg, &lcfg, &trainable, true, &mut rng,
        )?;
        println!(
            "kb {kb_mode:?}: loss {:.4} (main {:.4}, symbol {:.4}, caption {:.4}, decay {:.2e})",
            result.total, result.main, result.symbol, result.caption, result.decay
        );
        let mut graph = result.bg;
        let report = check_gradients(&mut graph, &mut params.store, 1e-5, 1e-4)?;
        for entry in &report.entries {
            println!(
                "  {:12} max rel err {:.3e}  {}",
                entry.name,
                entry.max_rel_error,
                if entry.passed { "ok" } else { "FAIL" }
            );
        }
        assert!(report.all_passed());
    }
    println!("\nall gradients match central finite differences within 1e-4");
    Ok(())
}

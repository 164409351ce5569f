//! Two-phase training: the main embedding branch under Adagrad, then the
//! knowledge scalars under Adam with everything else frozen. The symbol
//! classifier is pretrained between phases on the symbol-annotated subset.
//!
//! Freezing is absolute by construction: frozen tensors enter each batch
//! graph as constant snapshots, so they receive exactly zero gradient and
//! the optimizer (which only touches gradient entries) never sees them.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numgrad::{
    step_adagrad, step_adam, AdagradState, AdamState, ComputeGraph, Kernel, Tensor,
};

use crate::corpus::{BatchStream, Corpus, Split};
use crate::error::{Error, Result};
use crate::eval::{assemble_tasks, mean_recall3, RankingTask, TaskMode, DEFAULT_POOL};
use crate::losses::{final_loss, LossConfig};
use crate::model::{
    Embedder, EmbeddingConfig, KbMode, ModelParams, BN_ATT, BN_IMG, BN_MOMENTUM, P_ALPHA_OBJ,
    P_ALPHA_SYM, P_T_CAP, P_T_STMT, P_T_SYM, P_T_TOPIC, P_U_SYMB, P_W, P_WA,
};
use crate::rng::{rng_for, Stream};
use crate::symbols::{symbol_index, SYMBOL_COUNT, SYMBOL_NAMES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Main,
    Knowledge,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-data defaults for the main phase.
    pub fn main_phase(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Main,
            steps: 100_000,
            lr: 2.0,
            eval_every: 1_000,
            seed,
        }
    }

    /// Full-data defaults for the knowledge phase.
    pub fn knowledge_phase(seed: u64) -> Self {
        TrainConfig {
            phase: Phase::Knowledge,
            steps: 5_000,
            lr: 0.01,
            eval_every: 100,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub val_recall3: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum OptimizerState {
    Adagrad(AdagradState),
    Adam(AdamState),
}

pub struct TrainOutcome {
    /// Best-validation snapshot (initial parameters when no step improved).
    pub params: ModelParams,
    /// Parameters after the last step, regardless of validation.
    pub final_params: ModelParams,
    pub best_val_recall3: f64,
    pub best_step: usize,
    pub history: Vec<HistoryRow>,
    pub optimizer: OptimizerState,
    pub steps_done: u64,
    /// Training RNG state at the end of the run.
    pub rng: ChaCha8Rng,
}

fn phase1_trainable() -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    for name in [P_W, P_WA, P_T_STMT, P_T_CAP, P_T_SYM, P_T_TOPIC] {
        set.insert(name.to_string());
    }
    for prefix in [BN_IMG, BN_ATT] {
        set.insert(format!("{prefix}.scale"));
        set.insert(format!("{prefix}.shift"));
    }
    set
}

fn update_running_stats(params: &mut ModelParams, graph: &ComputeGraph, bn_nodes: &[(String, usize)]) -> Result<()> {
    let stats = graph.bn_batch_stats();
    for (prefix, node) in bn_nodes {
        let Some(s) = stats.iter().find(|s| s.node == *node) else {
            continue;
        };
        let mean = params.store.get_mut(&format!("{prefix}.mean"))?;
        for (m, b) in mean.data_mut().iter_mut().zip(&s.mean) {
            *m = BN_MOMENTUM * *m + (1.0 - BN_MOMENTUM) * b;
        }
        let var = params.store.get_mut(&format!("{prefix}.var"))?;
        for (v, b) in var.data_mut().iter_mut().zip(&s.var) {
            *v = BN_MOMENTUM * *v + (1.0 - BN_MOMENTUM) * b;
        }
    }
    Ok(())
}

fn validation_tasks(corpus: &Corpus, seed: u64) -> Vec<RankingTask> {
    assemble_tasks(corpus, Split::Val, TaskMode::Standard, seed, DEFAULT_POOL).0
}

/// Phase 1: train the embedding branch with the knowledge branch forced off.
/// Adagrad updates flow to the projection, attention, batch-norm, and
/// embedding tables; validation Recall@3 picks the returned snapshot.
pub fn train_main_phase(
    corpus: &Corpus,
    params: ModelParams,
    tcfg: &TrainConfig,
    ecfg: &EmbeddingConfig,
    lcfg: &LossConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let ecfg = EmbeddingConfig {
        kb_mode: KbMode::Off,
        ..ecfg.clone()
    };
    let trainable = phase1_trainable();
    let state = AdagradState::new(tcfg.lr);
    run_phase(
        corpus,
        params,
        tcfg,
        &ecfg,
        lcfg,
        &trainable,
        OptimizerState::Adagrad(state),
    )
}

// Both phases share the step loop; only the trainable set and the optimizer
// differ.
fn run_phase(
    corpus: &Corpus,
    mut params: ModelParams,
    tcfg: &TrainConfig,
    ecfg: &EmbeddingConfig,
    lcfg: &LossConfig,
    trainable: &BTreeSet<String>,
    mut optimizer: OptimizerState,
) -> Result<TrainOutcome> {
    let mut rng = rng_for(tcfg.seed, Stream::Dropout);
    let mut stream = BatchStream::new(corpus, lcfg.batch_size, tcfg.seed)?;
    let val_tasks = validation_tasks(corpus, tcfg.seed);

    let eval_now = |params: &ModelParams| -> Result<f64> {
        let embedder = Embedder::new(params, ecfg, corpus);
        mean_recall3(&embedder, &val_tasks)
    };

    let mut best_val = if val_tasks.is_empty() { 0.0 } else { eval_now(&params)? };
    let mut best_step = 0usize;
    let mut best_params = params.clone();
    let mut history = Vec::with_capacity(tcfg.steps);

    for step in 1..=tcfg.steps {
        let batch = stream.next().expect("stream is endless");
        let result = final_loss(
            corpus, &batch, &params, ecfg, lcfg, trainable, true, &mut rng,
        )
        .map_err(|e| Error::TrainDiverged {
            step,
            source: Box::new(e),
        })?;
        let grads = result.bg.backward().map_err(|e| Error::TrainDiverged {
            step,
            source: Box::new(e.into()),
        })?;
        match &mut optimizer {
            OptimizerState::Adagrad(s) => step_adagrad(&mut params.store, &grads, s)?,
            OptimizerState::Adam(s) => step_adam(&mut params.store, &grads, s)?,
        }
        update_running_stats(&mut params, &result.bg, &result.bn_nodes)?;

        let val = if !val_tasks.is_empty() && (step % tcfg.eval_every == 0 || step == tcfg.steps) {
            let v = eval_now(&params)?;
            if v > best_val {
                best_val = v;
                best_step = step;
                best_params = params.clone();
            }
            Some(v)
        } else {
            None
        };
        history.push(HistoryRow {
            step,
            loss: result.total,
            val_recall3: val,
        });
    }

    if val_tasks.is_empty() {
        best_params = params.clone();
        best_step = tcfg.steps;
    }
    Ok(TrainOutcome {
        params: best_params,
        final_params: params,
        best_val_recall3: best_val,
        best_step,
        history,
        optimizer,
        steps_done: tcfg.steps as u64,
        rng,
    })
}

/// Phase 2: train only the bounded knowledge scalars with Adam; every other
/// tensor is frozen at its phase-1 value.
pub fn train_knowledge_phase(
    corpus: &Corpus,
    params: ModelParams,
    tcfg: &TrainConfig,
    ecfg: &EmbeddingConfig,
    lcfg: &LossConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let alpha_name = match ecfg.kb_mode {
        KbMode::Off => {
            return Err(Error::Config(
                "knowledge phase requires kb mode symbols or objects".to_string(),
            ))
        }
        KbMode::Symbols => P_ALPHA_SYM,
        KbMode::Objects => {
            if params.rule_words.is_none() {
                return Err(Error::Config(
                    "kb-objects requires a built object knowledge base (run build-kb)".to_string(),
                ));
            }
            P_ALPHA_OBJ
        }
    };
    let mut trainable = BTreeSet::new();
    trainable.insert(alpha_name.to_string());
    let state = AdamState::new(tcfg.lr);
    run_phase(
        corpus,
        params,
        tcfg,
        ecfg,
        lcfg,
        &trainable,
        OptimizerState::Adam(state),
    )
}

/// Pretrain the multilabel symbol classifier with full-batch sigmoid
/// cross-entropy over the symbol-annotated train records. Returns the loss
/// per epoch.
pub fn train_symbol_classifier(
    corpus: &Corpus,
    params: &mut ModelParams,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let annotated: Vec<usize> = corpus
        .split_indices(Split::Train)
        .into_iter()
        .filter(|&i| !corpus.records[i].symbols.is_empty())
        .collect();
    if annotated.is_empty() {
        return Err(Error::Config(
            "symbol classifier needs at least one symbol-annotated train record".to_string(),
        ));
    }
    let _ = rng_for(seed, Stream::Classifier); // reserved; training is full-batch

    let d = params.dims.d_feat;
    let mut features = Vec::with_capacity(annotated.len() * d);
    let mut targets = vec![0.0; annotated.len() * SYMBOL_COUNT];
    for (row, &i) in annotated.iter().enumerate() {
        let record = &corpus.records[i];
        features.extend_from_slice(&record.image_feature);
        for sym in &record.symbols {
            let j = symbol_index(sym).expect("validated at load");
            targets[row * SYMBOL_COUNT + j] = 1.0;
        }
    }
    let features = Tensor::matrix(annotated.len(), d, features)?;
    let targets = Tensor::matrix(annotated.len(), SYMBOL_COUNT, targets)?;

    let mut state = AdagradState::new(lr);
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut graph = ComputeGraph::new();
        let u = graph.param(P_U_SYMB, &params.store)?;
        let x = graph.constant(features.clone())?;
        let t = graph.constant(targets.clone())?;
        let logits = graph.apply(Kernel::Linear, &[u, x])?;
        let loss = graph.apply(Kernel::SigmoidCrossEntropy, &[logits, t])?;
        graph.set_loss(loss)?;
        losses.push(graph.loss_value()?);
        let grads = graph.backward()?;
        step_adagrad(&mut params.store, &grads, &mut state)?;
    }
    Ok(losses)
}

/// All 53 symbols with their bounded importance scalars, sorted descending.
/// For the object branch the per-rule scalars are averaged per symbol.
pub fn alpha_importance(params: &ModelParams, kb_mode: KbMode) -> Result<Vec<(String, f64)>> {
    let values: Vec<f64> = match kb_mode {
        KbMode::Off => {
            return Err(Error::Config("no knowledge branch configured".to_string()))
        }
        KbMode::Symbols => params.bounded_alpha(P_ALPHA_SYM)?,
        KbMode::Objects => {
            let per_rule = params.bounded_alpha(P_ALPHA_OBJ)?;
            per_rule
                .chunks(crate::model::RULE_WORDS_PER_SYMBOL)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect()
        }
    };
    let mut rows: Vec<(String, f64)> = SYMBOL_NAMES
        .iter()
        .map(|s| s.to_string())
        .zip(values)
        .collect();
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite alphas").then(a.0.cmp(&b.0)));
    Ok(rows)
}

/// History rows as CSV: step, loss, val_recall3 (blank when not evaluated).
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,loss,val_recall3\n");
    for row in history {
        let val = row
            .val_recall3
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, val));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::corpus::Corpus;
    use crate::model::build_object_symbol_kb;
    use numgrad::ComputeGraph as Graph;

    fn tiny_corpus(seed: u64) -> Corpus {
        let mut spec = SyntheticSpec::default_with_seed(seed);
        spec.n_topics = 4;
        spec.n_train = 16;
        spec.n_val = 8;
        spec.n_test = 8;
        spec.d_feat = 6;
        spec.statement_vocab_size = 40;
        spec.symbols_per_topic = crate::corpus::synthetic::default_symbol_map(4);
        spec.caption_words_per_topic = crate::corpus::synthetic::default_caption_map(4);
        let (records, _) = generate_synthetic(&spec).unwrap();
        Corpus::from_records(records).unwrap()
    }

    fn tiny_setup(seed: u64) -> (Corpus, ModelParams, EmbeddingConfig, LossConfig) {
        let corpus = tiny_corpus(seed);
        let params = ModelParams::init(&corpus, 6, None, seed).unwrap();
        let ecfg = EmbeddingConfig::default();
        let lcfg = LossConfig {
            kprime: 2,
            batch_size: 4,
            ..LossConfig::default()
        };
        (corpus, params, ecfg, lcfg)
    }

    fn stores_equal(a: &ModelParams, b: &ModelParams) -> bool {
        a.store.iter().zip(b.store.iter()).all(|((ka, ta), (kb, tb))| {
            ka == kb
                && ta.data().len() == tb.data().len()
                && ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    #[test]
    fn zero_steps_leave_params_unchanged() {
        let (corpus, params, ecfg, lcfg) = tiny_setup(1);
        let before = params.clone();
        let tcfg = TrainConfig {
            phase: Phase::Main,
            steps: 0,
            lr: 2.0,
            eval_every: 10,
            seed: 1,
        };
        let outcome = train_main_phase(&corpus, params, &tcfg, &ecfg, &lcfg).unwrap();
        assert!(stores_equal(&before, &outcome.params));
        assert!(outcome.history.is_empty());
    }

    #[test]
    fn training_is_replayable_bit_for_bit() {
        let (corpus, params, ecfg, lcfg) = tiny_setup(2);
        let tcfg = TrainConfig {
            phase: Phase::Main,
            steps: 12,
            lr: 2.0,
            eval_every: 6,
            seed: 2,
        };
        let a = train_main_phase(&corpus, params.clone(), &tcfg, &ecfg, &lcfg).unwrap();
        let b = train_main_phase(&corpus, params, &tcfg, &ecfg, &lcfg).unwrap();
        assert!(stores_equal(&a.params, &b.params));
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.val_recall3.map(f64::to_bits), rb.val_recall3.map(f64::to_bits));
        }
    }

    #[test]
    fn knowledge_phase_rejects_kb_off_and_missing_rules() {
        let (corpus, params, ecfg, lcfg) = tiny_setup(3);
        let tcfg = TrainConfig {
            phase: Phase::Knowledge,
            steps: 2,
            lr: 0.01,
            eval_every: 1,
            seed: 3,
        };
        assert!(train_knowledge_phase(&corpus, params.clone(), &tcfg, &ecfg, &lcfg).is_err());
        let objects = EmbeddingConfig {
            kb_mode: KbMode::Objects,
            ..ecfg
        };
        // no rule words built yet
        assert!(train_knowledge_phase(&corpus, params, &tcfg, &objects, &lcfg).is_err());
    }

    #[test]
    fn knowledge_phase_freezes_everything_but_alpha() {
        let (corpus, mut params, ecfg, lcfg) = tiny_setup(4);
        train_symbol_classifier(&corpus, &mut params, 5, 2.0, 4).unwrap();
        let (rules, _) = build_object_symbol_kb(&params, &corpus.caption_vocab).unwrap();
        params.rule_words = Some(rules);

        for (kb, alpha_name, frozen_alpha) in [
            (KbMode::Symbols, P_ALPHA_SYM, P_ALPHA_OBJ),
            (KbMode::Objects, P_ALPHA_OBJ, P_ALPHA_SYM),
        ] {
            let ecfg_kb = EmbeddingConfig {
                kb_mode: kb,
                ..ecfg.clone()
            };
            let tcfg = TrainConfig {
                phase: Phase::Knowledge,
                steps: 8,
                lr: 0.05,
                eval_every: 4,
                seed: 4,
            };
            let before = params.clone();
            let outcome =
                train_knowledge_phase(&corpus, params.clone(), &tcfg, &ecfg_kb, &lcfg).unwrap();
            let mut changed = 0;
            for (name, tensor) in outcome.final_params.store.iter() {
                let orig = before.store.get(name).unwrap();
                let same = tensor
                    .data()
                    .iter()
                    .zip(orig.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if name == alpha_name {
                    if !same {
                        changed += 1;
                    }
                } else {
                    assert!(same, "frozen tensor '{name}' changed under {kb:?}");
                }
            }
            assert_eq!(changed, 1, "alpha must move under {kb:?}");
            assert_ne!(alpha_name, frozen_alpha);

            // alpha stays inside (0, 2) in both final and best params
            for p in [&outcome.final_params, &outcome.params] {
                let alpha = p.bounded_alpha(alpha_name).unwrap();
                assert!(alpha.iter().all(|&a| a > 0.0 && a < 2.0));
            }
        }
    }

    #[test]
    fn alpha_initializes_to_one_and_importance_lists_all_symbols() {
        let (corpus, params, _, _) = tiny_setup(5);
        let alpha = params.bounded_alpha(P_ALPHA_SYM).unwrap();
        assert!(alpha.iter().all(|&a| (a - 1.0).abs() < 1e-15));
        let _ = corpus;
        let table = alpha_importance(&params, KbMode::Symbols).unwrap();
        assert_eq!(table.len(), SYMBOL_COUNT);
        for (_, a) in &table {
            assert!(*a > 0.0 && *a < 2.0);
        }
        let names: std::collections::HashSet<&str> =
            table.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(names.len(), SYMBOL_COUNT);
    }

    #[test]
    fn classifier_overfits_a_single_record() {
        let mut corpus = tiny_corpus(6);
        // strip symbols from all but one train record
        let mut kept = false;
        for r in corpus.records.iter_mut() {
            if r.split == Split::Train && !kept {
                r.symbols = vec!["danger".to_string()];
                kept = true;
            } else {
                r.symbols.clear();
            }
        }
        let corpus = Corpus::from_records(corpus.records).unwrap();
        let mut params = ModelParams::init(&corpus, 6, None, 6).unwrap();
        train_symbol_classifier(&corpus, &mut params, 60, 2.0, 6).unwrap();
        let record = corpus
            .records
            .iter()
            .find(|r| !r.symbols.is_empty())
            .unwrap();
        let y =
            crate::model::symbol_distribution_kb_symbols(&params, &record.image_feature).unwrap();
        let danger = crate::symbols::symbol_index("danger").unwrap();
        assert!(y[danger] > 0.9, "p={}", y[danger]);
    }

    #[test]
    fn classifier_zero_epochs_is_identity_and_needs_annotations() {
        let (corpus, mut params, _, _) = tiny_setup(7);
        let before = params.store.get(P_U_SYMB).unwrap().clone();
        train_symbol_classifier(&corpus, &mut params, 0, 2.0, 7).unwrap();
        assert_eq!(before, *params.store.get(P_U_SYMB).unwrap());

        let mut bare = tiny_corpus(7);
        for r in bare.records.iter_mut() {
            r.symbols.clear();
        }
        let bare = Corpus::from_records(bare.records).unwrap();
        assert!(train_symbol_classifier(&bare, &mut params, 1, 2.0, 7).is_err());
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let (corpus, mut params, _, _) = tiny_setup(8);
        let annotated: Vec<usize> = corpus
            .split_indices(Split::Train)
            .into_iter()
            .filter(|&i| !corpus.records[i].symbols.is_empty())
            .take(3)
            .collect();
        let d = params.dims.d_feat;
        let mut features = Vec::new();
        let mut targets = vec![0.0; annotated.len() * SYMBOL_COUNT];
        for (row, &i) in annotated.iter().enumerate() {
            features.extend_from_slice(&corpus.records[i].image_feature);
            for sym in &corpus.records[i].symbols {
                targets[row * SYMBOL_COUNT + symbol_index(sym).unwrap()] = 1.0;
            }
        }
        let mut graph = Graph::new();
        let u = graph.param(P_U_SYMB, &params.store).unwrap();
        let x = graph
            .constant(Tensor::matrix(annotated.len(), d, features).unwrap())
            .unwrap();
        let t = graph
            .constant(Tensor::matrix(annotated.len(), SYMBOL_COUNT, targets).unwrap())
            .unwrap();
        let logits = graph.apply(numgrad::Kernel::Linear, &[u, x]).unwrap();
        let loss = graph
            .apply(numgrad::Kernel::SigmoidCrossEntropy, &[logits, t])
            .unwrap();
        graph.set_loss(loss).unwrap();
        let report =
            numgrad::check_gradients(&mut graph, &mut params.store, 1e-5, 1e-4).unwrap();
        assert!(report.all_passed());
    }

    #[test]
    fn history_csv_layout() {
        let rows = vec![
            HistoryRow {
                step: 1,
                loss: 2.5,
                val_recall3: None,
            },
            HistoryRow {
                step: 2,
                loss: 2.0,
                val_recall3: Some(1.25),
            },
        ];
        let csv = history_csv(&rows);
        assert_eq!(csv, "step,loss,val_recall3\n1,2.5,\n2,2,1.25\n");
    }
}

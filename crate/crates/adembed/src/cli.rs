//! Command-line interface: reproducible runs wiring the corpus, trainer,
//! and evaluation harness together. Every command writes its artifacts plus
//! a manifest into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use crate::config::RunConfig;
use crate::corpus::synthetic::generate_synthetic;
use crate::corpus::wordvec::parse_word_vectors;
use crate::corpus::{load_corpus, write_corpus, Corpus, Split, VocabDomain};
use crate::error::{Error, Result};
use crate::eval::{
    assemble_tasks, cluster_homogeneity, compute_metrics, compute_metrics_by_topic, knn_retrieve,
    rank_candidates, statement_distance_analysis, KnnTargets, MetricsReport, RankingOutcome,
    RankingTask, TaskMode,
};
use crate::losses::LabelSource;
use crate::manifest::write_manifest;
use crate::model::{
    build_object_symbol_kb, render_synonym_table, Embedder, EmbeddingConfig, ImageMode, KbMode,
    ModelParams,
};
use crate::rng::{rng_for, Stream};
use crate::trainer::{
    alpha_importance, history_csv, train_knowledge_phase, train_main_phase,
    train_symbol_classifier, Phase, TrainConfig,
};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KbArg {
    Off,
    Symbols,
    Objects,
}

impl From<KbArg> for KbMode {
    fn from(a: KbArg) -> KbMode {
        match a {
            KbArg::Off => KbMode::Off,
            KbArg::Symbols => KbMode::Symbols,
            KbArg::Objects => KbMode::Objects,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ImageModeArg {
    Whole,
    Mean,
    Attention,
}

impl From<ImageModeArg> for ImageMode {
    fn from(a: ImageModeArg) -> ImageMode {
        match a {
            ImageModeArg::Whole => ImageMode::Whole,
            ImageModeArg::Mean => ImageMode::RegionMean,
            ImageModeArg::Attention => ImageMode::RegionAttention,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelArg {
    Symbols,
    Topics,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Standard,
    Hard,
    Slogan,
}

impl From<ModeArg> for TaskMode {
    fn from(a: ModeArg) -> TaskMode {
        match a {
            ModeArg::Standard => TaskMode::Standard,
            ModeArg::Hard => TaskMode::Hard,
            ModeArg::Slogan => TaskMode::Slogan,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Statement,
    Caption,
    Symbol,
}

impl From<DomainArg> for VocabDomain {
    fn from(a: DomainArg) -> VocabDomain {
        match a {
            DomainArg::Statement => VocabDomain::Statement,
            DomainArg::Caption => VocabDomain::Caption,
            DomainArg::Symbol => VocabDomain::Symbol,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetsArg {
    Regions,
    Statement,
    Caption,
    Symbol,
}

#[derive(Debug, Parser)]
#[command(
    name = "adembed",
    version,
    about = "Joint image-text embedding training and evaluation over precomputed features"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted keys take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Corpus file override.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Phase-1 checkpoint (required by train-knowledge).
    #[arg(long, global = true)]
    phase1_checkpoint: Option<PathBuf>,
    /// Ranking task mode.
    #[arg(long, global = true)]
    mode: Option<ModeArg>,
    /// Knowledge-branch mode.
    #[arg(long, global = true)]
    kb: Option<KbArg>,
    /// Constraint label source.
    #[arg(long, global = true)]
    constraint_labels: Option<LabelArg>,
    /// Image embedding mode.
    #[arg(long, global = true)]
    image_mode: Option<ImageModeArg>,
    /// Hard negatives mined per anchor.
    #[arg(long, global = true)]
    kprime: Option<usize>,
    /// Evaluation fan-out threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its metadata.
    GenSynthetic,
    /// Phase-1 training of the embedding branch (knowledge branch off).
    TrainMain,
    /// Pretrain the multilabel symbol classifier on a checkpoint.
    TrainClassifier,
    /// Build the object-symbol knowledge base from a trained checkpoint.
    BuildKb,
    /// Phase-2 training of the bounded knowledge scalars.
    TrainKnowledge,
    /// Rank test-split tasks and report all metrics.
    Eval,
    /// Rank test-split tasks and dump the per-query candidate orderings.
    Rank,
    /// Nearest regions or words for a query word.
    Knn {
        #[arg(long)]
        query: String,
        #[arg(long, value_enum, default_value = "statement")]
        domain: DomainArg,
        #[arg(long, value_enum, default_value = "regions")]
        targets: TargetsArg,
        #[arg(long)]
        top: Option<usize>,
    },
    /// K-means the test split and report topic homogeneity.
    Cluster,
    /// Within/between statement-distance table over candidate pool sizes.
    AnalyzeDistances,
}

pub fn run_cli() -> Result<()> {
    run(Cli::parse())
}

/// Test-friendly entry: parse the given arguments and run.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    run(cli)
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(corpus) = &cli.corpus {
        cfg.corpus = Some(corpus.clone());
    }
    if let Some(kb) = cli.kb {
        cfg.embedding.kb_mode = kb.into();
    }
    if let Some(mode) = cli.image_mode {
        cfg.embedding.image_mode = mode.into();
    }
    if let Some(labels) = cli.constraint_labels {
        cfg.loss.label_source = match labels {
            LabelArg::Symbols => LabelSource::Symbols,
            LabelArg::Topics => LabelSource::Topics,
        };
    }
    if let Some(kprime) = cli.kprime {
        cfg.loss.kprime = kprime;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(mode) = cli.mode {
        cfg.eval_mode = mode.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_corpus_from(cfg: &RunConfig) -> Result<Corpus> {
    load_corpus(cfg.require_corpus()?)
}

fn init_params(cfg: &RunConfig, corpus: &Corpus) -> Result<ModelParams> {
    let vectors = match &cfg.word_vectors {
        Some(path) => Some(parse_word_vectors(path)?),
        None => None,
    };
    ModelParams::init(corpus, cfg.d_embed, vectors.as_ref(), cfg.seed)
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::GenSynthetic => "gen-synthetic",
        Command::TrainMain => "train-main",
        Command::TrainClassifier => "train-classifier",
        Command::BuildKb => "build-kb",
        Command::TrainKnowledge => "train-knowledge",
        Command::Eval => "eval",
        Command::Rank => "rank",
        Command::Knn { .. } => "knn",
        Command::Cluster => "cluster",
        Command::AnalyzeDistances => "analyze-distances",
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    ensure_out_dir(&cli.out)?;
    let name = command_name(&cli.command);
    let mut inputs: Vec<PathBuf> = Vec::new();

    match &cli.command {
        Command::GenSynthetic => {
            let mut spec = cfg.synthetic.clone();
            spec.seed = cfg.seed;
            let (records, meta) = generate_synthetic(&spec)?;
            write_corpus(&records, cli.out.join("corpus.jsonl"))?;
            write_text(
                &cli.out.join("synthetic_meta.json"),
                &serde_json::to_string_pretty(&meta)?,
            )?;
            println!(
                "generated {} records ({} topics) -> {}",
                records.len(),
                spec.n_topics,
                cli.out.join("corpus.jsonl").display()
            );
        }
        Command::TrainMain => {
            let corpus = load_corpus_from(&cfg)?;
            inputs.push(cfg.require_corpus()?.clone());
            if let Some(wv) = &cfg.word_vectors {
                inputs.push(wv.clone());
            }
            let params = init_params(&cfg, &corpus)?;
            let tcfg = TrainConfig {
                phase: Phase::Main,
                steps: cfg.main_steps,
                lr: cfg.main_lr,
                eval_every: cfg.eval_every,
                seed: cfg.seed,
            };
            let embedding = EmbeddingConfig {
                kb_mode: KbMode::Off,
                ..cfg.embedding.clone()
            };
            let outcome = train_main_phase(&corpus, params, &tcfg, &embedding, &cfg.loss)?;
            write_text(&cli.out.join("history_main.csv"), &history_csv(&outcome.history))?;
            let ckpt = Checkpoint::build(
                &outcome.params,
                &embedding,
                &cfg.loss,
                Stage::Main,
                cfg.seed,
                outcome.steps_done,
                Some(&outcome.optimizer),
                &outcome.rng,
            );
            save_checkpoint(&ckpt, cli.out.join("checkpoint.json"))?;
            println!(
                "trained main phase for {} steps; best val Recall@3 {:.4} at step {}",
                outcome.steps_done, outcome.best_val_recall3, outcome.best_step
            );
        }
        Command::TrainClassifier => {
            let ckpt_path = require_checkpoint(&cli.checkpoint)?;
            inputs.push(ckpt_path.clone());
            let ckpt = load_checkpoint(&ckpt_path)?;
            let corpus = load_corpus_from(&cfg)?;
            inputs.push(cfg.require_corpus()?.clone());
            let mut params = ckpt.into_params()?;
            let losses = train_symbol_classifier(
                &corpus,
                &mut params,
                cfg.classifier_epochs,
                cfg.classifier_lr,
                cfg.seed,
            )?;
            let mut csv = String::from("epoch,loss\n");
            for (i, l) in losses.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i + 1, l));
            }
            write_text(&cli.out.join("classifier_history.csv"), &csv)?;
            let out_ckpt = Checkpoint::build(
                &params,
                &ckpt.config.embedding,
                &ckpt.config.loss,
                Stage::Classifier,
                cfg.seed,
                ckpt.step,
                None,
                &ckpt.rng.into_rng()?,
            );
            save_checkpoint(&out_ckpt, cli.out.join("checkpoint.json"))?;
            println!(
                "trained symbol classifier for {} epochs (final loss {:.4})",
                losses.len(),
                losses.last().copied().unwrap_or(0.0)
            );
        }
        Command::BuildKb => {
            let ckpt_path = require_checkpoint(&cli.checkpoint)?;
            inputs.push(ckpt_path.clone());
            let ckpt = load_checkpoint(&ckpt_path)?;
            let corpus = load_corpus_from(&cfg)?;
            inputs.push(cfg.require_corpus()?.clone());
            let mut params = ckpt.into_params()?;
            let (rules, report) = build_object_symbol_kb(&params, &corpus.caption_vocab)?;
            params.rule_words = Some(rules);
            write_text(&cli.out.join("synonyms.tsv"), &render_synonym_table(&report))?;
            let out_ckpt = Checkpoint::build(
                &params,
                &ckpt.config.embedding,
                &ckpt.config.loss,
                Stage::Kb,
                cfg.seed,
                ckpt.step,
                None,
                &ckpt.rng.into_rng()?,
            );
            save_checkpoint(&out_ckpt, cli.out.join("checkpoint.json"))?;
            println!("built object-symbol knowledge base ({} rules)", report.len());
        }
        Command::TrainKnowledge => {
            let ckpt_path = cli.phase1_checkpoint.clone().ok_or_else(|| {
                Error::Config("train-knowledge requires --phase1-checkpoint".to_string())
            })?;
            inputs.push(ckpt_path.clone());
            let ckpt = load_checkpoint(&ckpt_path)?;
            let corpus = load_corpus_from(&cfg)?;
            inputs.push(cfg.require_corpus()?.clone());
            if cfg.embedding.kb_mode == KbMode::Off {
                return Err(Error::Config(
                    "train-knowledge requires --kb symbols or --kb objects".to_string(),
                ));
            }
            if cfg.embedding.kb_mode == KbMode::Symbols
                && !matches!(ckpt.config.stage, Stage::Classifier | Stage::Kb)
            {
                return Err(Error::Config(
                    "kb-symbols needs a checkpoint with a trained classifier (run train-classifier)"
                        .to_string(),
                ));
            }
            let params = ckpt.into_params()?;
            let embedding = EmbeddingConfig {
                kb_mode: cfg.embedding.kb_mode,
                ..ckpt.config.embedding.clone()
            };
            let tcfg = TrainConfig {
                phase: Phase::Knowledge,
                steps: cfg.knowledge_steps,
                lr: cfg.knowledge_lr,
                eval_every: cfg.eval_every,
                seed: cfg.seed,
            };
            let outcome = train_knowledge_phase(&corpus, params, &tcfg, &embedding, &cfg.loss)?;
            write_text(
                &cli.out.join("history_knowledge.csv"),
                &history_csv(&outcome.history),
            )?;
            let table = alpha_importance(&outcome.params, embedding.kb_mode)?;
            let mut csv = String::from("rank,symbol,alpha\n");
            for (i, (symbol, alpha)) in table.iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", i + 1, symbol, alpha));
            }
            write_text(&cli.out.join("alpha_importance.csv"), &csv)?;
            let out_ckpt = Checkpoint::build(
                &outcome.params,
                &embedding,
                &cfg.loss,
                Stage::Knowledge,
                cfg.seed,
                outcome.steps_done,
                Some(&outcome.optimizer),
                &outcome.rng,
            );
            save_checkpoint(&out_ckpt, cli.out.join("checkpoint.json"))?;
            println!(
                "trained knowledge phase for {} steps; best val Recall@3 {:.4} at step {}",
                outcome.steps_done, outcome.best_val_recall3, outcome.best_step
            );
        }
        Command::Eval | Command::Rank => {
            let ckpt_path = require_checkpoint(&cli.checkpoint)?;
            inputs.push(ckpt_path.clone());
            let ckpt = load_checkpoint(&ckpt_path)?;
            let corpus = load_corpus_from(&cfg)?;
            inputs.push(cfg.require_corpus()?.clone());
            if let Some(kb) = cli.kb {
                ckpt.ensure_kb_mode(kb.into())?;
            }
            let params = ckpt.into_params()?;
            let embedding = ckpt.config.embedding.clone();
            let embedder = Embedder::new(&params, &embedding, &corpus);
            let (tasks, warnings) =
                assemble_tasks(&corpus, Split::Test, cfg.eval_mode, cfg.seed, cfg.candidate_pool);
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            if tasks.is_empty() {
                return Err(Error::Config("no ranking tasks could be assembled".to_string()));
            }
            let outcomes = rank_all(&embedder, &tasks, cfg.workers)?;
            if matches!(cli.command, Command::Eval) {
                let overall = compute_metrics(&outcomes)?;
                let labeled: Vec<(String, RankingOutcome)> = tasks
                    .iter()
                    .zip(&outcomes)
                    .map(|(t, o)| (t.topic.clone(), o.clone()))
                    .collect();
                let per_topic = compute_metrics_by_topic(&labeled)?;
                write_text(&cli.out.join("metrics.csv"), &metrics_csv(&overall, &per_topic))?;
                let summary = serde_json::json!({
                    "overall": overall,
                    "per_topic": per_topic,
                });
                write_text(
                    &cli.out.join("summary.json"),
                    &serde_json::to_string_pretty(&summary)?,
                )?;
                println!(
                    "{} queries: Rank {:.3} (±{:.3}), Recall@3 {:.3} (±{:.3}), Recall@10 {:.3}",
                    overall.n_queries,
                    overall.rank.mean,
                    overall.rank.stderr,
                    overall.recall3.mean,
                    overall.recall3.stderr,
                    overall.recall10.mean,
                );
            } else {
                let mut csv = String::from("query_id,rank,candidate,positive\n");
                for (task, outcome) in tasks.iter().zip(&outcomes) {
                    for (rank, &candidate) in outcome.order.iter().enumerate() {
                        let positive = task.positives.contains(&candidate);
                        csv.push_str(&format!(
                            "{},{},{},{}\n",
                            task.query_id,
                            rank + 1,
                            candidate,
                            positive
                        ));
                    }
                }
                write_text(&cli.out.join("rankings.csv"), &csv)?;
                println!("ranked {} queries -> rankings.csv", tasks.len());
            }
        }
        Command::Knn {
            query,
            domain,
            targets,
            top,
        } => {
            let ckpt_path = require_checkpoint(&cli.checkpoint)?;
            inputs.push(ckpt_path.clone());
            let ckpt = load_checkpoint(&ckpt_path)?;
            let corpus = load_corpus_from(&cfg)?;
            inputs.push(cfg.require_corpus()?.clone());
            let params = ckpt.into_params()?;
            let embedding = ckpt.config.embedding.clone();
            let embedder = Embedder::new(&params, &embedding, &corpus);
            let knn_targets = match targets {
                TargetsArg::Regions => KnnTargets::Regions(Split::Test),
                TargetsArg::Statement => KnnTargets::Words(VocabDomain::Statement),
                TargetsArg::Caption => KnnTargets::Words(VocabDomain::Caption),
                TargetsArg::Symbol => KnnTargets::Words(VocabDomain::Symbol),
            };
            let hits = knn_retrieve(
                &embedder,
                query,
                (*domain).into(),
                knn_targets,
                top.unwrap_or(cfg.knn_top),
            )?;
            let mut csv = String::from("rank,id,distance\n");
            for (i, hit) in hits.iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", i + 1, hit.id, hit.distance));
            }
            write_text(&cli.out.join("knn.csv"), &csv)?;
            println!("{} hits for '{query}' -> knn.csv", hits.len());
        }
        Command::Cluster => {
            let ckpt_path = require_checkpoint(&cli.checkpoint)?;
            inputs.push(ckpt_path.clone());
            let ckpt = load_checkpoint(&ckpt_path)?;
            let corpus = load_corpus_from(&cfg)?;
            inputs.push(cfg.require_corpus()?.clone());
            let params = ckpt.into_params()?;
            let embedding = ckpt.config.embedding.clone();
            let embedder = Embedder::new(&params, &embedding, &corpus);
            let score = cluster_homogeneity(&embedder, Split::Test, None, cfg.seed)?;
            let body = serde_json::json!({
                "split": "test",
                "algorithm": "k-means, seeded distinct-point init, 100 iterations",
                "k": "number of distinct topics",
                "homogeneity": score,
            });
            write_text(&cli.out.join("cluster.json"), &serde_json::to_string_pretty(&body)?)?;
            println!("clustering homogeneity {score:.4} -> cluster.json");
        }
        Command::AnalyzeDistances => {
            let corpus = load_corpus_from(&cfg)?;
            inputs.push(cfg.require_corpus()?.clone());
            let vectors = match &cfg.word_vectors {
                Some(path) => {
                    inputs.push(path.clone());
                    crate::corpus::wordvec::load_word_vectors(
                        path,
                        &corpus.statement_vocab,
                        cfg.d_embed,
                        cfg.seed,
                    )?
                }
                None => {
                    let mut rng = rng_for(cfg.seed, Stream::WordVectorFallback);
                    crate::corpus::wordvec::init_matrix(
                        None,
                        &corpus.statement_vocab,
                        cfg.d_embed,
                        &mut rng,
                    )?
                }
            };
            let analysis =
                statement_distance_analysis(&corpus, &vectors, &cfg.distance_pools, cfg.seed)?;
            for w in &analysis.warnings {
                eprintln!("warning: {w}");
            }
            let mut csv = String::from("pool,d_within_min,d_within_avg,d_between_min,d_between_avg\n");
            for row in &analysis.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.pool,
                    row.d_within_min.map(|v| v.to_string()).unwrap_or_default(),
                    row.d_within_avg.map(|v| v.to_string()).unwrap_or_default(),
                    row.d_between_min,
                    row.d_between_avg
                ));
            }
            write_text(&cli.out.join("distances.csv"), &csv)?;
            println!("distance analysis over pools {:?} -> distances.csv", cfg.distance_pools);
        }
    }

    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&cli.out, name, &cfg, &input_refs)?;
    Ok(())
}

fn require_checkpoint(path: &Option<PathBuf>) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config("this command requires --checkpoint".to_string()))
}

/// Rank every task, fanning out across `workers` threads; results come back
/// in task order regardless of scheduling.
pub fn rank_all(
    embedder: &Embedder,
    tasks: &[RankingTask],
    workers: usize,
) -> Result<Vec<RankingOutcome>> {
    if workers <= 1 || tasks.len() < 2 {
        return tasks.iter().map(|t| rank_candidates(embedder, t)).collect();
    }
    let workers = workers.min(tasks.len());
    let chunk = tasks.len().div_ceil(workers);
    let mut slots: Vec<Option<Result<RankingOutcome>>> = Vec::new();
    slots.resize_with(tasks.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (w, task_chunk) in tasks.chunks(chunk).enumerate() {
            let start = w * chunk;
            handles.push(scope.spawn(move || {
                let mut out = Vec::with_capacity(task_chunk.len());
                for (offset, task) in task_chunk.iter().enumerate() {
                    out.push((start + offset, rank_candidates(embedder, task)));
                }
                out
            }));
        }
        for handle in handles {
            for (idx, result) in handle.join().expect("ranking worker panicked") {
                slots[idx] = Some(result);
            }
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every task ranked"))
        .collect()
}

fn metric_row(scope: &str, report: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}\n",
        scope,
        report.n_queries,
        report.rank.mean,
        report.rank.stderr,
        report.recall3.mean,
        report.recall3.stderr,
        report.recall10.mean,
        report.recall10.stderr,
        report.rank_avg.mean,
        report.rank_avg.stderr,
        report.rank_median.mean,
        report.rank_median.stderr
    )
}

fn metrics_csv(
    overall: &MetricsReport,
    per_topic: &std::collections::BTreeMap<String, MetricsReport>,
) -> String {
    let mut csv = String::from(
        "scope,n_queries,rank_mean,rank_stderr,recall3_mean,recall3_stderr,\
         recall10_mean,recall10_stderr,rankavg_mean,rankavg_stderr,\
         rankmedian_mean,rankmedian_stderr\n",
    );
    csv.push_str(&metric_row("overall", overall));
    for (topic, report) in per_topic {
        csv.push_str(&metric_row(topic, report));
    }
    csv
}

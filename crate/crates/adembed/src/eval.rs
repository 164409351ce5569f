//! Ranking-task assembly, metrics, clustering homogeneity, k-NN retrieval,
//! and the statement-distance analysis.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use numgrad::Tensor;

use crate::corpus::{Corpus, Split, VocabDomain};
use crate::error::{Error, Result};
use crate::model::{score, Embedder};
use crate::rng::{rng_for, Stream};
use crate::symbols::symbol_index;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// 47 negatives sampled from any other image.
    Standard,
    /// All candidates share the query's topic.
    Hard,
    /// Candidates are slogans instead of statements.
    Slogan,
}

pub const DEFAULT_POOL: usize = 50;

/// One query image and its candidate texts.
#[derive(Clone, Debug)]
pub struct RankingTask {
    /// Index of the query record in the corpus.
    pub query: usize,
    pub query_id: String,
    pub topic: String,
    pub candidates: Vec<Vec<String>>,
    /// Candidate positions holding the query's own texts.
    pub positives: Vec<usize>,
}

/// Candidate assembly: the query's own texts are the positives, negatives
/// are sampled without replacement from other images of the same split
/// (same topic only, in hard mode), and positions are shuffled. Queries
/// with no positive texts are skipped with a warning; short negative pools
/// shrink with a warning.
pub fn assemble_tasks(
    corpus: &Corpus,
    split: Split,
    mode: TaskMode,
    seed: u64,
    pool: usize,
) -> (Vec<RankingTask>, Vec<String>) {
    let mut rng = rng_for(seed, Stream::Tasks);
    let indices = corpus.split_indices(split);
    let mut tasks = Vec::new();
    let mut warnings = Vec::new();
    for &q in &indices {
        let record = &corpus.records[q];
        let positives: Vec<Vec<String>> = match mode {
            TaskMode::Standard | TaskMode::Hard => record.statements.clone(),
            TaskMode::Slogan => record.slogans.clone(),
        };
        if positives.is_empty() {
            warnings.push(format!("query '{}' skipped: no candidate texts", record.id));
            continue;
        }
        let mut negatives: Vec<&Vec<String>> = Vec::new();
        for &other in &indices {
            if other == q {
                continue;
            }
            let o = &corpus.records[other];
            if mode == TaskMode::Hard && o.topic != record.topic {
                continue;
            }
            let texts = match mode {
                TaskMode::Standard | TaskMode::Hard => &o.statements,
                TaskMode::Slogan => &o.slogans,
            };
            negatives.extend(texts.iter());
        }
        let need = pool.saturating_sub(positives.len());
        if negatives.len() < need {
            warnings.push(format!(
                "query '{}': only {} negatives available, wanted {need}",
                record.id,
                negatives.len()
            ));
        }
        negatives.shuffle(&mut rng);
        negatives.truncate(need);

        let mut candidates: Vec<(bool, Vec<String>)> = positives
            .into_iter()
            .map(|p| (true, p))
            .chain(negatives.into_iter().map(|n| (false, n.clone())))
            .collect();
        candidates.shuffle(&mut rng);
        let positive_idx: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, (is_pos, _))| *is_pos)
            .map(|(i, _)| i)
            .collect();
        tasks.push(RankingTask {
            query: q,
            query_id: record.id.clone(),
            topic: record.topic.clone(),
            candidates: candidates.into_iter().map(|(_, c)| c).collect(),
            positives: positive_idx,
        });
    }
    (tasks, warnings)
}

/// Candidate ordering for one task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RankingOutcome {
    /// Candidate indices sorted by descending score (ties toward the lower
    /// candidate index).
    pub order: Vec<usize>,
    /// 1-based positions of the positives within `order`, ascending.
    pub positions: Vec<usize>,
}

/// Score every candidate against the query image (inference mode) and sort.
pub fn rank_candidates(embedder: &Embedder, task: &RankingTask) -> Result<RankingOutcome> {
    let record = &embedder.corpus.records[task.query];
    let zplus = embedder.image_with_knowledge(record)?;
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(task.candidates.len());
    for (i, tokens) in task.candidates.iter().enumerate() {
        let t = embedder.text_embedding(tokens, VocabDomain::Statement)?;
        scored.push((i, score(zplus.data(), t.data())));
    }
    Ok(outcome_from_scores(&scored, &task.positives))
}

/// Ordering and positive positions from raw (index, score) pairs.
pub fn outcome_from_scores(scored: &[(usize, f64)], positives: &[usize]) -> RankingOutcome {
    let mut order: Vec<(usize, f64)> = scored.to_vec();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    let order: Vec<usize> = order.into_iter().map(|(i, _)| i).collect();
    let mut positions: Vec<usize> = positives
        .iter()
        .map(|p| order.iter().position(|o| o == p).expect("positive in order") + 1)
        .collect();
    positions.sort_unstable();
    RankingOutcome { order, positions }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    /// Standard error: sample standard deviation / sqrt(n).
    pub stderr: f64,
}

fn stat(values: &[f64]) -> MetricStat {
    let n = values.len();
    if n == 0 {
        return MetricStat::default();
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return MetricStat { mean, stderr: 0.0 };
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    MetricStat {
        mean,
        stderr: var.sqrt() / (n as f64).sqrt(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_queries: usize,
    /// Mean over queries of the best positive position.
    pub rank: MetricStat,
    /// Mean count of positives ranked in the top 3.
    pub recall3: MetricStat,
    /// Mean count of positives ranked in the top 10.
    pub recall10: MetricStat,
    /// Mean over queries of the per-query mean positive position.
    pub rank_avg: MetricStat,
    /// Mean over queries of the per-query median positive position.
    pub rank_median: MetricStat,
}

fn median(sorted: &[usize]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

pub fn compute_metrics(outcomes: &[RankingOutcome]) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(Error::Config("compute_metrics needs at least one outcome".to_string()));
    }
    let mut rank = Vec::with_capacity(outcomes.len());
    let mut recall3 = Vec::with_capacity(outcomes.len());
    let mut recall10 = Vec::with_capacity(outcomes.len());
    let mut rank_avg = Vec::with_capacity(outcomes.len());
    let mut rank_median = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        if o.positions.is_empty() {
            return Err(Error::Config("outcome without positive positions".to_string()));
        }
        rank.push(o.positions[0] as f64);
        recall3.push(o.positions.iter().filter(|&&p| p <= 3).count() as f64);
        recall10.push(o.positions.iter().filter(|&&p| p <= 10).count() as f64);
        rank_avg.push(o.positions.iter().sum::<usize>() as f64 / o.positions.len() as f64);
        rank_median.push(median(&o.positions));
    }
    Ok(MetricsReport {
        n_queries: outcomes.len(),
        rank: stat(&rank),
        recall3: stat(&recall3),
        recall10: stat(&recall10),
        rank_avg: stat(&rank_avg),
        rank_median: stat(&rank_median),
    })
}

/// Per-topic breakdown, keyed by topic name.
pub fn compute_metrics_by_topic(
    labeled: &[(String, RankingOutcome)],
) -> Result<BTreeMap<String, MetricsReport>> {
    let mut groups: BTreeMap<String, Vec<RankingOutcome>> = BTreeMap::new();
    for (topic, outcome) in labeled {
        groups.entry(topic.clone()).or_default().push(outcome.clone());
    }
    groups
        .into_iter()
        .map(|(topic, outcomes)| Ok((topic, compute_metrics(&outcomes)?)))
        .collect()
}

/// Mean Recall@3 under the given embedder, the model-selection metric used
/// during training.
pub fn mean_recall3(embedder: &Embedder, tasks: &[RankingTask]) -> Result<f64> {
    if tasks.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for task in tasks {
        let outcome = rank_candidates(embedder, task)?;
        total += outcome.positions.iter().filter(|&&p| p <= 3).count() as f64;
    }
    Ok(total / tasks.len() as f64)
}

// ---------------------------------------------------------------------------
// clustering

/// Lloyd iterations from seeded distinct-point initialization. Ties in the
/// nearest-centroid assignment break toward the lower cluster index; empty
/// clusters keep their previous centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<Vec<usize>> {
    if k == 0 || points.len() < k {
        return Err(Error::Config(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let mut rng = rng_for(seed, Stream::Kmeans);
    let mut init: Vec<usize> = (0..points.len()).collect();
    init.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = init[..k].iter().map(|&i| points[i].clone()).collect();
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d: f64 = p
                    .iter()
                    .zip(centroid)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, v) in sums[assignment[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = sums[c].clone();
            }
        }
    }
    Ok(assignment)
}

fn entropy_from_counts(counts: &BTreeMap<usize, usize>, total: usize) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// 1 − H(class|cluster)/H(class), with 1.0 when H(class) = 0.
pub fn homogeneity(classes: &[usize], clusters: &[usize]) -> Result<f64> {
    if classes.len() != clusters.len() || classes.is_empty() {
        return Err(Error::Config(
            "homogeneity needs equal-length nonempty labelings".to_string(),
        ));
    }
    let n = classes.len();
    let mut class_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in classes {
        *class_counts.entry(c).or_default() += 1;
    }
    let h_class = entropy_from_counts(&class_counts, n);
    if h_class == 0.0 {
        return Ok(1.0);
    }
    let mut by_cluster: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &cl) in clusters.iter().enumerate() {
        by_cluster.entry(cl).or_default().push(classes[i]);
    }
    let mut h_conditional = 0.0;
    for members in by_cluster.values() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in members {
            *counts.entry(c).or_default() += 1;
        }
        let weight = members.len() as f64 / n as f64;
        h_conditional += weight * entropy_from_counts(&counts, members.len());
    }
    Ok(1.0 - h_conditional / h_class)
}

/// Embed a split's images, k-means them (k = distinct topics unless given),
/// and score topic homogeneity.
pub fn cluster_homogeneity(
    embedder: &Embedder,
    split: Split,
    k: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let indices = embedder.corpus.split_indices(split);
    let mut topics: Vec<String> = Vec::new();
    let mut classes = Vec::with_capacity(indices.len());
    let mut points = Vec::with_capacity(indices.len());
    for &i in &indices {
        let record = &embedder.corpus.records[i];
        let class = match topics.iter().position(|t| t == &record.topic) {
            Some(p) => p,
            None => {
                topics.push(record.topic.clone());
                topics.len() - 1
            }
        };
        classes.push(class);
        points.push(embedder.image_with_knowledge(record)?.data().to_vec());
    }
    let k = k.unwrap_or(topics.len());
    let clusters = kmeans(&points, k, seed, 100)?;
    homogeneity(&classes, &clusters)
}

// ---------------------------------------------------------------------------
// k-NN retrieval

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnTargets {
    /// All region embeddings of a split; hit ids are "record_id#region".
    Regions(Split),
    /// A vocabulary's embedding table; hit ids are the tokens.
    Words(VocabDomain),
}

#[derive(Clone, Debug, Serialize)]
pub struct KnnHit {
    pub id: String,
    pub distance: f64,
}

/// Nearest targets to a query word's embedding, smallest squared distance
/// first, ties kept in stable id order.
pub fn knn_retrieve(
    embedder: &Embedder,
    query_word: &str,
    query_domain: VocabDomain,
    targets: KnnTargets,
    top_n: usize,
) -> Result<Vec<KnnHit>> {
    let params = embedder.params;
    let corpus = embedder.corpus;
    let query_idx = match query_domain {
        VocabDomain::Statement => corpus
            .statement_vocab
            .known_index_of(query_word)
            .filter(|&i| i != 0),
        VocabDomain::Caption => corpus
            .caption_vocab
            .known_index_of(query_word)
            .filter(|&i| i != 0),
        VocabDomain::Symbol => symbol_index(query_word),
    }
    .ok_or_else(|| Error::UnknownQueryWord {
        word: query_word.to_string(),
    })?;
    let table = params
        .store
        .get(crate::model::ModelParams::table_name(query_domain))?;
    let query: Vec<f64> = table.row(query_idx).to_vec();

    let mut hits: Vec<KnnHit> = Vec::new();
    match targets {
        KnnTargets::Regions(split) => {
            for &i in &corpus.split_indices(split) {
                let record = &corpus.records[i];
                if record.region_count == 0 {
                    continue;
                }
                let regions = embedder.embed_regions(record)?;
                for r in 0..regions.shape()[0] {
                    let d: f64 = regions
                        .row(r)
                        .iter()
                        .zip(&query)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    hits.push(KnnHit {
                        id: format!("{}#{r}", record.id),
                        distance: d,
                    });
                }
            }
        }
        KnnTargets::Words(domain) => {
            let table = params
                .store
                .get(crate::model::ModelParams::table_name(domain))?;
            let tokens: Vec<&str> = match domain {
                VocabDomain::Statement => corpus
                    .statement_vocab
                    .tokens()
                    .iter()
                    .map(String::as_str)
                    .collect(),
                VocabDomain::Caption => corpus
                    .caption_vocab
                    .tokens()
                    .iter()
                    .map(String::as_str)
                    .collect(),
                VocabDomain::Symbol => crate::symbols::SYMBOL_NAMES.to_vec(),
            };
            let skip_unknown = domain != VocabDomain::Symbol;
            for (w, token) in tokens.iter().enumerate() {
                if skip_unknown && w == 0 {
                    continue;
                }
                let d: f64 = table
                    .row(w)
                    .iter()
                    .zip(&query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                hits.push(KnnHit {
                    id: token.to_string(),
                    distance: d,
                });
            }
        }
    }
    hits.sort_by(|a, b| a.distance.partial_cmp(&b.distance).expect("finite distances"));
    hits.truncate(top_n);
    Ok(hits)
}

// ---------------------------------------------------------------------------
// statement-distance analysis

#[derive(Clone, Debug, Serialize)]
pub struct DistanceRow {
    pub pool: usize,
    pub d_within_min: Option<f64>,
    pub d_within_avg: Option<f64>,
    pub d_between_min: f64,
    pub d_between_avg: f64,
}

#[derive(Clone, Debug)]
pub struct DistanceAnalysis {
    pub rows: Vec<DistanceRow>,
    /// Per image, D_between^min for each pool (pools in `rows` order).
    pub per_image_between_min: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

fn mean_embedding(vectors: &Tensor, indices: &[usize]) -> Vec<f64> {
    let d = vectors.shape()[1];
    let mut out = vec![0.0; d];
    for &i in indices {
        for (o, v) in out.iter_mut().zip(vectors.row(i)) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= indices.len() as f64;
    }
    out
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Within- and between-image squared distances of mean word-vector
/// statement embeddings, for nested candidate pools. Each image's foreign
/// statements are sampled once for the largest pool; smaller pools take
/// prefixes, so D_between^min is nonincreasing in pool size per image.
pub fn statement_distance_analysis(
    corpus: &Corpus,
    vectors: &Tensor,
    pools: &[usize],
    seed: u64,
) -> Result<DistanceAnalysis> {
    if pools.is_empty() {
        return Err(Error::Config("no pool sizes given".to_string()));
    }
    for &p in pools {
        if p <= 3 {
            return Err(Error::Config(format!("pool size {p} must exceed 3")));
        }
    }
    let mut warnings = Vec::new();
    let mut rng = rng_for(seed, Stream::DistancePools);

    let embeddings: Vec<Vec<Vec<f64>>> = corpus
        .records
        .iter()
        .map(|r| {
            r.statements
                .iter()
                .map(|s| mean_embedding(vectors, &corpus.statement_vocab.indices(s)))
                .collect()
        })
        .collect();

    let with_statements: Vec<usize> = (0..corpus.records.len())
        .filter(|&i| !corpus.records[i].statements.is_empty())
        .collect();
    if with_statements.is_empty() {
        return Err(Error::Config("no records with statements".to_string()));
    }

    // within-image distances (pool-size independent)
    let mut within_min = Vec::new();
    let mut within_avg = Vec::new();
    for &i in &with_statements {
        let e = &embeddings[i];
        if e.len() < 2 {
            continue;
        }
        let mut min_d = f64::INFINITY;
        let mut sum = 0.0;
        let mut count = 0usize;
        for a in 0..e.len() {
            for b in (a + 1)..e.len() {
                let d = sq(&e[a], &e[b]);
                min_d = min_d.min(d);
                sum += d;
                count += 1;
            }
        }
        within_min.push(min_d);
        within_avg.push(sum / count as f64);
    }
    let (d_within_min, d_within_avg) = if within_min.is_empty() {
        warnings
            .push("no images with two or more statements; within-distances absent".to_string());
        (None, None)
    } else {
        let n = within_min.len() as f64;
        (
            Some(within_min.iter().sum::<f64>() / n),
            Some(within_avg.iter().sum::<f64>() / n),
        )
    };

    // between-image distances over nested sampled pools
    let max_need = pools.iter().max().unwrap() - 3;
    let mut per_image_between_min = Vec::new();
    let mut between_min_sums = vec![0.0; pools.len()];
    let mut between_avg_sums = vec![0.0; pools.len()];
    let mut short_pool_warned = false;
    for &i in &with_statements {
        let mut foreign: Vec<(usize, usize)> = Vec::new();
        for &j in &with_statements {
            if j == i {
                continue;
            }
            for s in 0..embeddings[j].len() {
                foreign.push((j, s));
            }
        }
        if foreign.len() < max_need && !short_pool_warned {
            warnings.push(format!(
                "only {} foreign statements available for pool {}",
                foreign.len(),
                max_need + 3
            ));
            short_pool_warned = true;
        }
        foreign.shuffle(&mut rng);
        foreign.truncate(max_need);

        let own = &embeddings[i];
        let mut mins = Vec::with_capacity(pools.len());
        for (p_idx, &pool) in pools.iter().enumerate() {
            let take = (pool - 3).min(foreign.len());
            let mut min_d = f64::INFINITY;
            let mut sum = 0.0;
            let mut count = 0usize;
            for &(j, s) in &foreign[..take] {
                for a in own {
                    let d = sq(a, &embeddings[j][s]);
                    min_d = min_d.min(d);
                    sum += d;
                    count += 1;
                }
            }
            if count == 0 {
                min_d = f64::NAN;
            }
            mins.push(min_d);
            between_min_sums[p_idx] += min_d;
            between_avg_sums[p_idx] += if count > 0 { sum / count as f64 } else { f64::NAN };
        }
        per_image_between_min.push(mins);
    }

    let n_images = per_image_between_min.len() as f64;
    let rows = pools
        .iter()
        .enumerate()
        .map(|(p_idx, &pool)| DistanceRow {
            pool,
            d_within_min,
            d_within_avg,
            d_between_min: between_min_sums[p_idx] / n_images,
            d_between_avg: between_avg_sums[p_idx] / n_images,
        })
        .collect();
    Ok(DistanceAnalysis {
        rows,
        per_image_between_min,
        warnings,
    })
}

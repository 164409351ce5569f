//! Hard-negative mining and the combined training loss.
//!
//! Mining runs on plain (unmasked) distances between the evaluated batch
//! embeddings and treats them as constants: no gradient flows through the
//! selection. Only the mined pairs become graph nodes, each a masked
//! squared distance feeding a hinge.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numgrad::{Kernel, NodeId};

use crate::corpus::{Batch, Corpus};
use crate::error::{Error, Result};
use crate::model::{
    BatchGraph, EmbeddingConfig, KbMode, ModelParams, P_T_SYM, P_T_TOPIC, P_W, P_WA,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Symbols,
    Topics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Triplet margin.
    pub margin: f64,
    /// Hard negatives mined per anchor.
    pub kprime: usize,
    /// Training batch size.
    pub batch_size: usize,
    /// Weight on the symbol and caption constraint terms.
    pub constraint_weight: f64,
    /// Which labels anchor the constraint loss.
    pub label_source: LabelSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            kprime: 32,
            batch_size: 128,
            constraint_weight: 0.1,
            label_source: LabelSource::Symbols,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".to_string()));
        }
        if self.kprime == 0 || self.kprime > self.batch_size - 1 {
            return Err(Error::Config(format!(
                "kprime must be in [1, {}], got {}",
                self.batch_size - 1,
                self.kprime
            )));
        }
        if self.constraint_weight < 0.0 {
            return Err(Error::Config("constraint weight must be nonnegative".to_string()));
        }
        Ok(())
    }
}

/// The k' eligible indices with smallest distance; ties break toward the
/// lower index. Self and forbidden indices are never eligible. Returns fewer
/// than k' (possibly none) when the pool is small.
pub fn mine_negatives(
    distances: &[f64],
    self_index: usize,
    forbidden: &[usize],
    kprime: usize,
) -> Vec<usize> {
    let mut eligible: Vec<usize> = (0..distances.len())
        .filter(|&j| j != self_index && !forbidden.contains(&j))
        .collect();
    eligible.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    eligible.truncate(kprime);
    eligible.sort_unstable();
    eligible
}

/// Per-anchor mined index sets for one batch.
#[derive(Clone, Debug, Default)]
pub struct MiningResult {
    pub image_to_text: Vec<Vec<usize>>,
    pub text_to_image: Vec<Vec<usize>>,
    pub label_to_image: Vec<Vec<usize>>,
    pub label_to_text: Vec<Vec<usize>>,
    pub caption_to_image: Vec<Vec<usize>>,
    pub caption_to_text: Vec<Vec<usize>>,
}

impl MiningResult {
    pub fn pair_count(&self) -> usize {
        [
            &self.image_to_text,
            &self.text_to_image,
            &self.label_to_image,
            &self.label_to_text,
            &self.caption_to_image,
            &self.caption_to_text,
        ]
        .iter()
        .map(|sets| sets.iter().map(Vec::len).sum::<usize>())
        .sum()
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Memoized masked-distance nodes so both triplet directions share the same
/// realized distance for a given embedding pair.
struct DistMemo {
    nodes: HashMap<(NodeId, NodeId), NodeId>,
}

impl DistMemo {
    fn new() -> Self {
        DistMemo {
            nodes: HashMap::new(),
        }
    }

    fn get(
        &mut self,
        bg: &mut BatchGraph,
        a: NodeId,
        b: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let key = (a.min(b), a.max(b));
        if let Some(&id) = self.nodes.get(&key) {
            return Ok(id);
        }
        let id = bg.distance(a, b, rng)?;
        self.nodes.insert(key, id);
        Ok(id)
    }
}

/// Both directions of the batch triplet loss (image anchors ranking
/// statements and statement anchors ranking images). Appends hinge nodes to
/// `terms`, records the mined sets, and returns nothing else.
#[allow(clippy::too_many_arguments)]
fn triplet_terms(
    bg: &mut BatchGraph,
    rng: &mut Option<&mut ChaCha8Rng>,
    images: &[NodeId],
    texts: &[NodeId],
    image_vals: &[Vec<f64>],
    text_vals: &[Vec<f64>],
    cfg: &LossConfig,
    terms: &mut Vec<NodeId>,
    mining: &mut MiningResult,
) -> Result<()> {
    let k = images.len();
    let mut memo = DistMemo::new();
    for i in 0..k {
        let row: Vec<f64> = (0..k).map(|j| sqdist(&image_vals[i], &text_vals[j])).collect();
        let mined = mine_negatives(&row, i, &[], cfg.kprime);
        if !mined.is_empty() {
            let pos = memo.get(bg, images[i], texts[i], rng.as_deref_mut())?;
            for &j in &mined {
                let neg = memo.get(bg, images[i], texts[j], rng.as_deref_mut())?;
                let diff = bg.sub(pos, neg)?;
                terms.push(bg.graph.apply(Kernel::Hinge { margin: cfg.margin }, &[diff])?);
            }
        }
        mining.image_to_text.push(mined);
    }
    for i in 0..k {
        let col: Vec<f64> = (0..k).map(|j| sqdist(&text_vals[i], &image_vals[j])).collect();
        let mined = mine_negatives(&col, i, &[], cfg.kprime);
        if !mined.is_empty() {
            let pos = memo.get(bg, images[i], texts[i], rng.as_deref_mut())?;
            for &j in &mined {
                let neg = memo.get(bg, texts[i], images[j], rng.as_deref_mut())?;
                let diff = bg.sub(pos, neg)?;
                terms.push(bg.graph.apply(Kernel::Hinge { margin: cfg.margin }, &[diff])?);
            }
        }
        mining.text_to_image.push(mined);
    }
    Ok(())
}

/// One anchored constraint direction: anchor pulls its own target and pushes
/// mined negatives. Returns the mined set.
#[allow(clippy::too_many_arguments)]
fn anchored_terms(
    bg: &mut BatchGraph,
    rng: &mut Option<&mut ChaCha8Rng>,
    anchor: NodeId,
    anchor_val: &[f64],
    i: usize,
    forbidden: &[usize],
    targets: &[NodeId],
    target_vals: &[Vec<f64>],
    cfg: &LossConfig,
    terms: &mut Vec<NodeId>,
) -> Result<Vec<usize>> {
    let dists: Vec<f64> = target_vals.iter().map(|t| sqdist(anchor_val, t)).collect();
    let mined = mine_negatives(&dists, i, forbidden, cfg.kprime);
    if mined.is_empty() {
        return Ok(mined);
    }
    let pos = bg.distance(anchor, targets[i], rng.as_deref_mut())?;
    for &j in &mined {
        let neg = bg.distance(anchor, targets[j], rng.as_deref_mut())?;
        let diff = bg.sub(pos, neg)?;
        terms.push(bg.graph.apply(Kernel::Hinge { margin: cfg.margin }, &[diff])?);
    }
    Ok(mined)
}

fn sum_terms(bg: &mut BatchGraph, terms: &[NodeId]) -> Result<NodeId> {
    if terms.is_empty() {
        return Ok(bg.graph.scalar_constant(0.0)?);
    }
    Ok(bg.graph.apply(
        Kernel::ScalarWeightedSum {
            coeffs: vec![1.0; terms.len()],
        },
        terms,
    )?)
}

/// Evaluated loss over one batch, with its graph kept for backward().
pub struct LossResult {
    pub bg: numgrad::ComputeGraph,
    pub total: f64,
    pub main: f64,
    pub symbol: f64,
    pub caption: f64,
    pub decay: f64,
    pub mining: MiningResult,
    pub bn_nodes: Vec<(String, NodeId)>,
}

/// The combined loss: main triplet term over z+y vs statements, weighted
/// symbol- and caption-anchored constraint terms, and weight decay. The
/// caller controls freezing through `trainable`.
#[allow(clippy::too_many_arguments)]
pub fn final_loss(
    corpus: &Corpus,
    batch: &Batch,
    params: &ModelParams,
    ecfg: &EmbeddingConfig,
    lcfg: &LossConfig,
    trainable: &BTreeSet<String>,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossResult> {
    lcfg.validate()?;
    ecfg.validate()?;
    let mut bg = BatchGraph::new(params, ecfg, training, trainable);
    let mut rng_opt: Option<&mut ChaCha8Rng> = if training { Some(rng) } else { None };
    let term = |t: &'static str| move |e: Error| match e {
        Error::Numgrad(source) => Error::LossTerm { term: t, source },
        other => other,
    };

    // forward: image embeddings, knowledge vectors, statement embeddings
    let members: Vec<&crate::corpus::AdRecord> =
        batch.records.iter().map(|&i| &corpus.records[i]).collect();
    let z = bg
        .image_embeddings(&members, rng_opt.as_deref_mut())
        .map_err(term("image-embedding"))?;
    let y = bg
        .knowledge_vectors(&corpus.caption_vocab, &members)
        .map_err(term("knowledge-branch"))?;
    let mut zplus = Vec::with_capacity(z.len());
    for (zi, yi) in z.iter().zip(&y) {
        let id = match yi {
            Some(k) => bg.add(*zi, *k).map_err(term("knowledge-branch"))?,
            None => *zi,
        };
        zplus.push(id);
    }
    let mut texts = Vec::with_capacity(batch.len());
    for (pos, &idx) in batch.records.iter().enumerate() {
        let record = &corpus.records[idx];
        let stmt = &record.statements[batch.statement_choice[pos]];
        let indices = corpus.statement_vocab.indices(stmt);
        let t = bg
            .text_embedding(&indices, crate::model::P_T_STMT, rng_opt.as_deref_mut())
            .map_err(term("text-embedding"))?;
        texts.push(t);
    }

    let zplus_vals: Vec<Vec<f64>> = zplus.iter().map(|&id| bg.graph.value(id).data().to_vec()).collect();
    let text_vals: Vec<Vec<f64>> = texts.iter().map(|&id| bg.graph.value(id).data().to_vec()).collect();

    let mut mining = MiningResult::default();

    // main triplet term
    let mut main_terms = Vec::new();
    triplet_terms(
        &mut bg,
        &mut rng_opt,
        &zplus,
        &texts,
        &zplus_vals,
        &text_vals,
        lcfg,
        &mut main_terms,
        &mut mining,
    )
    .map_err(term("main-triplet"))?;

    // label-anchored constraint term
    let mut symbol_terms = Vec::new();
    if lcfg.constraint_weight > 0.0 {
        for (pos, &idx) in batch.records.iter().enumerate() {
            let record = &corpus.records[idx];
            let (label_idx, table, annotated): (Option<usize>, &str, Vec<usize>) =
                match lcfg.label_source {
                    LabelSource::Symbols => {
                        let chosen = match rng_opt.as_deref_mut() {
                            Some(r) => record.symbols.choose(r),
                            None => record.symbols.first(),
                        };
                        match chosen {
                            None => (None, P_T_SYM, Vec::new()),
                            Some(name) => {
                                let annotated = batch
                                    .records
                                    .iter()
                                    .enumerate()
                                    .filter(|(_, &j)| corpus.records[j].symbols.contains(name))
                                    .map(|(p, _)| p)
                                    .collect();
                                (
                                    crate::symbols::symbol_index(name),
                                    P_T_SYM,
                                    annotated,
                                )
                            }
                        }
                    }
                    LabelSource::Topics => {
                        let annotated = batch
                            .records
                            .iter()
                            .enumerate()
                            .filter(|(_, &j)| corpus.records[j].topic == record.topic)
                            .map(|(p, _)| p)
                            .collect();
                        (corpus.topic_index(&record.topic), P_T_TOPIC, annotated)
                    }
                };
            let Some(label_idx) = label_idx else {
                mining.label_to_image.push(Vec::new());
                mining.label_to_text.push(Vec::new());
                continue;
            };
            let anchor = bg
                .text_embedding(&[label_idx], table, rng_opt.as_deref_mut())
                .map_err(term("label-constraint"))?;
            let anchor_val = bg.graph.value(anchor).data().to_vec();
            let mined_z = anchored_terms(
                &mut bg,
                &mut rng_opt,
                anchor,
                &anchor_val,
                pos,
                &annotated,
                &zplus,
                &zplus_vals,
                lcfg,
                &mut symbol_terms,
            )
            .map_err(term("label-constraint"))?;
            let mined_t = anchored_terms(
                &mut bg,
                &mut rng_opt,
                anchor,
                &anchor_val,
                pos,
                &annotated,
                &texts,
                &text_vals,
                lcfg,
                &mut symbol_terms,
            )
            .map_err(term("label-constraint"))?;
            mining.label_to_image.push(mined_z);
            mining.label_to_text.push(mined_t);
        }
    }

    // caption-anchored constraint term
    let mut caption_terms = Vec::new();
    if lcfg.constraint_weight > 0.0 {
        for (pos, &idx) in batch.records.iter().enumerate() {
            let record = &corpus.records[idx];
            if record.caption_words_ranked.is_empty() {
                mining.caption_to_image.push(Vec::new());
                mining.caption_to_text.push(Vec::new());
                continue;
            }
            let indices = corpus.caption_vocab.indices(&record.caption_words_ranked);
            let anchor = bg
                .text_embedding(&indices, crate::model::P_T_CAP, rng_opt.as_deref_mut())
                .map_err(term("caption-constraint"))?;
            let anchor_val = bg.graph.value(anchor).data().to_vec();
            let mined_z = anchored_terms(
                &mut bg,
                &mut rng_opt,
                anchor,
                &anchor_val,
                pos,
                &[],
                &zplus,
                &zplus_vals,
                lcfg,
                &mut caption_terms,
            )
            .map_err(term("caption-constraint"))?;
            let mined_t = anchored_terms(
                &mut bg,
                &mut rng_opt,
                anchor,
                &anchor_val,
                pos,
                &[],
                &texts,
                &text_vals,
                lcfg,
                &mut caption_terms,
            )
            .map_err(term("caption-constraint"))?;
            mining.caption_to_image.push(mined_z);
            mining.caption_to_text.push(mined_t);
        }
    }

    // weight decay over the nets and whichever embedding tables are in play
    let mut decay_nodes = Vec::new();
    let mut decay_coeffs = Vec::new();
    let bound: Vec<String> = bg.bound_names().cloned().collect();
    for name in [P_W, P_WA] {
        if bound.iter().any(|b| b == name) {
            decay_nodes.push(bg.squared_norm(name).map_err(term("weight-decay"))?);
            decay_coeffs.push(ecfg.net_weight_decay);
        }
    }
    for name in [
        crate::model::P_T_STMT,
        crate::model::P_T_CAP,
        P_T_SYM,
        P_T_TOPIC,
    ] {
        if bound.iter().any(|b| b == name) {
            decay_nodes.push(bg.squared_norm(name).map_err(term("weight-decay"))?);
            decay_coeffs.push(ecfg.table_weight_decay);
        }
    }

    let main_node = sum_terms(&mut bg, &main_terms).map_err(term("main-triplet"))?;
    let symbol_node = sum_terms(&mut bg, &symbol_terms).map_err(term("label-constraint"))?;
    let caption_node = sum_terms(&mut bg, &caption_terms).map_err(term("caption-constraint"))?;
    let decay_node = if decay_nodes.is_empty() {
        bg.graph.scalar_constant(0.0).map_err(Error::from)?
    } else {
        bg.graph
            .apply(
                Kernel::ScalarWeightedSum {
                    coeffs: decay_coeffs,
                },
                &decay_nodes,
            )
            .map_err(|e| term("weight-decay")(e.into()))?
    };
    let total = bg
        .graph
        .apply(
            Kernel::ScalarWeightedSum {
                coeffs: vec![1.0, lcfg.constraint_weight, lcfg.constraint_weight, 1.0],
            },
            &[main_node, symbol_node, caption_node, decay_node],
        )
        .map_err(|e| term("total")(e.into()))?;
    bg.graph.set_loss(total)?;

    Ok(LossResult {
        total: bg.graph.value(total).scalar_value()?,
        main: bg.graph.value(main_node).scalar_value()?,
        symbol: bg.graph.value(symbol_node).scalar_value()?,
        caption: bg.graph.value(caption_node).scalar_value()?,
        decay: bg.graph.value(decay_node).scalar_value()?,
        mining,
        bn_nodes: bg.bn_nodes.clone(),
        bg: bg.graph,
    })
}

/// Standalone batch triplet loss over raw embedding rows (no dropout), for
/// direct use and testing.
pub fn triplet_loss(z: &[Vec<f64>], t: &[Vec<f64>], cfg: &LossConfig) -> Result<(f64, usize)> {
    let frozen = BTreeSet::new();
    let params = empty_params(z.first().map_or(1, Vec::len));
    let ecfg = EmbeddingConfig {
        kb_mode: KbMode::Off,
        ..EmbeddingConfig::default()
    };
    let mut bg = BatchGraph::new(&params, &ecfg, false, &frozen);
    let z_ids = constant_rows(&mut bg, z)?;
    let t_ids = constant_rows(&mut bg, t)?;
    let mut terms = Vec::new();
    let mut mining = MiningResult::default();
    let mut none: Option<&mut ChaCha8Rng> = None;
    triplet_terms(
        &mut bg,
        &mut none,
        &z_ids,
        &t_ids,
        z,
        t,
        cfg,
        &mut terms,
        &mut mining,
    )?;
    let count = terms.len();
    let node = sum_terms(&mut bg, &terms)?;
    Ok((bg.graph.value(node).scalar_value()?, count))
}

/// Standalone label-anchored constraint loss over raw embeddings. `anchors`
/// holds the chosen label embedding per record (None = record skipped) and
/// `annotated` the batch positions sharing that record's chosen label.
pub fn label_constraint_loss(
    anchors: &[Option<Vec<f64>>],
    annotated: &[Vec<usize>],
    z: &[Vec<f64>],
    t: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<(f64, usize)> {
    anchored_constraint_loss(anchors, annotated, z, t, cfg)
}

/// Standalone caption-anchored constraint loss: negatives are mined among
/// all other batch members.
pub fn caption_constraint_loss(
    anchors: &[Option<Vec<f64>>],
    z: &[Vec<f64>],
    t: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<(f64, usize)> {
    let annotated = vec![Vec::new(); anchors.len()];
    anchored_constraint_loss(anchors, &annotated, z, t, cfg)
}

fn anchored_constraint_loss(
    anchors: &[Option<Vec<f64>>],
    annotated: &[Vec<usize>],
    z: &[Vec<f64>],
    t: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<(f64, usize)> {
    let frozen = BTreeSet::new();
    let params = empty_params(z.first().map_or(1, Vec::len));
    let ecfg = EmbeddingConfig {
        kb_mode: KbMode::Off,
        ..EmbeddingConfig::default()
    };
    let mut bg = BatchGraph::new(&params, &ecfg, false, &frozen);
    let z_ids = constant_rows(&mut bg, z)?;
    let t_ids = constant_rows(&mut bg, t)?;
    let mut terms = Vec::new();
    let mut none: Option<&mut ChaCha8Rng> = None;
    for (i, anchor) in anchors.iter().enumerate() {
        let Some(anchor_val) = anchor else { continue };
        let anchor_id = bg.graph.constant(numgrad::Tensor::vector(anchor_val))?;
        anchored_terms(
            &mut bg,
            &mut none,
            anchor_id,
            anchor_val,
            i,
            &annotated[i],
            &z_ids,
            z,
            cfg,
            &mut terms,
        )?;
        anchored_terms(
            &mut bg,
            &mut none,
            anchor_id,
            anchor_val,
            i,
            &annotated[i],
            &t_ids,
            t,
            cfg,
            &mut terms,
        )?;
    }
    let count = terms.len();
    let node = sum_terms(&mut bg, &terms)?;
    Ok((bg.graph.value(node).scalar_value()?, count))
}

fn constant_rows(bg: &mut BatchGraph, rows: &[Vec<f64>]) -> Result<Vec<NodeId>> {
    rows.iter()
        .map(|r| Ok(bg.graph.constant(numgrad::Tensor::vector(r))?))
        .collect()
}

/// Placeholder params for the standalone loss helpers, which never bind
/// model tensors.
fn empty_params(d_embed: usize) -> ModelParams {
    ModelParams {
        store: numgrad::ParamStore::new(),
        dims: crate::model::ModelDims {
            d_feat: 1,
            d_embed,
            statement_vocab: 1,
            caption_vocab: 1,
            n_topics: 0,
        },
        rule_words: None,
    }
}

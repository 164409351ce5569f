//! Forward computations: region/image/text embeddings, attention pooling,
//! knowledge-branch distributions, scoring, and the object-symbol knowledge
//! base.
//!
//! Training-time forwards are assembled on a compute graph through
//! [`BatchGraph`]; inference entry points build one-record graphs in
//! inference mode (running batch-norm statistics, no dropout), so both paths
//! share the same kernels.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numgrad::{ComputeGraph, Kernel, NodeId, ParamStore, Tensor};

use crate::corpus::wordvec::{init_matrix, WordVectorTable};
use crate::corpus::{AdRecord, Corpus, VocabDomain, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{rng_for, uniform_init, Stream};
use crate::symbols::{SYMBOL_COUNT, SYMBOL_NAMES};

pub const P_W: &str = "w";
pub const P_WA: &str = "w_a";
pub const P_T_STMT: &str = "t_stmt";
pub const P_T_CAP: &str = "t_cap";
pub const P_T_SYM: &str = "t_sym";
pub const P_T_TOPIC: &str = "t_topic";
pub const P_U_SYMB: &str = "u_symb";
pub const P_ALPHA_SYM: &str = "alpha_sym";
pub const P_ALPHA_OBJ: &str = "alpha_obj";
pub const BN_IMG: &str = "bn_img";
pub const BN_ATT: &str = "bn_att";

pub const RULE_WORDS_PER_SYMBOL: usize = 5;
pub const CAPTION_WORDS_USED: usize = 3;
const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageMode {
    /// Project the whole-image feature (no regions).
    Whole,
    /// Mean-pool region embeddings.
    RegionMean,
    /// Attention-weighted sum of region embeddings.
    RegionAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KbMode {
    Off,
    Symbols,
    Objects,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub image_mode: ImageMode,
    pub kb_mode: KbMode,
    /// Dropout keep probability on input features.
    pub input_keep: f64,
    /// Dropout keep probability on embedding-table rows.
    pub table_keep: f64,
    /// Dropout keep probability on squared-distance components.
    pub distance_keep: f64,
    pub net_weight_decay: f64,
    pub table_weight_decay: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            image_mode: ImageMode::RegionAttention,
            kb_mode: KbMode::Off,
            input_keep: 0.7,
            table_keep: 0.7,
            distance_keep: 0.5,
            net_weight_decay: 1e-6,
            table_weight_decay: 1e-8,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, keep) in [
            ("input_keep", self.input_keep),
            ("table_keep", self.table_keep),
            ("distance_keep", self.distance_keep),
        ] {
            if !(keep > 0.0 && keep <= 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1], got {keep}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_feat: usize,
    pub d_embed: usize,
    pub statement_vocab: usize,
    pub caption_vocab: usize,
    pub n_topics: usize,
}

/// All learnable tables plus the rule matrix of the object knowledge base.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub store: ParamStore,
    pub dims: ModelDims,
    /// Per symbol, the caption-vocabulary indices of its five rule words
    /// (`None` until the knowledge base has been built).
    pub rule_words: Option<Vec<Vec<usize>>>,
}

impl ModelParams {
    /// Seeded initialization. Statement and caption tables take pretrained
    /// rows where available; everything else follows the uniform [-0.08,
    /// 0.08] scheme, with batch-norm scale 1 / shift 0 and zeroed classifier
    /// and knowledge scalars.
    pub fn init(
        corpus: &Corpus,
        d_embed: usize,
        word_vectors: Option<&WordVectorTable>,
        seed: u64,
    ) -> Result<ModelParams> {
        let dims = ModelDims {
            d_feat: corpus.d_feat,
            d_embed,
            statement_vocab: corpus.statement_vocab.len(),
            caption_vocab: corpus.caption_vocab.len(),
            n_topics: corpus.train_topics.len(),
        };
        let mut rng = rng_for(seed, Stream::ParamInit);
        let mut store = ParamStore::new();

        let uniform = |rng: &mut ChaCha8Rng, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| uniform_init(rng)).collect();
            Tensor::from_vec(shape.to_vec(), data).expect("shape/data agree")
        };

        store.insert(P_W, uniform(&mut rng, &[dims.d_embed, dims.d_feat]));
        store.insert(P_WA, uniform(&mut rng, &[1, dims.d_feat]));
        for prefix in [BN_IMG, BN_ATT] {
            store.insert(&format!("{prefix}.scale"), Tensor::full(&[dims.d_feat], 1.0));
            store.insert(&format!("{prefix}.shift"), Tensor::zeros(&[dims.d_feat]));
            store.insert(&format!("{prefix}.mean"), Tensor::zeros(&[dims.d_feat]));
            store.insert(&format!("{prefix}.var"), Tensor::full(&[dims.d_feat], 1.0));
        }
        store.insert(
            P_T_STMT,
            init_matrix(word_vectors, &corpus.statement_vocab, d_embed, &mut rng)?,
        );
        store.insert(
            P_T_CAP,
            init_matrix(word_vectors, &corpus.caption_vocab, d_embed, &mut rng)?,
        );
        store.insert(P_T_SYM, uniform(&mut rng, &[SYMBOL_COUNT, d_embed]));
        if dims.n_topics > 0 {
            store.insert(P_T_TOPIC, uniform(&mut rng, &[dims.n_topics, d_embed]));
        }
        store.insert(P_U_SYMB, Tensor::zeros(&[SYMBOL_COUNT, dims.d_feat]));
        store.insert(P_ALPHA_SYM, Tensor::zeros(&[SYMBOL_COUNT]));
        store.insert(
            P_ALPHA_OBJ,
            Tensor::zeros(&[SYMBOL_COUNT, RULE_WORDS_PER_SYMBOL]),
        );
        Ok(ModelParams {
            store,
            dims,
            rule_words: None,
        })
    }

    pub fn table_name(domain: VocabDomain) -> &'static str {
        match domain {
            VocabDomain::Statement => P_T_STMT,
            VocabDomain::Caption => P_T_CAP,
            VocabDomain::Symbol => P_T_SYM,
        }
    }

    /// The bounded knowledge scalars: 2·sigmoid(raw), elementwise in (0, 2).
    pub fn bounded_alpha(&self, name: &str) -> Result<Vec<f64>> {
        let raw = self.store.get(name)?;
        Ok(raw
            .data()
            .iter()
            .map(|&r| 2.0 / (1.0 + (-r).exp()))
            .collect())
    }

    /// Dense 53 x V materialization of the rule matrix.
    pub fn u_obj_dense(&self) -> Result<Tensor> {
        let rules = self
            .rule_words
            .as_ref()
            .ok_or_else(|| Error::Config("object knowledge base not built".to_string()))?;
        let v = self.dims.caption_vocab;
        let mut data = vec![0.0; SYMBOL_COUNT * v];
        for (j, words) in rules.iter().enumerate() {
            for &w in words {
                data[j * v + w] = 1.0;
            }
        }
        Ok(Tensor::matrix(SYMBOL_COUNT, v, data)?)
    }
}

/// Graph assembly over a batch of records, in training or inference mode.
///
/// Parameter names in `trainable` are bound as graph parameters (they get
/// gradients); everything else enters as a constant snapshot, so frozen
/// tensors receive exactly zero gradient.
pub struct BatchGraph<'a> {
    pub graph: ComputeGraph,
    pub params: &'a ModelParams,
    pub config: &'a EmbeddingConfig,
    pub training: bool,
    trainable: &'a BTreeSet<String>,
    bound: BTreeMap<String, NodeId>,
    ones: BTreeMap<usize, NodeId>,
    /// Training-mode batch-norm nodes, (layer prefix, node id).
    pub bn_nodes: Vec<(String, NodeId)>,
}

impl<'a> BatchGraph<'a> {
    pub fn new(
        params: &'a ModelParams,
        config: &'a EmbeddingConfig,
        training: bool,
        trainable: &'a BTreeSet<String>,
    ) -> Self {
        BatchGraph {
            graph: ComputeGraph::new(),
            params,
            config,
            training,
            trainable,
            bound: BTreeMap::new(),
            ones: BTreeMap::new(),
            bn_nodes: Vec::new(),
        }
    }

    /// Parameter names bound so far (trainable or frozen).
    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    pub fn bind(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = if self.trainable.contains(name) {
            self.graph.param(name, &self.params.store)?
        } else {
            self.graph.constant(self.params.store.get(name)?.clone())?
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn ones(&mut self, len: usize) -> Result<NodeId> {
        if let Some(&id) = self.ones.get(&len) {
            return Ok(id);
        }
        let id = self.graph.constant(Tensor::full(&[len], 1.0))?;
        self.ones.insert(len, id);
        Ok(id)
    }

    /// Elementwise sum of two nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Ok(self.graph.apply(
            Kernel::ScalarWeightedSum {
                coeffs: vec![1.0, 1.0],
            },
            &[a, b],
        )?)
    }

    /// a − b.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        Ok(self.graph.apply(
            Kernel::ScalarWeightedSum {
                coeffs: vec![1.0, -1.0],
            },
            &[a, b],
        )?)
    }

    fn dropout(
        &mut self,
        x: NodeId,
        keep: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if !self.training || keep >= 1.0 {
            return Ok(x);
        }
        let rng = rng.expect("training-mode dropout needs an RNG");
        let shape = self.graph.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask_data: Vec<f64> = (0..n)
            .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.graph.constant(Tensor::from_vec(shape, mask_data)?)?;
        Ok(self.graph.apply(
            Kernel::Dropout {
                keep,
                training: true,
            },
            &[x, mask],
        )?)
    }

    /// BN -> input dropout -> linear projection over stacked feature rows.
    ///
    /// A batch-norm layer uses batch statistics only while its scale/shift
    /// are trainable; once frozen it normalizes with the running statistics,
    /// so phase-2 training neither perturbs nor depends on batch composition.
    fn feature_pipeline(
        &mut self,
        stacked: NodeId,
        bn_prefix: &str,
        weight: &str,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let scale_name = format!("{bn_prefix}.scale");
        let bn_training = self.training && self.trainable.contains(&scale_name);
        let scale = self.bind(&scale_name)?;
        let shift = self.bind(&format!("{bn_prefix}.shift"))?;
        let rmean = self.bind(&format!("{bn_prefix}.mean"))?;
        let rvar = self.bind(&format!("{bn_prefix}.var"))?;
        let bn = self.graph.apply(
            Kernel::BatchNorm {
                training: bn_training,
                eps: BN_EPS,
            },
            &[stacked, scale, shift, rmean, rvar],
        )?;
        if bn_training {
            self.bn_nodes.push((bn_prefix.to_string(), bn));
        }
        let keep = self.config.input_keep;
        let dropped = self.dropout(bn, keep, rng)?;
        let w = self.bind(weight)?;
        Ok(self.graph.apply(Kernel::Linear, &[w, dropped])?)
    }

    /// Image embeddings z for a set of records, sharing one batch-norm
    /// application across all stacked feature rows.
    pub fn image_embeddings(
        &mut self,
        records: &[&AdRecord],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<NodeId>> {
        let d = self.params.dims.d_feat;
        match self.config.image_mode {
            ImageMode::Whole => {
                let mut data = Vec::with_capacity(records.len() * d);
                for r in records {
                    data.extend_from_slice(&r.image_feature);
                }
                let stacked = self
                    .graph
                    .constant(Tensor::matrix(records.len(), d, data)?)?;
                let projected =
                    self.feature_pipeline(stacked, BN_IMG, P_W, rng.as_deref_mut())?;
                let d_embed = self.params.dims.d_embed;
                records
                    .iter()
                    .enumerate()
                    .map(|(i, _)| self.take_row(projected, i, d_embed))
                    .collect()
            }
            ImageMode::RegionMean | ImageMode::RegionAttention => {
                let mut data = Vec::new();
                let mut ranges = Vec::with_capacity(records.len());
                let mut offset = 0usize;
                for r in records {
                    if r.region_count == 0 {
                        return Err(Error::Config(format!(
                            "record '{}' has zero valid regions",
                            r.id
                        )));
                    }
                    for rf in r.region_features.iter().take(r.region_count) {
                        data.extend_from_slice(rf);
                    }
                    ranges.push((offset, r.region_count));
                    offset += r.region_count;
                }
                let stacked = self.graph.constant(Tensor::matrix(offset, d, data)?)?;
                let projected =
                    self.feature_pipeline(stacked, BN_IMG, P_W, rng.as_deref_mut())?;
                let attention = match self.config.image_mode {
                    ImageMode::RegionAttention => {
                        Some(self.feature_pipeline(stacked, BN_ATT, P_WA, rng)?)
                    }
                    _ => None,
                };
                let mut out = Vec::with_capacity(records.len());
                for &(start, count) in &ranges {
                    let rows: Vec<usize> = (start..start + count).collect();
                    let regions = self
                        .graph
                        .apply(Kernel::GatherRows { indices: rows.clone() }, &[projected])?;
                    let z = match attention {
                        None => self.graph.apply(Kernel::MeanRows, &[regions])?,
                        Some(att) => {
                            let scores = self
                                .graph
                                .apply(Kernel::GatherRows { indices: rows }, &[att])?;
                            let flat = self.graph.apply(
                                Kernel::Reshape { shape: vec![count] },
                                &[scores],
                            )?;
                            let alpha = self.graph.apply(Kernel::SoftmaxRow, &[flat])?;
                            self.graph
                                .apply(Kernel::WeightedSumRows, &[alpha, regions])?
                        }
                    };
                    out.push(z);
                }
                Ok(out)
            }
        }
    }

    fn take_row(&mut self, matrix: NodeId, row: usize, width: usize) -> Result<NodeId> {
        let picked = self
            .graph
            .apply(Kernel::GatherRows { indices: vec![row] }, &[matrix])?;
        Ok(self
            .graph
            .apply(Kernel::Reshape { shape: vec![width] }, &[picked])?)
    }

    /// Mean-pooled embedding of token indices from one table, with
    /// table-row dropout in training mode.
    pub fn text_embedding(
        &mut self,
        indices: &[usize],
        table: &str,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        if indices.is_empty() {
            return Err(Error::Config("text embedding needs at least one token".to_string()));
        }
        let table_id = self.bind(table)?;
        let rows = self.graph.apply(
            Kernel::GatherRows {
                indices: indices.to_vec(),
            },
            &[table_id],
        )?;
        let dropped = self.dropout(rows, self.config.table_keep, rng)?;
        Ok(self.graph.apply(Kernel::MeanRows, &[dropped])?)
    }

    /// Additive knowledge vector per record, `None` when the branch is off.
    pub fn knowledge_vectors(
        &mut self,
        caption_vocab: &Vocabulary,
        records: &[&AdRecord],
    ) -> Result<Vec<Option<NodeId>>> {
        match self.config.kb_mode {
            KbMode::Off => Ok(vec![None; records.len()]),
            KbMode::Symbols => {
                let u = self.bind(P_U_SYMB)?;
                let raw = self.bind(P_ALPHA_SYM)?;
                let sym_table = self.bind(P_T_SYM)?;
                let sig = self.graph.apply(Kernel::Sigmoid, &[raw])?;
                let alpha = self
                    .graph
                    .apply(Kernel::ScalarWeightedSum { coeffs: vec![2.0] }, &[sig])?;
                let mut out = Vec::with_capacity(records.len());
                for r in records {
                    let x = self.graph.constant(Tensor::vector(&r.image_feature))?;
                    let logits = self.graph.apply(Kernel::Linear, &[u, x])?;
                    let y = self.graph.apply(Kernel::Sigmoid, &[logits])?;
                    let weighted = self.graph.apply(Kernel::Mul, &[alpha, y])?;
                    let k = self
                        .graph
                        .apply(Kernel::WeightedSumRows, &[weighted, sym_table])?;
                    out.push(Some(k));
                }
                Ok(out)
            }
            KbMode::Objects => {
                let rules = self.params.rule_words.clone().ok_or_else(|| {
                    Error::Config("kb-objects requires a built object knowledge base".to_string())
                })?;
                let raw = self.bind(P_ALPHA_OBJ)?;
                let sym_table = self.bind(P_T_SYM)?;
                let sig = self.graph.apply(Kernel::Sigmoid, &[raw])?;
                let alpha = self
                    .graph
                    .apply(Kernel::ScalarWeightedSum { coeffs: vec![2.0] }, &[sig])?;
                let mut out = Vec::with_capacity(records.len());
                for r in records {
                    let matches =
                        rule_matches(&rules, &r.caption_words_ranked, caption_vocab);
                    let m = self.graph.constant(Tensor::matrix(
                        SYMBOL_COUNT,
                        RULE_WORDS_PER_SYMBOL,
                        matches,
                    )?)?;
                    let masked = self.graph.apply(Kernel::Mul, &[alpha, m])?;
                    let weights = self.graph.apply(Kernel::RowSums, &[masked])?;
                    let k = self
                        .graph
                        .apply(Kernel::WeightedSumRows, &[weights, sym_table])?;
                    out.push(Some(k));
                }
                Ok(out)
            }
        }
    }

    /// Masked squared distance between two embedding nodes; the mask is a
    /// fresh dropout draw in training mode and all-ones otherwise.
    pub fn distance(
        &mut self,
        a: NodeId,
        b: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let len = self.graph.value(a).len();
        let keep = self.config.distance_keep;
        let mask = if self.training && keep < 1.0 {
            let rng = rng.expect("training-mode distance needs an RNG");
            let data: Vec<f64> = (0..len)
                .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
                .collect();
            self.graph.constant(Tensor::vector(&data))?
        } else {
            self.ones(len)?
        };
        Ok(self
            .graph
            .apply(Kernel::SquaredDistanceMasked, &[a, b, mask])?)
    }

    /// Σ of squared entries of a bound parameter (for weight decay).
    pub fn squared_norm(&mut self, name: &str) -> Result<NodeId> {
        let id = self.bind(name)?;
        let shape = self.graph.value(id).shape().to_vec();
        let zeros = self.graph.constant(Tensor::zeros(&shape))?;
        let ones = self.graph.constant(Tensor::full(&shape, 1.0))?;
        Ok(self
            .graph
            .apply(Kernel::SquaredDistanceMasked, &[id, zeros, ones])?)
    }
}

/// 0/1 match matrix: entry (j, l) is 1 when rule word l of symbol j appears
/// among the first three in-vocabulary ranked caption words.
fn rule_matches(
    rules: &[Vec<usize>],
    caption_words: &[String],
    vocab: &Vocabulary,
) -> Vec<f64> {
    let detected = detected_caption_indices(caption_words, vocab);
    let mut out = vec![0.0; SYMBOL_COUNT * RULE_WORDS_PER_SYMBOL];
    for (j, words) in rules.iter().enumerate() {
        for (l, &w) in words.iter().enumerate() {
            if detected.contains(&w) {
                out[j * RULE_WORDS_PER_SYMBOL + l] = 1.0;
            }
        }
    }
    out
}

/// The first three ranked caption words that are actual vocabulary entries.
pub fn detected_caption_indices(caption_words: &[String], vocab: &Vocabulary) -> Vec<usize> {
    caption_words
        .iter()
        .filter_map(|w| vocab.known_index_of(w).filter(|&i| i != 0))
        .take(CAPTION_WORDS_USED)
        .collect()
}

/// −Σ (z_k − t_k)²: higher is better, 0 is a perfect match.
pub fn score(z: &[f64], t: &[f64]) -> f64 {
    -z.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Inference-mode entry points over a single record.
pub struct Embedder<'a> {
    pub params: &'a ModelParams,
    pub config: &'a EmbeddingConfig,
    pub corpus: &'a Corpus,
}

impl<'a> Embedder<'a> {
    pub fn new(params: &'a ModelParams, config: &'a EmbeddingConfig, corpus: &'a Corpus) -> Self {
        Embedder {
            params,
            config,
            corpus,
        }
    }

    fn empty_trainable() -> &'static BTreeSet<String> {
        static EMPTY: std::sync::OnceLock<BTreeSet<String>> = std::sync::OnceLock::new();
        EMPTY.get_or_init(BTreeSet::new)
    }

    fn builder(&self) -> BatchGraph<'a> {
        BatchGraph::new(self.params, self.config, false, Self::empty_trainable())
    }

    /// Valid-region embeddings (region_count x d_embed).
    pub fn embed_regions(&self, record: &AdRecord) -> Result<Tensor> {
        if record.region_count == 0 {
            return Err(Error::Config(format!(
                "record '{}' has zero valid regions",
                record.id
            )));
        }
        let mut bg = self.builder();
        let d = self.params.dims.d_feat;
        let mut data = Vec::with_capacity(record.region_count * d);
        for rf in record.region_features.iter().take(record.region_count) {
            data.extend_from_slice(rf);
        }
        let stacked = bg
            .graph
            .constant(Tensor::matrix(record.region_count, d, data)?)?;
        let projected = bg.feature_pipeline(stacked, BN_IMG, P_W, None)?;
        Ok(bg.graph.value(projected).clone())
    }

    /// Attention probabilities over all region slots; padded slots are
    /// exactly zero and valid slots sum to one.
    pub fn attention_weights(&self, record: &AdRecord) -> Result<Vec<f64>> {
        if record.region_count == 0 {
            return Err(Error::Config(format!(
                "record '{}' has zero valid regions",
                record.id
            )));
        }
        let mut bg = self.builder();
        let d = self.params.dims.d_feat;
        let mut data = Vec::with_capacity(record.region_count * d);
        for rf in record.region_features.iter().take(record.region_count) {
            data.extend_from_slice(rf);
        }
        let stacked = bg
            .graph
            .constant(Tensor::matrix(record.region_count, d, data)?)?;
        let scores = bg.feature_pipeline(stacked, BN_ATT, P_WA, None)?;
        let flat = bg.graph.apply(
            Kernel::Reshape {
                shape: vec![record.region_count],
            },
            &[scores],
        )?;
        let alpha = bg.graph.apply(Kernel::SoftmaxRow, &[flat])?;
        let mut out = bg.graph.value(alpha).data().to_vec();
        out.resize(record.region_features.len(), 0.0);
        Ok(out)
    }

    /// The image embedding z under the configured image mode.
    pub fn image_embedding(&self, record: &AdRecord) -> Result<Tensor> {
        let mut bg = self.builder();
        let z = bg.image_embeddings(&[record], None)?[0];
        Ok(bg.graph.value(z).clone())
    }

    /// z plus the knowledge vector (z alone when the branch is off).
    pub fn image_with_knowledge(&self, record: &AdRecord) -> Result<Tensor> {
        let mut bg = self.builder();
        let z = bg.image_embeddings(&[record], None)?[0];
        let y = bg.knowledge_vectors(&self.corpus.caption_vocab, &[record])?[0];
        let id = match y {
            Some(k) => bg.add(z, k)?,
            None => z,
        };
        Ok(bg.graph.value(id).clone())
    }

    /// Mean-pooled text embedding from the table of the given domain.
    pub fn text_embedding(&self, tokens: &[String], domain: VocabDomain) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Config("text embedding needs at least one token".to_string()));
        }
        let indices: Vec<usize> = match domain {
            VocabDomain::Statement => self.corpus.statement_vocab.indices(tokens),
            VocabDomain::Caption => self.corpus.caption_vocab.indices(tokens),
            VocabDomain::Symbol => tokens
                .iter()
                .map(|t| {
                    crate::symbols::symbol_index(t).ok_or_else(|| Error::Config(format!(
                        "'{t}' is not a symbol"
                    )))
                })
                .collect::<Result<Vec<usize>>>()?,
        };
        let mut bg = self.builder();
        let id = bg.text_embedding(&indices, ModelParams::table_name(domain), None)?;
        Ok(bg.graph.value(id).clone())
    }
}

/// Predicted symbol distribution from the multilabel classifier:
/// sigmoid(u_symb · x), entries in (0, 1).
pub fn symbol_distribution_kb_symbols(params: &ModelParams, image_feature: &[f64]) -> Result<Vec<f64>> {
    let u = params.store.get(P_U_SYMB)?;
    if image_feature.len() != params.dims.d_feat {
        return Err(Error::Config(format!(
            "image feature has length {}, expected {}",
            image_feature.len(),
            params.dims.d_feat
        )));
    }
    Ok((0..SYMBOL_COUNT)
        .map(|j| {
            let logit: f64 = u.row(j).iter().zip(image_feature).map(|(a, b)| a * b).sum();
            1.0 / (1.0 + (-logit).exp())
        })
        .collect())
}

/// Rule-count symbol evidence: entry j is how many of symbol j's five rule
/// words appear among the first three in-vocabulary ranked caption words.
pub fn symbol_distribution_kb_objects(
    params: &ModelParams,
    caption_words: &[String],
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    let rules = params
        .rule_words
        .as_ref()
        .ok_or_else(|| Error::Config("object knowledge base not built".to_string()))?;
    let detected = detected_caption_indices(caption_words, vocab);
    Ok(rules
        .iter()
        .map(|words| words.iter().filter(|w| detected.contains(w)).count() as f64)
        .collect())
}

/// Σ_j α_j · y_j · s_j with α_j = 2·sigmoid(raw_j) (the KB-Symbols branch).
pub fn knowledge_vector_symbols(params: &ModelParams, y_symb: &[f64]) -> Result<Vec<f64>> {
    let alpha = params.bounded_alpha(P_ALPHA_SYM)?;
    let table = params.store.get(P_T_SYM)?;
    let d = params.dims.d_embed;
    let mut out = vec![0.0; d];
    for j in 0..SYMBOL_COUNT {
        let w = alpha[j] * y_symb[j];
        for (o, s) in out.iter_mut().zip(table.row(j)) {
            *o += w * s;
        }
    }
    Ok(out)
}

/// KB-Objects knowledge vector: per-rule bounded weights are applied inside
/// the matching sum, then projected through the symbol table.
pub fn knowledge_vector_objects(
    params: &ModelParams,
    caption_words: &[String],
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    let rules = params
        .rule_words
        .as_ref()
        .ok_or_else(|| Error::Config("object knowledge base not built".to_string()))?;
    let alpha = params.bounded_alpha(P_ALPHA_OBJ)?;
    let table = params.store.get(P_T_SYM)?;
    let detected = detected_caption_indices(caption_words, vocab);
    let d = params.dims.d_embed;
    let mut out = vec![0.0; d];
    for (j, words) in rules.iter().enumerate() {
        let weight: f64 = words
            .iter()
            .enumerate()
            .filter(|(_, w)| detected.contains(w))
            .map(|(l, _)| alpha[j * RULE_WORDS_PER_SYMBOL + l])
            .sum();
        if weight != 0.0 {
            for (o, s) in out.iter_mut().zip(table.row(j)) {
                *o += weight * s;
            }
        }
    }
    Ok(out)
}

/// One row of the report accompanying the object knowledge base.
#[derive(Clone, Debug, Serialize)]
pub struct SynonymRow {
    pub symbol: String,
    pub words: Vec<String>,
    pub distances: Vec<f64>,
}

/// For every symbol, pick the five caption-vocabulary words whose embeddings
/// are nearest (squared distance) to the symbol's embedding. Ties break
/// toward the lower vocabulary index; the unknown entry is never a rule word.
pub fn build_object_symbol_kb(
    params: &ModelParams,
    vocab: &Vocabulary,
) -> Result<(Vec<Vec<usize>>, Vec<SynonymRow>)> {
    if vocab.len() <= RULE_WORDS_PER_SYMBOL {
        return Err(Error::Config(format!(
            "caption vocabulary has {} real words; at least {RULE_WORDS_PER_SYMBOL} needed",
            vocab.len().saturating_sub(1)
        )));
    }
    let cap = params.store.get(P_T_CAP)?;
    let sym = params.store.get(P_T_SYM)?;
    let mut rules = Vec::with_capacity(SYMBOL_COUNT);
    let mut report = Vec::with_capacity(SYMBOL_COUNT);
    for (j, name) in SYMBOL_NAMES.iter().enumerate() {
        let s = sym.row(j);
        let mut scored: Vec<(f64, usize)> = (1..vocab.len())
            .map(|w| {
                let d: f64 = cap
                    .row(w)
                    .iter()
                    .zip(s)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, w)
            })
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let picked: Vec<(f64, usize)> = scored.into_iter().take(RULE_WORDS_PER_SYMBOL).collect();
        report.push(SynonymRow {
            symbol: name.to_string(),
            words: picked.iter().map(|(_, w)| vocab.token(*w).to_string()).collect(),
            distances: picked.iter().map(|(d, _)| *d).collect(),
        });
        rules.push(picked.into_iter().map(|(_, w)| w).collect());
    }
    Ok((rules, report))
}

/// Three-column text layout of the synonym report.
pub fn render_synonym_table(rows: &[SynonymRow]) -> String {
    let mut out = String::from("symbol\twords\tdistances\n");
    for row in rows {
        let words = row.words.join(",");
        let dists: Vec<String> = row.distances.iter().map(|d| format!("{d:.6}")).collect();
        out.push_str(&format!("{}\t{}\t{}\n", row.symbol, words, dists.join(",")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::corpus::Corpus;

    fn tiny_corpus(seed: u64) -> Corpus {
        let mut spec = SyntheticSpec::default_with_seed(seed);
        spec.n_topics = 4;
        spec.n_train = 12;
        spec.n_val = 4;
        spec.n_test = 4;
        spec.d_feat = 8;
        spec.statement_vocab_size = 40;
        spec.symbols_per_topic = crate::corpus::synthetic::default_symbol_map(4);
        spec.caption_words_per_topic = crate::corpus::synthetic::default_caption_map(4);
        let (records, _) = generate_synthetic(&spec).unwrap();
        Corpus::from_records(records).unwrap()
    }

    fn tiny_model(corpus: &Corpus, seed: u64) -> ModelParams {
        ModelParams::init(corpus, 8, None, seed).unwrap()
    }

    /// Neutralize a batch-norm layer so the inference path is the identity:
    /// running variance 1 − eps makes 1/sqrt(var + eps) exactly 1.
    fn neutralize_bn(params: &mut ModelParams, prefix: &str) {
        let d = params.dims.d_feat;
        params
            .store
            .insert(&format!("{prefix}.mean"), Tensor::zeros(&[d]));
        params
            .store
            .insert(&format!("{prefix}.var"), Tensor::full(&[d], 1.0 - BN_EPS));
        params
            .store
            .insert(&format!("{prefix}.scale"), Tensor::full(&[d], 1.0));
        params
            .store
            .insert(&format!("{prefix}.shift"), Tensor::zeros(&[d]));
    }

    fn identity_matrix(n: usize) -> Tensor {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, data).unwrap()
    }

    #[test]
    fn embed_regions_identity_projection_returns_features() {
        let corpus = tiny_corpus(1);
        let mut params = tiny_model(&corpus, 1);
        neutralize_bn(&mut params, BN_IMG);
        params.store.insert(P_W, identity_matrix(8));
        let ecfg = EmbeddingConfig::default();
        let embedder = Embedder::new(&params, &ecfg, &corpus);
        let record = &corpus.records[0];
        let v = embedder.embed_regions(record).unwrap();
        assert_eq!(v.shape(), &[record.region_count, 8]);
        for (r, rf) in record.region_features.iter().enumerate() {
            for (a, b) in v.row(r).iter().zip(rf) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn embed_regions_zero_projection_is_zero() {
        let corpus = tiny_corpus(1);
        let mut params = tiny_model(&corpus, 1);
        params.store.insert(P_W, Tensor::zeros(&[8, 8]));
        let ecfg = EmbeddingConfig::default();
        let embedder = Embedder::new(&params, &ecfg, &corpus);
        let v = embedder.embed_regions(&corpus.records[0]).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn inference_is_bit_deterministic() {
        let corpus = tiny_corpus(2);
        let params = tiny_model(&corpus, 2);
        let ecfg = EmbeddingConfig::default();
        let embedder = Embedder::new(&params, &ecfg, &corpus);
        let a = embedder.image_embedding(&corpus.records[0]).unwrap();
        let b = embedder.image_embedding(&corpus.records[0]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_attention_weights_are_uniform_and_padded_zero() {
        let corpus = tiny_corpus(3);
        let mut params = tiny_model(&corpus, 3);
        params.store.insert(P_WA, Tensor::zeros(&[1, 8]));
        let ecfg = EmbeddingConfig::default();
        let embedder = Embedder::new(&params, &ecfg, &corpus);
        let mut record = corpus.records[0].clone();
        record.region_count = 6; // last four rows become padding
        let alpha = embedder.attention_weights(&record).unwrap();
        assert_eq!(alpha.len(), record.region_features.len());
        for a in &alpha[..6] {
            assert!((a - 1.0 / 6.0).abs() < 1e-12);
        }
        for a in &alpha[6..] {
            assert_eq!(*a, 0.0);
        }
        let sum: f64 = alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_valid_region_gets_full_attention() {
        let corpus = tiny_corpus(3);
        let params = tiny_model(&corpus, 3);
        let ecfg = EmbeddingConfig::default();
        let embedder = Embedder::new(&params, &ecfg, &corpus);
        let mut record = corpus.records[0].clone();
        record.region_count = 1;
        let alpha = embedder.attention_weights(&record).unwrap();
        assert_eq!(alpha[0], 1.0);
        assert!(alpha[1..].iter().all(|&a| a == 0.0));

        record.region_count = 0;
        assert!(embedder.attention_weights(&record).is_err());
        assert!(embedder.embed_regions(&record).is_err());
    }

    #[test]
    fn region_mean_embedding_averages_region_rows() {
        let corpus = tiny_corpus(4);
        let params = tiny_model(&corpus, 4);
        let ecfg = EmbeddingConfig {
            image_mode: ImageMode::RegionMean,
            ..EmbeddingConfig::default()
        };
        let embedder = Embedder::new(&params, &ecfg, &corpus);
        let mut record = corpus.records[0].clone();
        record.region_count = 2;
        let v = embedder.embed_regions(&record).unwrap();
        let z = embedder.image_embedding(&record).unwrap();
        for k in 0..8 {
            let expected = (v.row(0)[k] + v.row(1)[k]) / 2.0;
            assert!((z.data()[k] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_regions_make_attention_irrelevant() {
        let corpus = tiny_corpus(5);
        let params = tiny_model(&corpus, 5);
        let ecfg = EmbeddingConfig::default();
        let embedder = Embedder::new(&params, &ecfg, &corpus);
        let mut record = corpus.records[0].clone();
        let row = record.region_features[0].clone();
        record.region_features = vec![row; 4];
        record.region_count = 4;
        let z = embedder.image_embedding(&record).unwrap();
        let mut single = record.clone();
        single.region_count = 1;
        let z1 = embedder.image_embedding(&single).unwrap();
        for (a, b) in z.data().iter().zip(z1.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_embedding_stays_in_region_envelope() {
        // convex combination: each component of z lies within the
        // componentwise min/max of the region embedding rows
        for seed in 0..5 {
            let corpus = tiny_corpus(seed);
            let params = tiny_model(&corpus, seed + 100);
            let ecfg = EmbeddingConfig::default();
            let embedder = Embedder::new(&params, &ecfg, &corpus);
            let record = &corpus.records[seed as usize % corpus.records.len()];
            let v = embedder.embed_regions(record).unwrap();
            let z = embedder.image_embedding(record).unwrap();
            for k in 0..8 {
                let col: Vec<f64> = (0..record.region_count).map(|r| v.row(r)[k]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(z.data()[k] >= lo - 1e-12 && z.data()[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn text_embedding_examples() {
        let corpus = tiny_corpus(6);
        let params = tiny_model(&corpus, 6);
        let ecfg = EmbeddingConfig::default();
        let embedder = Embedder::new(&params, &ecfg, &corpus);
        let tokens = corpus.records[0].statements[0].clone();
        let single = embedder
            .text_embedding(&tokens[..1], VocabDomain::Statement)
            .unwrap();
        let idx = corpus.statement_vocab.index_of(&tokens[0]).unwrap();
        let row = params.store.get(P_T_STMT).unwrap().row(idx).to_vec();
        assert_eq!(single.data(), &row[..]);

        // permutation invariance
        let fwd = embedder
            .text_embedding(&tokens, VocabDomain::Statement)
            .unwrap();
        let mut reversed = tokens.clone();
        reversed.reverse();
        let bwd = embedder
            .text_embedding(&reversed, VocabDomain::Statement)
            .unwrap();
        for (a, b) in fwd.data().iter().zip(bwd.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // duplication at full multiplicity
        let doubled: Vec<String> = tokens.iter().chain(tokens.iter()).cloned().collect();
        let dup = embedder
            .text_embedding(&doubled, VocabDomain::Statement)
            .unwrap();
        for (a, b) in fwd.data().iter().zip(dup.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        // out-of-vocabulary tokens take the unknown row
        let unk = embedder
            .text_embedding(&["zzznotaword".to_string()], VocabDomain::Statement)
            .unwrap();
        assert_eq!(
            unk.data(),
            params.store.get(P_T_STMT).unwrap().row(0)
        );
        assert!(embedder.text_embedding(&[], VocabDomain::Statement).is_err());
    }

    #[test]
    fn classifier_distribution_examples() {
        let corpus = tiny_corpus(7);
        let mut params = tiny_model(&corpus, 7);
        let x = corpus.records[0].image_feature.clone();
        // zero classifier: every probability is 0.5
        let y = symbol_distribution_kb_symbols(&params, &x).unwrap();
        assert!(y.iter().all(|&p| p == 0.5));

        // a strongly positive row saturates
        let mut u = params.store.get(P_U_SYMB).unwrap().clone();
        for k in 0..params.dims.d_feat {
            u.row_mut(0)[k] = 1e3 * x[k].signum();
        }
        params.store.insert(P_U_SYMB, u);
        let y = symbol_distribution_kb_symbols(&params, &x).unwrap();
        assert!(y[0] > 0.999);

        // independent recomputation oracle
        let u = params.store.get(P_U_SYMB).unwrap();
        for j in 0..SYMBOL_COUNT {
            let mut logit = 0.0;
            for k in 0..params.dims.d_feat {
                logit += u.row(j)[k] * x[k];
            }
            let expected = 1.0 / (1.0 + (-logit).exp());
            assert!((y[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn object_distribution_counts_rule_hits() {
        let corpus = tiny_corpus(8);
        let mut params = tiny_model(&corpus, 8);
        let (rules, _) = build_object_symbol_kb(&params, &corpus.caption_vocab).unwrap();
        params.rule_words = Some(rules.clone());

        // empty caption list: all zeros
        let zero = symbol_distribution_kb_objects(&params, &[], &corpus.caption_vocab).unwrap();
        assert!(zero.iter().all(|&c| c == 0.0));

        // brute-force rule scan oracle on every record
        for record in &corpus.records {
            let y = symbol_distribution_kb_objects(
                &params,
                &record.caption_words_ranked,
                &corpus.caption_vocab,
            )
            .unwrap();
            let detected =
                detected_caption_indices(&record.caption_words_ranked, &corpus.caption_vocab);
            assert!(detected.len() <= CAPTION_WORDS_USED);
            for (j, words) in rules.iter().enumerate() {
                let expected = words.iter().filter(|w| detected.contains(w)).count() as f64;
                assert_eq!(y[j], expected);
            }
        }
    }

    #[test]
    fn knowledge_vector_examples() {
        let corpus = tiny_corpus(9);
        let mut params = tiny_model(&corpus, 9);

        // zero distribution gives the zero vector
        let zero = knowledge_vector_symbols(&params, &vec![0.0; SYMBOL_COUNT]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));

        // raw = -40 bounds the output by ~2e-17 per unit of evidence
        params
            .store
            .insert(P_ALPHA_SYM, Tensor::full(&[SYMBOL_COUNT], -40.0));
        let y = vec![1.0; SYMBOL_COUNT];
        let tiny = knowledge_vector_symbols(&params, &y).unwrap();
        assert!(tiny.iter().all(|&v| v.abs() < 1e-12));

        // one-hot evidence picks out alpha_j * s_j
        params.store.insert(P_ALPHA_SYM, Tensor::zeros(&[SYMBOL_COUNT]));
        let mut onehot = vec![0.0; SYMBOL_COUNT];
        onehot[5] = 1.0;
        let v = knowledge_vector_symbols(&params, &onehot).unwrap();
        let s = params.store.get(P_T_SYM).unwrap();
        for (a, b) in v.iter().zip(s.row(5)) {
            assert!((a - 1.0 * b).abs() < 1e-12); // alpha = 2*sigmoid(0) = 1
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let mut z = vec![0.0; 8];
        z[0] = 1.0;
        assert_eq!(score(&z, &vec![0.0; 8]), -1.0);
        // ordering equals squared distance ascending
        let t = vec![0.5; 4];
        let near = vec![0.4; 4];
        let far = vec![-2.0; 4];
        assert!(score(&near, &t) > score(&far, &t));
    }

    #[test]
    fn object_kb_selection_matches_exhaustive_scan() {
        let corpus = tiny_corpus(10);
        let mut params = tiny_model(&corpus, 10);

        // duplicated row: make caption word 3's embedding equal s_2
        let sym_row = params.store.get(P_T_SYM).unwrap().row(2).to_vec();
        let mut cap = params.store.get(P_T_CAP).unwrap().clone();
        cap.row_mut(3).copy_from_slice(&sym_row);
        params.store.insert(P_T_CAP, cap);

        let (rules, report) = build_object_symbol_kb(&params, &corpus.caption_vocab).unwrap();
        assert!(rules[2].contains(&3), "zero-distance word must be selected");
        assert_eq!(report.len(), SYMBOL_COUNT);

        // exhaustive scan oracle
        let cap = params.store.get(P_T_CAP).unwrap();
        let sym = params.store.get(P_T_SYM).unwrap();
        for (j, words) in rules.iter().enumerate() {
            let mut dists: Vec<(f64, usize)> = (1..corpus.caption_vocab.len())
                .map(|w| {
                    let d: f64 = cap
                        .row(w)
                        .iter()
                        .zip(sym.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, w)
                })
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = dists.iter().take(5).map(|(_, w)| *w).collect();
            assert_eq!(words, &expected);
        }
    }

    #[test]
    fn object_kb_ties_resolve_to_lower_index() {
        let corpus = tiny_corpus(11);
        let mut params = tiny_model(&corpus, 11);
        // all caption rows identical: every distance ties, so the five rule
        // words must be the five lowest indices
        let d = params.dims.d_embed;
        let v = corpus.caption_vocab.len();
        params
            .store
            .insert(P_T_CAP, Tensor::full(&[v, d], 0.25));
        let (rules, _) = build_object_symbol_kb(&params, &corpus.caption_vocab).unwrap();
        for words in &rules {
            assert_eq!(words, &vec![1, 2, 3, 4, 5]);
        }
    }

    #[test]
    fn knowledge_off_equals_residual_zero() {
        let corpus = tiny_corpus(12);
        let mut params = tiny_model(&corpus, 12);
        // give the classifier some signal so y_symb is nontrivial
        let mut u = params.store.get(P_U_SYMB).unwrap().clone();
        for j in 0..SYMBOL_COUNT {
            for k in 0..params.dims.d_feat {
                u.row_mut(j)[k] = ((j + k) % 5) as f64 * 0.3 - 0.6;
            }
        }
        params.store.insert(P_U_SYMB, u);
        params
            .store
            .insert(P_ALPHA_SYM, Tensor::full(&[SYMBOL_COUNT], -40.0));

        let off = EmbeddingConfig {
            kb_mode: KbMode::Off,
            ..EmbeddingConfig::default()
        };
        let on = EmbeddingConfig {
            kb_mode: KbMode::Symbols,
            ..EmbeddingConfig::default()
        };
        let embedder_off = Embedder::new(&params, &off, &corpus);
        let embedder_on = Embedder::new(&params, &on, &corpus);
        for record in corpus.records.iter().take(6) {
            let z_off = embedder_off.image_with_knowledge(record).unwrap();
            let z_on = embedder_on.image_with_knowledge(record).unwrap();
            let t = embedder_off
                .text_embedding(&record.statements[0], VocabDomain::Statement)
                .unwrap();
            let diff = (score(z_off.data(), t.data()) - score(z_on.data(), t.data())).abs();
            assert!(diff < 1e-10, "score difference {diff}");
        }
    }
}

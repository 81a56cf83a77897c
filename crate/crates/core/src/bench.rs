//! Synthetic hierarchical concept-retrieval benchmark.
//!
//! A seeded concept tree supplies prototype vectors; noisy descriptions of each
//! concept are the queries. A frozen random linear encoder with one adapted
//! layer embeds both sides and is trained with in-batch InfoNCE.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::adapters::{
    param_count, Adapter, AdapterCache, AdapterError, AdapterGrads, AdapterKind, LoraAdapter, OrthoGeoAdapter,
    ParamKind,
};
use crate::config::{ConfigError, RunConfig};
use crate::linalg::{self, DenseMatrix, DenseVector, LinalgError};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::optim::{adamw_step, AdamState, OptimError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("encoder output column {column} has zero norm")]
    DegenerateEncoder { column: usize },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("query {query}: gold index {gold} outside the {candidates} candidates")]
    MissingGold { query: usize, gold: usize, candidates: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize, checkpoint: Box<Checkpoint> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation failed: {0}")]
    Metrics(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl From<MetricsError> for BenchError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Encode(inner) => *inner,
            other => BenchError::Metrics(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;

/// Independent random streams derived from one run seed.
pub mod streams {
    pub const TAXONOMY: u64 = 0;
    pub const DESCRIPTIONS: u64 = 1;
    pub const ENCODER: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian vector with per-coordinate variance `1/d`, so its norm is close to 1.
fn unit_scale_gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            s * z
        })
        .collect()
}

fn normalize(v: Vec<f64>) -> Option<DenseVector> {
    DenseVector::from_vec(v).normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
}

/// Concepts in breadth-first order; a node's id is its index.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTree {
    nodes: Vec<ConceptNode>,
    prototypes: Vec<DenseVector>,
}

impl ConceptTree {
    pub fn nodes(&self) -> &[ConceptNode] {
        &self.nodes
    }

    pub fn prototypes(&self) -> &[DenseVector] {
        &self.prototypes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn d_feat(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn prototype(&self, id: usize) -> &DenseVector {
        &self.prototypes[id]
    }

    /// The parent's prototype; the root is its own parent here.
    pub fn parent_prototype(&self, id: usize) -> &DenseVector {
        &self.prototypes[self.nodes[id].parent.unwrap_or(id)]
    }

    pub fn children(&self, id: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(move |n| n.parent == Some(id)).map(|n| n.id)
    }

    pub fn validate(&self) -> Result<()> {
        let roots = self.nodes.iter().filter(|n| n.parent.is_none()).count();
        if roots != 1 {
            return Err(BenchError::InvalidTaxonomy(format!("{roots} roots")));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(BenchError::InvalidTaxonomy(format!("node {i} carries id {}", n.id)));
            }
            if let Some(p) = n.parent {
                if p >= self.nodes.len() || self.nodes[p].depth + 1 != n.depth {
                    return Err(BenchError::InvalidTaxonomy(format!("node {i} has a bad parent")));
                }
            } else if n.depth != 0 {
                return Err(BenchError::InvalidTaxonomy("root depth is not 0".into()));
            }
        }
        Ok(())
    }
}

/// Full `branching`-ary tree of the given depth. The root prototype is a
/// random unit vector; each child is `normalize(parent + gamma·g)`.
pub fn generate_taxonomy(depth: usize, branching: usize, d_feat: usize, gamma: f64, seed: u64) -> Result<ConceptTree> {
    if depth < 1 || branching < 2 || d_feat == 0 {
        return Err(BenchError::InvalidTaxonomy(format!(
            "need depth ≥ 1, branching ≥ 2, d_feat ≥ 1; got {depth}, {branching}, {d_feat}"
        )));
    }
    let mut rng = stream_rng(seed, streams::TAXONOMY);
    let degenerate = || BenchError::InvalidTaxonomy("zero prototype".into());
    let mut nodes = vec![ConceptNode {
        id: 0,
        parent: None,
        depth: 0,
    }];
    let mut prototypes = vec![normalize(unit_scale_gaussian(d_feat, &mut rng)).ok_or_else(degenerate)?];
    let mut next = 0;
    while next < nodes.len() {
        let parent = nodes[next];
        next += 1;
        if parent.depth == depth {
            continue;
        }
        for _ in 0..branching {
            let g = unit_scale_gaussian(d_feat, &mut rng);
            let p = prototypes[parent.id].as_slice();
            let child: Vec<f64> = p.iter().zip(&g).map(|(pi, gi)| pi + gamma * gi).collect();
            prototypes.push(normalize(child).ok_or_else(degenerate)?);
            nodes.push(ConceptNode {
                id: nodes.len(),
                parent: Some(parent.id),
                depth: parent.depth + 1,
            });
        }
    }
    Ok(ConceptTree { nodes, prototypes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Per-concept split sizes: `⌈0.8n⌉` train, `⌊0.1n⌋` val, the rest test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (8 * n).div_ceil(10);
    let val = (n / 10).min(n - train);
    (train, val, n - train - val)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub description: DenseVector,
    pub gold: usize,
    pub split: Split,
}

/// Descriptions with gold concept ids; every concept is a candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDataset {
    examples: Vec<Example>,
    candidate_ids: Vec<usize>,
    candidates: DenseMatrix,
    per_concept: usize,
}

impl RetrievalDataset {
    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> + '_ {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn candidate_ids(&self) -> &[usize] {
        &self.candidate_ids
    }

    /// Candidate prototypes stacked as columns, in `candidate_ids` order.
    pub fn candidate_matrix(&self) -> &DenseMatrix {
        &self.candidates
    }

    pub fn per_concept(&self) -> usize {
        self.per_concept
    }

    pub fn d_feat(&self) -> usize {
        self.candidates.rows()
    }
}

/// `per_concept` descriptions per concept, each
/// `normalize((1−mix)·proto + mix·parent_proto + noise·g)`.
pub fn generate_descriptions(tree: &ConceptTree, per_concept: usize, noise: f64, mix: f64, seed: u64) -> Result<RetrievalDataset> {
    if per_concept < 1 {
        return Err(BenchError::InvalidDataset("per_concept must be at least 1".into()));
    }
    tree.validate()?;
    let d = tree.d_feat();
    let mut rng = stream_rng(seed, streams::DESCRIPTIONS);
    let (n_train, n_val, _) = split_sizes(per_concept);
    let mut examples = Vec::with_capacity(tree.len() * per_concept);
    for node in tree.nodes() {
        let p = tree.prototype(node.id).as_slice();
        let pp = tree.parent_prototype(node.id).as_slice();
        for k in 0..per_concept {
            let g = unit_scale_gaussian(d, &mut rng);
            let v: Vec<f64> = (0..d).map(|i| (1.0 - mix) * p[i] + mix * pp[i] + noise * g[i]).collect();
            let description = normalize(v).ok_or_else(|| BenchError::InvalidDataset(format!("zero description for concept {}", node.id)))?;
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            examples.push(Example {
                description,
                gold: node.id,
                split,
            });
        }
    }
    let columns: Vec<&[f64]> = tree.prototypes().iter().map(|p| p.as_slice()).collect();
    Ok(RetrievalDataset {
        examples,
        candidate_ids: (0..tree.len()).collect(),
        candidates: DenseMatrix::from_columns(&columns),
        per_concept,
    })
}

/// The dataset a config describes.
pub fn build_dataset(cfg: &RunConfig) -> Result<RetrievalDataset> {
    let tree = generate_taxonomy(cfg.depth, cfg.branching, cfg.d_feat, cfg.gamma, cfg.seed)?;
    generate_descriptions(&tree, cfg.per_concept, cfg.noise, cfg.mix, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "lowercase")]
pub enum EncoderLayer {
    Base { w0: DenseMatrix },
    Adapted { adapter: Adapter },
}

/// Shared-weight linear encoder `x ↦ normalize(W x)`; queries and candidate
/// prototypes go through the same (possibly adapted) layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiEncoder {
    layer: EncoderLayer,
    temperature: f64,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    norms: Vec<f64>,
    embeddings: DenseMatrix,
    adapter: Option<AdapterCache>,
}

impl EncodeCache {
    pub fn embeddings(&self) -> &DenseMatrix {
        &self.embeddings
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(BenchError::InvalidTemperature(t))
    }
}

impl BiEncoder {
    pub fn base(w0: DenseMatrix, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Ok(Self {
            layer: EncoderLayer::Base { w0 },
            temperature,
        })
    }

    pub fn adapted(adapter: Adapter, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        adapter.validate()?;
        Ok(Self {
            layer: EncoderLayer::Adapted { adapter },
            temperature,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if let EncoderLayer::Adapted { adapter } = &self.layer {
            adapter.validate()?;
        }
        Ok(())
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn layer(&self) -> &EncoderLayer {
        &self.layer
    }

    pub fn w0(&self) -> &DenseMatrix {
        match &self.layer {
            EncoderLayer::Base { w0 } => w0,
            EncoderLayer::Adapted { adapter } => adapter.w0(),
        }
    }

    pub fn adapter(&self) -> Option<&Adapter> {
        match &self.layer {
            EncoderLayer::Base { .. } => None,
            EncoderLayer::Adapted { adapter } => Some(adapter),
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut Adapter> {
        match &mut self.layer {
            EncoderLayer::Base { .. } => None,
            EncoderLayer::Adapted { adapter } => Some(adapter),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w0().cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0().rows()
    }

    /// Column-wise embeddings plus what [`BiEncoder::backward`] needs.
    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, EncodeCache)> {
        if x.rows() != self.d_in() {
            return Err(BenchError::Shape(format!("input has {} rows, encoder expects {}", x.rows(), self.d_in())));
        }
        let (z, adapter) = match &self.layer {
            EncoderLayer::Base { w0 } => (linalg::matmul(w0, x)?, None),
            EncoderLayer::Adapted { adapter } => {
                let (y, c) = adapter.forward(x)?;
                (y, Some(c))
            }
        };
        let (embeddings, norms) = normalize_columns(z)?;
        Ok((
            embeddings.clone(),
            EncodeCache {
                norms,
                embeddings,
                adapter,
            },
        ))
    }

    pub fn encode_batch(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(x).map(|(e, _)| e)
    }

    pub fn encode(&self, x: &DenseVector) -> Result<DenseVector> {
        let m = DenseMatrix::from_columns(&[x.as_slice()]);
        Ok(DenseVector::from_vec(self.encode_batch(&m)?.into_vec()))
    }

    /// Adapter gradients for a cotangent on the normalized embeddings;
    /// `None` when the encoder has no adapter.
    pub fn backward(&self, cache: &EncodeCache, grad_emb: &DenseMatrix) -> Result<Option<AdapterGrads>> {
        if grad_emb.shape() != cache.embeddings.shape() {
            return Err(BenchError::Shape(format!(
                "embedding gradient {:?} vs embeddings {:?}",
                grad_emb.shape(),
                cache.embeddings.shape()
            )));
        }
        let (Some(adapter), Some(ac)) = (self.adapter(), &cache.adapter) else {
            return Ok(None);
        };
        let grad_z = normalize_columns_vjp(&cache.embeddings, &cache.norms, grad_emb);
        Ok(Some(adapter.backward(ac, &grad_z)?))
    }
}

fn normalize_columns(mut z: DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    let (rows, cols) = z.shape();
    let mut norms = vec![0.0; cols];
    for j in 0..cols {
        let n = (0..rows).map(|i| z[(i, j)] * z[(i, j)]).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(BenchError::DegenerateEncoder { column: j });
        }
        norms[j] = n;
    }
    for i in 0..rows {
        for (j, &n) in norms.iter().enumerate() {
            z[(i, j)] /= n;
        }
    }
    Ok((z, norms))
}

/// Per column: `(ḡ − e·⟨e, ḡ⟩) / ‖z‖`.
fn normalize_columns_vjp(e: &DenseMatrix, norms: &[f64], grad: &DenseMatrix) -> DenseMatrix {
    let (rows, cols) = e.shape();
    let mut out = grad.clone();
    for (j, &n) in norms.iter().enumerate().take(cols) {
        let proj: f64 = (0..rows).map(|i| e[(i, j)] * grad[(i, j)]).sum();
        for i in 0..rows {
            out[(i, j)] = (grad[(i, j)] - e[(i, j)] * proj) / n;
        }
    }
    out
}

/// Loss value and gradients with respect to both embedding blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_queries: DenseMatrix,
    pub grad_candidates: DenseMatrix,
}

/// Mean softmax cross-entropy of `⟨q_i, c_j⟩/τ` against `gold[i]`, where
/// queries and candidates are embedding columns.
pub fn infonce_loss(queries: &DenseMatrix, candidates: &DenseMatrix, gold: &[usize], temperature: f64) -> Result<InfoNce> {
    check_temperature(temperature)?;
    let (n, m) = (queries.cols(), candidates.cols());
    if queries.rows() != candidates.rows() || gold.len() != n || n == 0 || m == 0 {
        return Err(BenchError::Shape(format!(
            "queries {:?}, candidates {:?}, {} golds",
            queries.shape(),
            candidates.shape(),
            gold.len()
        )));
    }
    if let Some((query, &g)) = gold.iter().enumerate().find(|(_, &g)| g >= m) {
        return Err(BenchError::MissingGold {
            query,
            gold: g,
            candidates: m,
        });
    }
    let scores = linalg::matmul_tn(queries, candidates)?;
    let inv_t = 1.0 / temperature;
    let mut loss = 0.0;
    let mut grad_logits = DenseMatrix::zeros(n, m);
    for i in 0..n {
        let logits: Vec<f64> = scores.row(i).iter().map(|s| s * inv_t).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += max + z.ln() - logits[gold[i]];
        for j in 0..m {
            let p = exps[j] / z;
            grad_logits[(i, j)] = (p - if j == gold[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    let g = grad_logits.scale(inv_t);
    Ok(InfoNce {
        loss: loss / n as f64,
        grad_queries: linalg::matmul_nt(candidates, &g)?,
        grad_candidates: linalg::matmul(queries, &g)?,
    })
}

/// Encoder a config describes, before any training.
pub fn build_encoder(cfg: &RunConfig) -> Result<BiEncoder> {
    let mut rng = stream_rng(cfg.seed, streams::ENCODER);
    let scale = 1.0 / (cfg.d_feat as f64).sqrt();
    let w0 = DenseMatrix::from_fn(cfg.d_emb, cfg.d_feat, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    let mut init_rng = stream_rng(cfg.seed, streams::ADAPTER_INIT);
    match cfg.method.adapter_kind() {
        None => BiEncoder::base(w0, cfg.temperature),
        Some(AdapterKind::OrthoGeo) => {
            let a = OrthoGeoAdapter::init(
                w0,
                cfg.rank,
                cfg.alpha,
                cfg.sigma_mode,
                cfg.epsilon,
                cfg.s_init_value(),
                cfg.theta_init,
                &mut init_rng,
            )?;
            BiEncoder::adapted(Adapter::OrthoGeo(a), cfg.temperature)
        }
        Some(AdapterKind::Lora) => {
            let a = LoraAdapter::init(w0, cfg.rank, cfg.alpha, &mut init_rng)?;
            BiEncoder::adapted(Adapter::Lora(a), cfg.temperature)
        }
    }
}

/// Everything needed to evaluate or inspect a run: the resolved config, the
/// encoder (frozen weights included) and the optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub encoder: BiEncoder,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parses and validates; the encoder must match the config's method and shapes.
    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| BenchError::Checkpoint(e.to_string()))?;
        ck.config.validate()?;
        ck.encoder.validate()?;
        let kind = ck.encoder.adapter().map(|a| a.kind());
        if kind != ck.config.method.adapter_kind() {
            return Err(BenchError::Checkpoint(format!(
                "encoder carries {:?} but config says {:?}",
                kind, ck.config.method
            )));
        }
        if ck.encoder.w0().shape() != (ck.config.d_emb, ck.config.d_feat) {
            return Err(BenchError::Checkpoint("encoder shape disagrees with config".into()));
        }
        if let Some(a) = ck.encoder.adapter() {
            if a.rank() != ck.config.rank {
                return Err(BenchError::Checkpoint("adapter rank disagrees with config".into()));
            }
        }
        Ok(ck)
    }
}

/// Stepwise trainer; [`train`] drives it with evaluation and early stopping.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: RunConfig,
    dataset: RetrievalDataset,
    train_idx: Vec<usize>,
    encoder: BiEncoder,
    optimizer: Option<AdamState>,
    step: usize,
    shuffle_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let dataset = build_dataset(&config)?;
        let encoder = build_encoder(&config)?;
        Self::from_parts(config, dataset, encoder)
    }

    /// Trainer over a caller-supplied dataset and encoder.
    pub fn from_parts(config: RunConfig, dataset: RetrievalDataset, mut encoder: BiEncoder) -> Result<Self> {
        if dataset.d_feat() != encoder.d_in() {
            return Err(BenchError::Shape("dataset and encoder input dims differ".into()));
        }
        let train_idx: Vec<usize> = (0..dataset.examples().len())
            .filter(|&i| dataset.examples()[i].split == Split::Train)
            .collect();
        if train_idx.is_empty() {
            return Err(BenchError::InvalidDataset("empty training split".into()));
        }
        let optimizer = match encoder.adapter_mut() {
            Some(a) => Some(AdamState::for_tensors(config.adam(), &a.param_tensors())?),
            None => None,
        };
        let order = train_idx.clone();
        Ok(Self {
            shuffle_rng: stream_rng(config.seed, streams::SHUFFLE),
            config,
            dataset,
            train_idx,
            encoder,
            optimizer,
            step: 0,
            order,
            cursor: usize::MAX,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dataset(&self) -> &RetrievalDataset {
        &self.dataset
    }

    pub fn encoder(&self) -> &BiEncoder {
        &self.encoder
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            encoder: self.encoder.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Stiefel residual of the current OrthoGeo factors, if any.
    pub fn stiefel_residual(&self) -> Result<Option<f64>> {
        match self.encoder.adapter() {
            Some(Adapter::OrthoGeo(a)) => Ok(Some(a.factors()?.stiefel_residual())),
            _ => Ok(None),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order.clone_from(&self.train_idx);
                self.order.shuffle(&mut self.shuffle_rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Loss and embedding gradients on a set of examples, candidates being
    /// the distinct gold concepts among them in ascending id order.
    fn batch_loss(&self, batch: &[usize]) -> Result<(f64, DenseMatrix, EncodeCache)> {
        let examples = self.dataset.examples();
        let mut cands: Vec<usize> = batch.iter().map(|&i| examples[i].gold).collect();
        cands.sort_unstable();
        cands.dedup();
        let gold: Vec<usize> = batch
            .iter()
            .map(|&i| cands.binary_search(&examples[i].gold).expect("gold is a candidate"))
            .collect();
        let n = batch.len();
        let protos = self.dataset.candidate_matrix();
        let d = self.dataset.d_feat();
        let x = DenseMatrix::from_fn(d, n + cands.len(), |r, c| {
            if c < n {
                examples[batch[c]].description[r]
            } else {
                protos[(r, cands[c - n])]
            }
        });
        let (emb, cache) = self.encoder.forward(&x)?;
        let e = emb.cols();
        let q = DenseMatrix::from_fn(emb.rows(), n, |r, c| emb[(r, c)]);
        let cm = DenseMatrix::from_fn(emb.rows(), e - n, |r, c| emb[(r, n + c)]);
        let out = infonce_loss(&q, &cm, &gold, self.encoder.temperature())?;
        let grad = DenseMatrix::from_fn(emb.rows(), e, |r, c| {
            if c < n {
                out.grad_queries[(r, c)]
            } else {
                out.grad_candidates[(r, c - n)]
            }
        });
        Ok((out.loss, grad, cache))
    }

    /// Loss on the next batch without updating anything.
    pub fn peek_loss(&self, batch: &[usize]) -> Result<f64> {
        self.batch_loss(batch).map(|(l, _, _)| l)
    }

    /// One optimizer step on the next shuffled batch; returns the batch loss
    /// measured before the update.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        self.step_on(&batch)
    }

    /// One optimizer step on the given training-example indices.
    pub fn step_on(&mut self, batch: &[usize]) -> Result<f64> {
        let (loss, grad, cache) = self.batch_loss(batch)?;
        if !loss.is_finite() {
            return Err(BenchError::NonFiniteLoss {
                step: self.step,
                checkpoint: Box::new(self.checkpoint()),
            });
        }
        if let Some(grads) = self.encoder.backward(&cache, &grad)? {
            let state = self.optimizer.as_mut().expect("adapted encoder has an optimizer");
            let adapter = self.encoder.adapter_mut().expect("gradients imply an adapter");
            let slices = grads.slices();
            adamw_step(state, &mut adapter.param_tensors(), &slices)?;
        }
        self.step += 1;
        Ok(loss)
    }

    /// Indices of every training example, in dataset order.
    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricsReport> {
        Ok(metrics::evaluate(&self.encoder, &self.dataset, split, &metrics::TABLE_KS)?)
    }

    pub fn val_mrr(&self) -> Result<f64> {
        let run = metrics::ranked_run(&self.encoder, &self.dataset, Split::Val)?;
        Ok(metrics::mrr(&run)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean batch loss since the previous entry; absent at step 0.
    pub train_loss: Option<f64>,
    pub val_mrr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
    /// Nothing to train.
    NoAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
    pub stop: StopReason,
    pub dataset: RetrievalDataset,
}

pub const CONVERGENCE_HEADER: &str = "step,train_loss,val_mrr";

/// Training objective recorded in manifests.
pub const LOSS_NAME: &str = "in-batch InfoNCE";

impl TrainedRun {
    pub fn config(&self) -> &RunConfig {
        &self.checkpoint.config
    }

    pub fn encoder(&self) -> &BiEncoder {
        &self.checkpoint.encoder
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricsReport> {
        Ok(metrics::evaluate(self.encoder(), &self.dataset, split, &metrics::TABLE_KS)?)
    }

    pub fn convergence_csv(&self) -> String {
        convergence_csv(&self.log)
    }

    /// Self-contained run description: resolved config, parameter counts and
    /// final validation and test metrics.
    pub fn manifest(&self) -> Result<serde_json::Value> {
        let cfg = self.config();
        let (d_in, d_out, r) = (cfg.d_feat, cfg.d_emb, cfg.rank);
        let trainable = self.encoder().adapter().map_or(0, |a| a.trainable_count());
        Ok(json!({
            "config": cfg,
            "seed": cfg.seed,
            "method": cfg.method.label(),
            "loss": LOSS_NAME,
            "temperature": cfg.temperature,
            "steps": self.checkpoint.step,
            "stop_reason": self.stop,
            "param_counts": {
                "trainable": trainable,
                "full": param_count(ParamKind::Full, d_in, d_out, r),
                "lora": param_count(ParamKind::Lora, d_in, d_out, r),
                "orthogeo": param_count(ParamKind::OrthoGeo, d_in, d_out, r),
            },
            "final_metrics": {
                "val": self.evaluate(Split::Val)?,
                "test": self.evaluate(Split::Test)?,
            },
        }))
    }
}

pub fn convergence_csv(log: &[LogEntry]) -> String {
    let mut out = format!("{CONVERGENCE_HEADER}\n");
    for e in log {
        let loss = e.train_loss.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", e.step, loss, e.val_mrr));
    }
    out
}

/// Trains with validation every `eval_interval` steps, stopping at
/// `max_steps` or after `patience` evaluations without a `min_delta` gain.
/// The final parameters are kept.
pub fn train(config: &RunConfig) -> Result<TrainedRun> {
    train_observed(config, |_| Ok(()))
}

/// [`train`] with a callback after every optimizer step.
pub fn train_observed(config: &RunConfig, mut on_step: impl FnMut(&Trainer) -> Result<()>) -> Result<TrainedRun> {
    let mut t = Trainer::new(config)?;
    let cfg = t.config().clone();
    let first = t.val_mrr()?;
    let mut log = vec![LogEntry {
        step: 0,
        train_loss: None,
        val_mrr: first,
    }];
    let mut stop = StopReason::MaxSteps;
    if t.encoder().adapter().is_none() {
        stop = StopReason::NoAdapter;
    } else {
        let (mut best, mut stale) = (first, 0usize);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        while t.step_count() < cfg.max_steps {
            loss_sum += t.step()?;
            loss_n += 1;
            on_step(&t)?;
            let s = t.step_count();
            if s % cfg.eval_interval == 0 || s == cfg.max_steps {
                let val = t.val_mrr()?;
                log.push(LogEntry {
                    step: s,
                    train_loss: Some(loss_sum / loss_n as f64),
                    val_mrr: val,
                });
                loss_sum = 0.0;
                loss_n = 0;
                if cfg.patience > 0 {
                    if val > best + cfg.min_delta {
                        best = val;
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= cfg.patience {
                            stop = StopReason::EarlyStop;
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(TrainedRun {
        checkpoint: t.checkpoint(),
        log,
        stop,
        dataset: t.dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{grad_check, DEFAULT_FD_STEP};
    use crate::config::Method;
    use crate::reparam::SigmaMode;

    #[test]
    fn taxonomy_sizes() {
        assert_eq!(generate_taxonomy(1, 2, 4, 0.5, 0).unwrap().len(), 3);
        let t = generate_taxonomy(3, 5, 16, 0.5, 0).unwrap();
        assert_eq!(t.len(), 1 + 5 + 25 + 125);
        t.validate().unwrap();
        assert_eq!(t.children(0).count(), 5);
        assert_eq!(t.nodes().iter().filter(|n| n.depth == 3).count(), 125);
        assert!(generate_taxonomy(0, 5, 16, 0.5, 0).is_err());
        assert!(generate_taxonomy(2, 1, 16, 0.5, 0).is_err());
    }

    #[test]
    fn taxonomy_prototypes_are_unit_and_seeded() {
        let a = generate_taxonomy(2, 3, 8, 0.5, 7).unwrap();
        let b = generate_taxonomy(2, 3, 8, 0.5, 7).unwrap();
        let c = generate_taxonomy(2, 3, 8, 0.5, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for p in a.prototypes() {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_sizes(24), (20, 2, 2));
        assert_eq!(split_sizes(10), (8, 1, 1));
        assert_eq!(split_sizes(1), (1, 0, 0));
        assert_eq!(split_sizes(5), (4, 0, 1));
        for n in 1..200 {
            let (a, b, c) = split_sizes(n);
            assert_eq!(a + b + c, n);
        }
    }

    #[test]
    fn default_dataset_counts() {
        let ds = build_dataset(&RunConfig::default()).unwrap();
        assert_eq!(ds.examples().len(), 3744);
        assert_eq!(
            (ds.count(Split::Train), ds.count(Split::Val), ds.count(Split::Test)),
            (3120, 312, 312)
        );
        for id in ds.candidate_ids() {
            assert_eq!(ds.examples().iter().filter(|e| e.gold == *id).count(), 24);
        }
    }

    #[test]
    fn noiseless_descriptions_equal_prototypes() {
        let t = generate_taxonomy(2, 3, 8, 0.5, 1).unwrap();
        let ds = generate_descriptions(&t, 4, 0.0, 0.0, 1).unwrap();
        for e in ds.examples() {
            let p = t.prototype(e.gold);
            for i in 0..8 {
                assert!((e.description[i] - p[i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn base_identity_encoder_normalizes() {
        let enc = BiEncoder::base(DenseMatrix::identity(3), 0.05).unwrap();
        let out = enc.encode(&DenseVector::new(vec![3.0, 0.0, 4.0]).unwrap()).unwrap();
        assert_eq!(out.as_slice(), &[0.6, 0.0, 0.8]);
        let err = enc.encode(&DenseVector::zeros(3)).unwrap_err();
        assert_eq!(err, BenchError::DegenerateEncoder { column: 0 });
        assert!(BiEncoder::base(DenseMatrix::identity(3), 0.0).is_err());
    }

    #[test]
    fn infonce_small_cases() {
        let q = DenseMatrix::from_columns(&[&[1.0, 0.0]]);
        let single = infonce_loss(&q, &q, &[0], 0.05).unwrap();
        assert_eq!(single.loss, 0.0);
        let c = DenseMatrix::from_columns(&[&[0.0, 1.0], &[0.0, -1.0]]);
        let tie = infonce_loss(&q, &c, &[1], 0.05).unwrap();
        assert!((tie.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(infonce_loss(&q, &c, &[2], 0.05), Err(BenchError::MissingGold { gold: 2, .. })));
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        let mut rng = stream_rng(3, 0);
        let (d, n, m) = (5, 4, 3);
        let flat: Vec<f64> = (0..d * (n + m)).map(|_| StandardNormal.sample(&mut rng)).collect();
        let gold = [0, 2, 1, 2];
        let split = |v: &[f64]| {
            let q = DenseMatrix::new(d, n, v[..d * n].to_vec()).unwrap();
            let c = DenseMatrix::new(d, m, v[d * n..].to_vec()).unwrap();
            (q, c)
        };
        let (q, c) = split(&flat);
        let out = infonce_loss(&q, &c, &gold, 0.5).unwrap();
        let analytic: Vec<f64> = out.grad_queries.as_slice().iter().chain(out.grad_candidates.as_slice()).copied().collect();
        let report = grad_check(
            |v| {
                let (q, c) = split(v);
                infonce_loss(&q, &c, &gold, 0.5).unwrap().loss
            },
            &flat,
            &analytic,
            20,
            DEFAULT_FD_STEP,
            11,
        );
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    fn tiny_config(method: Method) -> RunConfig {
        RunConfig {
            method,
            depth: 1,
            branching: 4,
            d_feat: 8,
            d_emb: 8,
            rank: 2,
            per_concept: 10,
            batch_size: 16,
            max_steps: 20,
            eval_interval: 5,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        for method in [Method::OrthoGeo, Method::Lora] {
            let mut cfg = tiny_config(method);
            cfg.lr = 0.0;
            cfg.patience = 0;
            let run = train(&cfg).unwrap();
            let init = build_encoder(&cfg.resolved()).unwrap();
            assert_eq!(run.encoder(), &init, "{method:?}");
            assert_eq!(run.checkpoint.step, 20);
            assert_eq!(run.log.len(), 5);
        }
    }

    #[test]
    fn warm_start_matches_base() {
        let mut cfg = tiny_config(Method::OrthoGeo);
        cfg.sigma_mode = SigmaMode::Direct;
        let adapted = Trainer::new(&cfg).unwrap();
        let base = Trainer::new(&RunConfig {
            method: Method::Base,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(adapted.evaluate(Split::Val).unwrap(), base.evaluate(Split::Val).unwrap());
        let lora = Trainer::new(&RunConfig {
            method: Method::Lora,
            ..cfg
        })
        .unwrap();
        assert_eq!(lora.evaluate(Split::Val).unwrap(), base.evaluate(Split::Val).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_checkpoint_round_trips() {
        let cfg = tiny_config(Method::OrthoGeo);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.checkpoint.to_json(), b.checkpoint.to_json());
        assert_eq!(a.convergence_csv(), b.convergence_csv());
        let back = Checkpoint::from_json(&a.checkpoint.to_json()).unwrap();
        assert_eq!(back, a.checkpoint);
        assert!(Checkpoint::from_json("{").is_err());
    }

    #[test]
    fn base_method_does_not_train() {
        let run = train(&tiny_config(Method::Base)).unwrap();
        assert_eq!(run.stop, StopReason::NoAdapter);
        assert_eq!(run.log.len(), 1);
        assert!(run.checkpoint.optimizer.is_none());
    }

    #[test]
    fn convergence_csv_shape() {
        let csv = convergence_csv(&[
            LogEntry { step: 0, train_loss: None, val_mrr: 0.5 },
            LogEntry { step: 50, train_loss: Some(1.25), val_mrr: 0.75 },
        ]);
        assert_eq!(csv, "step,train_loss,val_mrr\n0,,0.5\n50,1.25,0.75\n");
    }
}

//! Contrastive training of the projection heads.
//!
//! For a sub-query `q` with positive components `P` and negatives `N`, all
//! projected and normalized, the loss is
//!
//! ```text
//! -log( sum_P exp(q.p / t) / (sum_P exp(q.p / t) + sum_N exp(q.n / t)) )
//! ```
//!
//! and the dataset loss is the sum over sub-queries. Gradients are computed
//! analytically through the normalization and the linear heads, then applied
//! with plain gradient descent.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::embedding::{dot, ComponentDescriptor, ComponentKind, EmbeddingError, EmbeddingProvider, EmbeddingVector, ProjectionHead};
use crate::index::{ComponentIndex, HeadSet};

pub const HEADS_FORMAT: &str = "rt2v-heads/1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no positive components")]
    EmptyPositives,
    #[error("non-finite similarity or loss")]
    NonFinite,
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training example {index}: {reason}")]
    InvalidExample { index: usize, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Provider(#[from] EmbeddingError),
    #[error("invalid head checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub negatives_per_positive: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { temperature: 0.07, learning_rate: 0.01, epochs: 10, batch_size: 16, seed: 0, negatives_per_positive: 8 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(TrainError::Config("temperature must be > 0".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A sub-query with components of its ground-truth video (positives) and
/// components of other videos (negatives).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub subquery_text: String,
    pub positives: Vec<ComponentDescriptor>,
    pub negatives: Vec<ComponentDescriptor>,
}

impl TrainingExample {
    fn check(&self, index: usize) -> Result<(), TrainError> {
        let invalid = |reason: &str| TrainError::InvalidExample { index, reason: reason.into() };
        if self.positives.is_empty() {
            return Err(invalid("positives must be non-empty"));
        }
        let pos: BTreeSet<_> = self.positives.iter().map(|d| (&d.video_id, d.kind, &d.key)).collect();
        if self.negatives.iter().any(|d| pos.contains(&(&d.video_id, d.kind, &d.key))) {
            return Err(invalid("negatives overlap positives"));
        }
        Ok(())
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Multi-positive InfoNCE loss for one sub-query.
pub fn nce_loss(
    q: &EmbeddingVector,
    positives: &[EmbeddingVector],
    negatives: &[EmbeddingVector],
    temperature: f64,
) -> Result<f64, TrainError> {
    if positives.is_empty() {
        return Err(TrainError::EmptyPositives);
    }
    let logits = |set: &[EmbeddingVector]| set.iter().map(|v| q.dot(v) / temperature).collect::<Vec<f64>>();
    let pos = logits(positives);
    let neg = logits(negatives);
    if pos.iter().chain(&neg).any(|s| !s.is_finite()) {
        return Err(TrainError::NonFinite);
    }
    let loss = log_sum_exp(pos.iter().chain(&neg).copied()) - log_sum_exp(pos.iter().copied());
    // rounding can leave -0.0 or -1e-17 when negatives vanish
    Ok(loss.max(0.0))
}

/// An example with raw (pre-projection) provider embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub query: Vec<f64>,
    pub positives: Vec<(ComponentKind, Vec<f64>)>,
    pub negatives: Vec<(ComponentKind, Vec<f64>)>,
}

/// Gradients with respect to each head's weights (row-major, same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub query: Vec<f64>,
    pub object: Vec<f64>,
    pub relation: Vec<f64>,
}

impl HeadGradients {
    fn zeros(heads: &HeadSet) -> Self {
        Self {
            query: vec![0.0; heads.query.weights.len()],
            object: vec![0.0; heads.object.weights.len()],
            relation: vec![0.0; heads.relation.weights.len()],
        }
    }

    fn add(&mut self, other: &HeadGradients) {
        for (a, b) in [(&mut self.query, &other.query), (&mut self.object, &other.object), (&mut self.relation, &other.relation)] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn for_kind(&mut self, kind: ComponentKind) -> &mut Vec<f64> {
        match kind {
            ComponentKind::Object => &mut self.object,
            ComponentKind::Relation => &mut self.relation,
        }
    }
}

struct Projected {
    unit: Vec<f64>,
    norm: f64,
}

fn project(head: &ProjectionHead, x: &[f64]) -> Result<Projected, TrainError> {
    if x.len() != head.in_dim {
        return Err(TrainError::DimensionMismatch { expected: head.in_dim, got: x.len() });
    }
    let u = head.matvec(x);
    let norm = dot(&u, &u).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(TrainError::NonFinite);
    }
    Ok(Projected { unit: u.iter().map(|v| v / norm).collect(), norm })
}

/// Back-propagate `dl/dv` through `v = u / |u|`, `u = W x` and accumulate
/// `dl/dW` into `grad`.
fn backprop(grad: &mut [f64], p: &Projected, dl_dv: &[f64], x: &[f64]) {
    let radial = dot(&p.unit, dl_dv);
    let in_dim = x.len();
    for (r, (d, v)) in dl_dv.iter().zip(&p.unit).enumerate() {
        let du = (d - v * radial) / p.norm;
        if du != 0.0 {
            let row = &mut grad[r * in_dim..(r + 1) * in_dim];
            row.iter_mut().zip(x).for_each(|(g, xi)| *g += du * xi);
        }
    }
}

/// Loss and analytic gradients for one example.
pub fn example_gradients(ex: &PreparedExample, heads: &HeadSet, temperature: f64) -> Result<(f64, HeadGradients), TrainError> {
    if ex.positives.is_empty() {
        return Err(TrainError::EmptyPositives);
    }
    let q = project(&heads.query, &ex.query)?;
    let comps: Vec<(ComponentKind, &Vec<f64>, Projected, bool)> = ex
        .positives
        .iter()
        .map(|c| (c, true))
        .chain(ex.negatives.iter().map(|c| (c, false)))
        .map(|((kind, x), pos)| Ok((*kind, x, project(heads.twin_head(*kind), x)?, pos)))
        .collect::<Result<_, TrainError>>()?;
    let logits: Vec<f64> = comps.iter().map(|c| dot(&q.unit, &c.2.unit) / temperature).collect();
    if logits.iter().any(|s| !s.is_finite()) {
        return Err(TrainError::NonFinite);
    }
    let lse_all = log_sum_exp(logits.iter().copied());
    let lse_pos = log_sum_exp(logits.iter().zip(&comps).filter(|(_, c)| c.3).map(|(s, _)| *s));
    let loss = lse_all - lse_pos;

    let mut grads = HeadGradients::zeros(heads);
    let mut dl_dq = vec![0.0; q.unit.len()];
    for (s, (kind, x, proj, pos)) in logits.iter().zip(&comps) {
        let mut dl_ds = (s - lse_all).exp();
        if *pos {
            dl_ds -= (s - lse_pos).exp();
        }
        let coeff = dl_ds / temperature;
        dl_dq.iter_mut().zip(&proj.unit).for_each(|(g, c)| *g += coeff * c);
        let dl_dc: Vec<f64> = q.unit.iter().map(|v| coeff * v).collect();
        backprop(grads.for_kind(*kind), proj, &dl_dc, x);
    }
    backprop(&mut grads.query, &q, &dl_dq, &ex.query);
    Ok((loss.max(0.0), grads))
}

/// Summed loss and gradients over a batch. Per-example terms may be computed
/// in parallel; they are reduced in batch order.
pub fn gradients(batch: &[PreparedExample], heads: &HeadSet, temperature: f64) -> Result<(f64, HeadGradients), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let parts: Vec<(f64, HeadGradients)> =
        batch.par_iter().map(|ex| example_gradients(ex, heads, temperature)).collect::<Result<_, _>>()?;
    let mut total = HeadGradients::zeros(heads);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add(g);
    }
    Ok((loss, total))
}

/// Summed loss of a batch, forward pass only.
pub fn batch_loss(batch: &[PreparedExample], heads: &HeadSet, temperature: f64) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for ex in batch {
        let proj = |head: &ProjectionHead, x: &[f64]| -> Result<EmbeddingVector, TrainError> {
            Ok(EmbeddingVector::from_unit(project(head, x)?.unit).map_err(|_| TrainError::NonFinite)?)
        };
        let q = proj(&heads.query, &ex.query)?;
        let pos = ex.positives.iter().map(|(k, x)| proj(heads.twin_head(*k), x)).collect::<Result<Vec<_>, _>>()?;
        let neg = ex.negatives.iter().map(|(k, x)| proj(heads.twin_head(*k), x)).collect::<Result<Vec<_>, _>>()?;
        total += nce_loss(&q, &pos, &neg, temperature)?;
    }
    Ok(total)
}

/// Identity heads plus uniform noise in `[-1e-3, 1e-3)` drawn from `rng`
/// (query head first, then object, then relation).
pub fn init_heads(dim: usize, rng: &mut ChaCha8Rng) -> HeadSet {
    let mut noisy = || {
        let mut h = ProjectionHead::identity(dim);
        h.weights.iter_mut().for_each(|w| *w += rng.gen_range(-1e-3..1e-3));
        h
    };
    let query = noisy();
    let object = noisy();
    let relation = noisy();
    HeadSet { query, object, relation }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub heads: HeadSet,
    /// Summed loss per epoch, evaluated batch by batch before each update.
    pub loss_trace: Vec<f64>,
}

/// Embed every distinct text once through the provider.
pub fn prepare(dataset: &[TrainingExample], provider: &dyn EmbeddingProvider) -> Result<Vec<PreparedExample>, TrainError> {
    let mut texts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in dataset {
        texts.entry(ex.subquery_text.as_str()).or_insert(0);
        for c in ex.positives.iter().chain(&ex.negatives) {
            texts.entry(c.rendered_text.as_str()).or_insert(0);
        }
    }
    let ordered: Vec<String> = texts.keys().map(|t| t.to_string()).collect();
    for (i, slot) in texts.values_mut().enumerate() {
        *slot = i;
    }
    let vecs = provider.embed_texts(&ordered)?;
    let raw = |t: &str| vecs[texts[t]].values().to_vec();
    Ok(dataset
        .iter()
        .map(|ex| PreparedExample {
            query: raw(&ex.subquery_text),
            positives: ex.positives.iter().map(|c| (c.kind, raw(&c.rendered_text))).collect(),
            negatives: ex.negatives.iter().map(|c| (c.kind, raw(&c.rendered_text))).collect(),
        })
        .collect())
}

/// Train the three heads with full-batch-ordered mini-batch gradient descent.
pub fn train(dataset: &[TrainingExample], provider: &dyn EmbeddingProvider, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (i, ex) in dataset.iter().enumerate() {
        ex.check(i)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut heads = init_heads(provider.dim(), &mut rng);
    let prepared = prepare(dataset, provider)?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PreparedExample> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let (loss, grads) = gradients(&batch, &heads, config.temperature).map_err(|e| match e {
                TrainError::NonFinite => TrainError::Diverged { step, loss: f64::NAN },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, loss });
            }
            epoch_loss += loss;
            let lr = config.learning_rate;
            for (w, g) in [
                (&mut heads.query.weights, &grads.query),
                (&mut heads.object.weights, &grads.object),
                (&mut heads.relation.weights, &grads.relation),
            ] {
                w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
            }
            if heads.query.weights.iter().chain(&heads.object.weights).chain(&heads.relation.weights).any(|w| !w.is_finite()) {
                return Err(TrainError::Diverged { step, loss });
            }
            step += 1;
        }
        loss_trace.push(epoch_loss);
    }
    Ok(TrainOutcome { heads, loss_trace })
}

/// Build training examples from ground truth: for each sub-query, positives
/// are the ground-truth video's components that involve a ground-truth
/// object (all of that video's components when none do), negatives are drawn
/// uniformly without replacement from other videos' components.
pub fn mine_examples(
    queries: &[(Vec<String>, String, Vec<u64>)],
    index: &ComponentIndex,
    negatives_per_positive: usize,
    seed: u64,
) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (subqueries, gt_video, gt_objects) in queries {
        let Some(components) = index.components(gt_video) else { continue };
        let all: Vec<ComponentDescriptor> = components.map(|(d, _)| d.clone()).collect();
        let involves = |d: &ComponentDescriptor| match d.kind {
            ComponentKind::Object => d.key.parse::<u64>().map(|id| gt_objects.contains(&id)).unwrap_or(false),
            ComponentKind::Relation => {
                let mut parts = d.key.split(':');
                let s = parts.next().and_then(|p| p.parse::<u64>().ok());
                let o = parts.nth(1).and_then(|p| p.parse::<u64>().ok());
                [s, o].into_iter().flatten().any(|id| gt_objects.contains(&id))
            }
        };
        let mut positives: Vec<ComponentDescriptor> = all.iter().filter(|d| involves(d)).cloned().collect();
        if positives.is_empty() {
            positives = all;
        }
        let pool: Vec<&ComponentDescriptor> = index.entries().iter().filter(|d| &d.video_id != gt_video).collect();
        for text in subqueries {
            let n = (negatives_per_positive * positives.len()).min(pool.len());
            let negatives = pool.choose_multiple(&mut rng, n).map(|d| (*d).clone()).collect();
            out.push(TrainingExample { subquery_text: text.clone(), positives: positives.clone(), negatives });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheckpoint {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim` weights.
    pub weights: Vec<f64>,
    pub seed: u64,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HeadsDocument {
    format: String,
    query: HeadCheckpoint,
    object: HeadCheckpoint,
    relation: HeadCheckpoint,
}

/// Canonical JSON checkpoint holding all three heads.
pub fn heads_to_json(heads: &HeadSet, config: &TrainConfig) -> String {
    let ckpt = |h: &ProjectionHead| HeadCheckpoint {
        in_dim: h.in_dim,
        out_dim: h.out_dim,
        weights: h.weights.clone(),
        seed: config.seed,
        config: config.clone(),
    };
    let doc = HeadsDocument { format: HEADS_FORMAT.into(), query: ckpt(&heads.query), object: ckpt(&heads.object), relation: ckpt(&heads.relation) };
    to_canonical_string(&doc).expect("head serialization")
}

pub fn heads_from_json(text: &str) -> Result<HeadSet, TrainError> {
    let doc: HeadsDocument = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if doc.format != HEADS_FORMAT {
        return Err(TrainError::Checkpoint(format!("unsupported format {:?}", doc.format)));
    }
    let head = |c: HeadCheckpoint| {
        ProjectionHead::from_weights(c.in_dim, c.out_dim, c.weights).ok_or_else(|| TrainError::Checkpoint("bad head shape or weights".into()))
    };
    Ok(HeadSet { query: head(doc.query)?, object: head(doc.object)?, relation: head(doc.relation)? })
}

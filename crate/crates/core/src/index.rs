//! Component index and coarse compositional retrieval.
//!
//! Each video contributes one object component per track and one relation
//! component per relation tuple. A video's score against sub-queries
//! `q_1..q_L` aggregates, over `l`, the best dot product between `q_l` and
//! any of the video's component vectors. Search is an exact linear scan
//! over a contiguous vector buffer, grouped by video.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::embedding::{
    dot, embed_projected, render_object_text, render_relation_text, ComponentDescriptor, ComponentKind,
    EmbeddingError, EmbeddingProvider, EmbeddingVector, ProjectionHead,
};
use crate::relations::RelationTuple;
use crate::twin::DigitalTwin;

pub const INDEX_FORMAT: &str = "rt2v-index/1";
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("embedding batch for video {video_id} failed: {source}")]
    Batch {
        video_id: String,
        #[source]
        source: EmbeddingError,
    },
    #[error("video {0} has no components")]
    EmptyVideo(String),
    #[error("duplicate component {video_id}/{key}")]
    DuplicateComponent { video_id: String, key: String },
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown video {0}")]
    UnknownVideo(String),
    #[error("no sub-queries to score")]
    NoSubQueries,
    #[error("sub-query vector {0} is not unit-norm")]
    NotUnit(usize),
    #[error("index is empty")]
    EmptyIndex,
    #[error("K must be at least 1")]
    ZeroK,
    #[error("invalid aggregation: {0}")]
    Aggregation(String),
    #[error("invalid index document: {0}")]
    Document(String),
}

/// Projection heads applied at index and query time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    pub query: ProjectionHead,
    pub object: ProjectionHead,
    pub relation: ProjectionHead,
}

impl HeadSet {
    pub fn identity(dim: usize) -> Self {
        Self { query: ProjectionHead::identity(dim), object: ProjectionHead::identity(dim), relation: ProjectionHead::identity(dim) }
    }

    pub fn twin_head(&self, kind: ComponentKind) -> &ProjectionHead {
        match kind {
            ComponentKind::Object => &self.object,
            ComponentKind::Relation => &self.relation,
        }
    }

    /// Short fingerprint of the component-side heads, recorded in index
    /// metadata so a stale index can be detected.
    pub fn twin_version(&self) -> String {
        let text = to_canonical_string(&(&self.object, &self.relation)).expect("head serialization");
        let h = text.bytes().fold(14695981039346656037u64, |h, b| (h ^ u64::from(b)).wrapping_mul(1099511628211));
        format!("{h:016x}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexMeta {
    pub format: String,
    pub provider_id: String,
    pub head_version: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentIndex {
    meta: IndexMeta,
    entries: Vec<ComponentDescriptor>,
    vectors: Vec<f64>,
    videos: BTreeMap<String, Range<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggMode {
    #[default]
    WeightedMean,
    Min,
}

impl std::str::FromStr for AggMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted_mean" | "mean" => Ok(AggMode::WeightedMean),
            "min" => Ok(AggMode::Min),
            other => Err(format!("unknown aggregation mode {other:?} (expected weighted_mean or min)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AggregationSpec {
    pub mode: AggMode,
    /// Per-sub-query weights for `weighted_mean`; uniform when absent.
    pub weights: Option<Vec<f64>>,
}

impl AggregationSpec {
    pub fn min() -> Self {
        Self { mode: AggMode::Min, weights: None }
    }

    pub fn uniform() -> Self {
        Self { mode: AggMode::WeightedMean, weights: None }
    }

    /// Normalized weights for `l` sub-queries.
    fn normalized_weights(&self, l: usize) -> Result<Vec<f64>, IndexError> {
        match &self.weights {
            None => Ok(vec![1.0 / l as f64; l]),
            Some(w) => {
                if w.len() != l {
                    return Err(IndexError::Aggregation(format!("{} weights for {l} sub-queries", w.len())));
                }
                if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                    return Err(IndexError::Aggregation("weights must be positive".into()));
                }
                let total: f64 = w.iter().sum();
                Ok(w.iter().map(|x| x / total).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQueryMatch {
    pub kind: ComponentKind,
    pub key: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseCandidate {
    pub video_id: String,
    pub score: f64,
    /// Best-matching component for each sub-query, in sub-query order.
    pub best: Vec<SubQueryMatch>,
}

/// Top-K candidates plus the full ranking over every indexed video.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseRetrieval {
    pub candidates: Vec<CoarseCandidate>,
    pub full: Vec<CoarseCandidate>,
}

/// Embed every track and relation of every twin.
///
/// `relations` maps video id to that video's tuples; videos without an entry
/// contribute objects only.
pub fn build_index(
    twins: &[DigitalTwin],
    relations: &BTreeMap<String, Vec<RelationTuple>>,
    provider: &dyn EmbeddingProvider,
    heads: &HeadSet,
) -> Result<ComponentIndex, IndexError> {
    let dim = provider.dim();
    for head in [&heads.object, &heads.relation] {
        if head.in_dim != dim {
            return Err(IndexError::DimensionMismatch { expected: dim, got: head.in_dim });
        }
    }
    let out_dim = heads.object.out_dim;
    if heads.relation.out_dim != out_dim {
        return Err(IndexError::DimensionMismatch { expected: out_dim, got: heads.relation.out_dim });
    }

    let mut items: Vec<(ComponentDescriptor, EmbeddingVector)> = Vec::new();
    for twin in twins {
        let batch_err = |source| IndexError::Batch { video_id: twin.video_id.clone(), source };
        let mut descriptors = Vec::new();
        for track in twin.track_ids() {
            descriptors.push(ComponentDescriptor {
                video_id: twin.video_id.clone(),
                kind: ComponentKind::Object,
                key: track.to_string(),
                rendered_text: render_object_text(twin, track).map_err(batch_err)?,
            });
        }
        for tuple in relations.get(&twin.video_id).map(Vec::as_slice).unwrap_or_default() {
            descriptors.push(ComponentDescriptor {
                video_id: twin.video_id.clone(),
                kind: ComponentKind::Relation,
                key: tuple.key(),
                rendered_text: render_relation_text(tuple, twin).map_err(batch_err)?,
            });
        }
        if descriptors.is_empty() {
            return Err(IndexError::EmptyVideo(twin.video_id.clone()));
        }
        for kind in [ComponentKind::Object, ComponentKind::Relation] {
            let group: Vec<&ComponentDescriptor> = descriptors.iter().filter(|d| d.kind == kind).collect();
            if group.is_empty() {
                continue;
            }
            let texts: Vec<String> = group.iter().map(|d| d.rendered_text.clone()).collect();
            let vecs = embed_projected(provider, heads.twin_head(kind), &texts).map_err(batch_err)?;
            items.extend(group.into_iter().cloned().zip(vecs));
        }
    }
    let meta = IndexMeta {
        format: INDEX_FORMAT.to_owned(),
        provider_id: provider.id(),
        head_version: heads.twin_version(),
        dim: out_dim,
    };
    ComponentIndex::from_entries(meta, items)
}

impl ComponentIndex {
    /// Assemble an index from embedded components. Entries are stored sorted
    /// by `(video_id, kind, key)`, so the result does not depend on input order.
    pub fn from_entries(meta: IndexMeta, mut items: Vec<(ComponentDescriptor, EmbeddingVector)>) -> Result<Self, IndexError> {
        items.sort_by(|a, b| (&a.0.video_id, a.0.kind, &a.0.key).cmp(&(&b.0.video_id, b.0.kind, &b.0.key)));
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(items.len());
        let mut vectors = Vec::with_capacity(items.len() * meta.dim);
        let mut videos: BTreeMap<String, Range<usize>> = BTreeMap::new();
        for (i, (desc, vec)) in items.into_iter().enumerate() {
            if vec.dim() != meta.dim {
                return Err(IndexError::DimensionMismatch { expected: meta.dim, got: vec.dim() });
            }
            if !seen.insert((desc.video_id.clone(), desc.kind, desc.key.clone())) {
                return Err(IndexError::DuplicateComponent { video_id: desc.video_id, key: desc.key });
            }
            videos.entry(desc.video_id.clone()).and_modify(|r| r.end = i + 1).or_insert(i..i + 1);
            vectors.extend_from_slice(vec.values());
            entries.push(desc);
        }
        Ok(Self { meta, entries, vectors, videos })
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn video_count(&self) -> usize {
        self.videos.len()
    }

    pub fn video_ids(&self) -> impl Iterator<Item = &str> {
        self.videos.keys().map(String::as_str)
    }

    pub fn entries(&self) -> &[ComponentDescriptor] {
        &self.entries
    }

    pub fn vector(&self, entry: usize) -> &[f64] {
        &self.vectors[entry * self.meta.dim..(entry + 1) * self.meta.dim]
    }

    /// Components of one video as `(descriptor, vector)` pairs.
    pub fn components(&self, video_id: &str) -> Option<impl Iterator<Item = (&ComponentDescriptor, &[f64])>> {
        let range = self.videos.get(video_id)?.clone();
        Some(range.map(move |i| (&self.entries[i], self.vector(i))))
    }

    fn check_queries(&self, subquery_vecs: &[EmbeddingVector]) -> Result<(), IndexError> {
        if subquery_vecs.is_empty() {
            return Err(IndexError::NoSubQueries);
        }
        for (i, v) in subquery_vecs.iter().enumerate() {
            if v.dim() != self.meta.dim {
                return Err(IndexError::DimensionMismatch { expected: self.meta.dim, got: v.dim() });
            }
            if !v.is_unit() {
                return Err(IndexError::NotUnit(i));
            }
        }
        Ok(())
    }

    fn score_unchecked(&self, video_id: &str, range: &Range<usize>, subquery_vecs: &[EmbeddingVector], weights: &[f64], mode: AggMode) -> CoarseCandidate {
        let best: Vec<SubQueryMatch> = subquery_vecs
            .iter()
            .map(|q| {
                let mut winner = range.start;
                let mut top = f64::NEG_INFINITY;
                for i in range.clone() {
                    let s = dot(q.values(), self.vector(i));
                    if s > top {
                        top = s;
                        winner = i;
                    }
                }
                let d = &self.entries[winner];
                SubQueryMatch { kind: d.kind, key: d.key.clone(), similarity: top }
            })
            .collect();
        let score = match mode {
            AggMode::WeightedMean => best.iter().zip(weights).map(|(m, w)| w * m.similarity).sum(),
            AggMode::Min => best.iter().map(|m| m.similarity).fold(f64::INFINITY, f64::min),
        };
        CoarseCandidate { video_id: video_id.to_owned(), score, best }
    }

    /// Compositional score of one video.
    pub fn compositional_score(
        &self,
        video_id: &str,
        subquery_vecs: &[EmbeddingVector],
        agg: &AggregationSpec,
    ) -> Result<CoarseCandidate, IndexError> {
        let range = self.videos.get(video_id).ok_or_else(|| IndexError::UnknownVideo(video_id.to_owned()))?;
        self.check_queries(subquery_vecs)?;
        let weights = agg.normalized_weights(subquery_vecs.len())?;
        Ok(self.score_unchecked(video_id, range, subquery_vecs, &weights, agg.mode))
    }

    /// Score every video and order by descending score, then ascending id.
    pub fn rank_all(&self, subquery_vecs: &[EmbeddingVector], agg: &AggregationSpec) -> Result<Vec<CoarseCandidate>, IndexError> {
        if self.videos.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        self.check_queries(subquery_vecs)?;
        let weights = agg.normalized_weights(subquery_vecs.len())?;
        let mut all: Vec<CoarseCandidate> = self
            .videos
            .par_iter()
            .map(|(id, range)| self.score_unchecked(id, range, subquery_vecs, &weights, agg.mode))
            .collect();
        all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.video_id.cmp(&b.video_id)));
        Ok(all)
    }

    /// Top-`k` candidates (`min(k, N)` of them) and the full ranking.
    pub fn retrieve_topk(&self, subquery_vecs: &[EmbeddingVector], agg: &AggregationSpec, k: usize) -> Result<CoarseRetrieval, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        let full = self.rank_all(subquery_vecs, agg)?;
        let candidates = full.iter().take(k).cloned().collect();
        Ok(CoarseRetrieval { candidates, full })
    }

    pub fn to_json(&self) -> String {
        let doc = IndexDocument {
            format: self.meta.format.clone(),
            provider_id: self.meta.provider_id.clone(),
            head_version: self.meta.head_version.clone(),
            dim: self.meta.dim,
            entries: self
                .entries
                .iter()
                .enumerate()
                .map(|(i, d)| IndexEntryDoc { descriptor: d.clone(), vector: self.vector(i).to_vec() })
                .collect(),
        };
        to_canonical_string(&doc).expect("index serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, IndexError> {
        let doc: IndexDocument = serde_json::from_str(text).map_err(|e| IndexError::Document(e.to_string()))?;
        if doc.format != INDEX_FORMAT {
            return Err(IndexError::Document(format!("unsupported format {:?}, expected {INDEX_FORMAT}", doc.format)));
        }
        let meta = IndexMeta { format: doc.format, provider_id: doc.provider_id, head_version: doc.head_version, dim: doc.dim };
        let items = doc
            .entries
            .into_iter()
            .map(|e| {
                EmbeddingVector::from_unit(e.vector)
                    .map(|v| (e.descriptor.clone(), v))
                    .map_err(|_| IndexError::Document(format!("vector for {}/{} is not unit-norm", e.descriptor.video_id, e.descriptor.key)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_entries(meta, items)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexDocument {
    format: String,
    provider_id: String,
    head_version: String,
    dim: usize,
    entries: Vec<IndexEntryDoc>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntryDoc {
    #[serde(flatten)]
    descriptor: ComponentDescriptor,
    vector: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{hash_embed, HashEmbedder};
    use crate::relations::Predicate;
    use crate::twin::{FrameRecord, InstanceRecord, SpatialProps};

    fn twin(id: &str, tracks: &[(u64, &str)]) -> DigitalTwin {
        DigitalTwin {
            video_id: id.into(),
            fps: 1.0,
            width: 8,
            height: 8,
            frames: vec![FrameRecord {
                frame_index: 0,
                timestamp_s: 0.0,
                instances: tracks
                    .iter()
                    .enumerate()
                    .map(|(i, (tid, cat))| InstanceRecord {
                        instance_id: *tid,
                        category: cat.to_string(),
                        attributes: vec![],
                        mask_ref: format!("{id}/{tid}_0.rle"),
                        spatial: SpatialProps::new(0.1 + 0.3 * i as f64, 0.5, 0.5, 0.1),
                    })
                    .collect(),
            }],
        }
    }

    fn unit(v: Vec<f64>) -> EmbeddingVector {
        EmbeddingVector::normalized(v).unwrap()
    }

    fn meta(dim: usize) -> IndexMeta {
        IndexMeta { format: INDEX_FORMAT.into(), provider_id: "test".into(), head_version: "0".into(), dim }
    }

    fn desc(video: &str, key: &str) -> ComponentDescriptor {
        ComponentDescriptor { video_id: video.into(), kind: ComponentKind::Object, key: key.into(), rendered_text: key.into() }
    }

    #[test]
    fn counts_objects_and_relations() {
        let t = twin("v1", &[(1, "cat"), (2, "table")]);
        let mut rels = BTreeMap::new();
        rels.insert("v1".to_string(), vec![RelationTuple { subject_id: 1, object_id: 2, predicate: Predicate::LeftOf, support: 1.0 }]);
        let p = HashEmbedder::new(32).unwrap();
        let idx = build_index(&[t.clone()], &rels, &p, &HeadSet::identity(32)).unwrap();
        assert_eq!(idx.len(), 3);
        let rel = idx.entries().iter().find(|d| d.kind == ComponentKind::Relation).unwrap();
        assert_eq!(rel.key, "1:left_of:2");
        assert_eq!(rel.rendered_text, "cat to the left of table");

        let idx = build_index(&[t], &BTreeMap::new(), &p, &HeadSet::identity(32)).unwrap();
        assert_eq!(idx.len(), 2);
        assert!(idx.entries().iter().all(|d| d.kind == ComponentKind::Object));
    }

    #[test]
    fn empty_video_rejected() {
        let mut t = twin("v", &[(1, "cat")]);
        t.frames[0].instances.clear();
        let p = HashEmbedder::new(16).unwrap();
        assert!(matches!(build_index(&[t], &BTreeMap::new(), &p, &HeadSet::identity(16)), Err(IndexError::EmptyVideo(_))));
    }

    #[test]
    fn exact_match_scores_one() {
        let e = hash_embed("red cat", 32).unwrap();
        let idx = ComponentIndex::from_entries(meta(32), vec![(desc("v", "1"), e.clone()), (desc("v", "2"), hash_embed("table", 32).unwrap())]).unwrap();
        let c = idx.compositional_score("v", &[e], &AggregationSpec::uniform()).unwrap();
        assert!((c.score - 1.0).abs() < 1e-12);
        assert_eq!(c.best[0].key, "1");
    }

    #[test]
    fn aggregators_hand_values() {
        // component basis e0; sub-queries with cosines 0.8 and 0.4 against it
        let comp = unit(vec![1.0, 0.0, 0.0]);
        let q1 = unit(vec![0.8, 0.6, 0.0]);
        let q2 = unit(vec![0.4, 0.0, (1.0f64 - 0.16).sqrt()]);
        let idx = ComponentIndex::from_entries(meta(3), vec![(desc("v", "1"), comp)]).unwrap();
        let qs = [q1, q2];
        let mean = idx.compositional_score("v", &qs, &AggregationSpec::uniform()).unwrap();
        let min = idx.compositional_score("v", &qs, &AggregationSpec::min()).unwrap();
        assert!((mean.score - 0.6).abs() < 1e-12);
        assert!((min.score - 0.4).abs() < 1e-12);
        let weighted = AggregationSpec { mode: AggMode::WeightedMean, weights: Some(vec![3.0, 1.0]) };
        assert!((idx.compositional_score("v", &qs, &weighted).unwrap().score - 0.7).abs() < 1e-12);
        let bad = AggregationSpec { mode: AggMode::WeightedMean, weights: Some(vec![1.0]) };
        assert!(matches!(idx.compositional_score("v", &qs, &bad), Err(IndexError::Aggregation(_))));
    }

    #[test]
    fn errors() {
        let idx = ComponentIndex::from_entries(meta(3), vec![(desc("v", "1"), unit(vec![1.0, 0.0, 0.0]))]).unwrap();
        let q = [unit(vec![0.0, 1.0, 0.0])];
        assert!(matches!(idx.compositional_score("nope", &q, &AggregationSpec::uniform()), Err(IndexError::UnknownVideo(_))));
        assert!(matches!(idx.compositional_score("v", &[], &AggregationSpec::uniform()), Err(IndexError::NoSubQueries)));
        assert!(matches!(idx.retrieve_topk(&q, &AggregationSpec::uniform(), 0), Err(IndexError::ZeroK)));
        let empty = ComponentIndex::from_entries(meta(3), vec![]).unwrap();
        assert!(matches!(empty.retrieve_topk(&q, &AggregationSpec::uniform(), 1), Err(IndexError::EmptyIndex)));
        let dup = ComponentIndex::from_entries(meta(3), vec![(desc("v", "1"), q[0].clone()), (desc("v", "1"), q[0].clone())]);
        assert!(matches!(dup, Err(IndexError::DuplicateComponent { .. })));
    }

    #[test]
    fn ties_break_by_video_id() {
        let e = unit(vec![1.0, 0.0]);
        let idx = ComponentIndex::from_entries(meta(2), vec![(desc("b", "1"), e.clone()), (desc("a", "1"), e.clone()), (desc("c", "1"), unit(vec![0.0, 1.0]))]).unwrap();
        let r = idx.retrieve_topk(&[e], &AggregationSpec::uniform(), 10).unwrap();
        let ids: Vec<&str> = r.candidates.iter().map(|c| c.video_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(r.full.len(), 3);
    }

    #[test]
    fn json_round_trip() {
        let p = HashEmbedder::new(16).unwrap();
        let idx = build_index(&[twin("a", &[(1, "cat"), (2, "dog")]), twin("b", &[(5, "ball")])], &BTreeMap::new(), &p, &HeadSet::identity(16)).unwrap();
        let text = idx.to_json();
        let back = ComponentIndex::from_json(&text).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_json(), text);
        assert!(ComponentIndex::from_json(&text.replace(INDEX_FORMAT, "rt2v-index/0")).is_err());
    }
}

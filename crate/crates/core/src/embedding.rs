//! Component text rendering, embedding providers and projection heads.
//!
//! Twin components (object tracks and relation tuples) and sub-queries are
//! rendered to short natural-language strings, embedded by a pluggable
//! [`EmbeddingProvider`], then passed through a trainable linear
//! [`ProjectionHead`] and re-normalized. Every vector that leaves this module
//! has unit L2 norm, so cosine similarity is a dot product.

use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relations::RelationTuple;
use crate::twin::DigitalTwin;

pub const DEFAULT_DIM: usize = 256;

const FNV_OFFSET: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding dimension must be at least 8 (got {0})")]
    DimensionTooSmall(usize),
    #[error("vector is not unit-norm or has non-finite entries")]
    NotUnit,
    #[error("projection collapsed the vector to zero")]
    ZeroProjection,
    #[error("unknown track {track} in video {video_id}")]
    UnknownTrack { video_id: String, track: u64 },
    #[error("embedding provider failed: {0}")]
    Provider(String),
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalize raw values to unit length. Returns `None` for zero or
    /// non-finite input.
    pub fn normalized(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wrap values that are already unit-norm (within 1e-6).
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        let v = Self(values);
        if v.is_unit() {
            Ok(v)
        } else {
            Err(EmbeddingError::NotUnit)
        }
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut values = vec![0.0; dim];
        values[index] = 1.0;
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn is_unit(&self) -> bool {
        !self.0.is_empty()
            && self.0.iter().all(|v| v.is_finite())
            && (self.0.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Object,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentDescriptor {
    pub video_id: String,
    pub kind: ComponentKind,
    /// Track id for objects, `subject:predicate:object` for relations.
    pub key: String,
    pub rendered_text: String,
}

/// Text-to-vector backend.
pub trait EmbeddingProvider: Send + Sync {
    /// Stable identifier recorded in index metadata.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// Embed a batch; output has the same length and order as `texts`.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
    /// Providers that cannot serve concurrent batches return `true`; the
    /// engine then wraps them in [`SingleFlight`].
    fn single_flight(&self) -> bool {
        false
    }
}

/// Serializes calls to an inner provider.
pub struct SingleFlight {
    inner: Arc<dyn EmbeddingProvider>,
    gate: Mutex<()>,
}

impl SingleFlight {
    pub fn new(inner: Arc<dyn EmbeddingProvider>) -> Self {
        Self { inner, gate: Mutex::new(()) }
    }

    /// Wrap `provider` only when it declares single-flight.
    pub fn wrap_if_needed(provider: Arc<dyn EmbeddingProvider>) -> Arc<dyn EmbeddingProvider> {
        if provider.single_flight() {
            Arc::new(SingleFlight::new(provider))
        } else {
            provider
        }
    }
}

impl EmbeddingProvider for SingleFlight {
    fn id(&self) -> String {
        self.inner.id()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let _guard = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        self.inner.embed_texts(texts)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

/// Lowercase and split on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Signed feature hashing of tokens with 64-bit FNV-1a.
///
/// Text with no tokens maps to the basis vector at index 0.
pub fn hash_embed(text: &str, dim: usize) -> Result<EmbeddingVector, EmbeddingError> {
    if dim < 8 {
        return Err(EmbeddingError::DimensionTooSmall(dim));
    }
    let mut acc = vec![0.0f64; dim];
    for token in tokenize(text) {
        let h = fnv1a(token.as_bytes());
        let bucket = (h % dim as u64) as usize;
        acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    }
    Ok(EmbeddingVector::normalized(acc).unwrap_or_else(|| EmbeddingVector::basis(dim, 0)))
}

/// Offline provider backed by [`hash_embed`].
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim < 8 {
            return Err(EmbeddingError::DimensionTooSmall(dim));
        }
        Ok(Self { dim })
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn id(&self) -> String {
        format!("fnv1a-hash/{}", self.dim)
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| hash_embed(t, self.dim)).collect()
    }
}

/// Timeout and retry policy shared by the remote clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    pub timeout_s: f64,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl RemoteConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self { url: url.into(), model: model.into(), api_key: None, timeout_s: 30.0, retries: 2, backoff_ms: 500 }
    }

    pub(crate) fn client(&self) -> Result<reqwest::blocking::Client, String> {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(self.timeout_s))
            .build()
            .map_err(|e| e.to_string())
    }

    /// POST `body` as JSON, retrying transport errors and 5xx/429 responses
    /// with exponential backoff.
    pub(crate) fn post_json(&self, body: &serde_json::Value) -> Result<serde_json::Value, String> {
        let client = self.client()?;
        let mut last_err = String::new();
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.backoff_ms.saturating_mul(1 << (attempt - 1))));
            }
            let mut req = client.post(&self.url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<serde_json::Value>().map_err(|e| format!("invalid response body: {e}"));
                    }
                    last_err = format!("HTTP {status}");
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(last_err);
                    }
                }
                Err(e) => last_err = e.to_string(),
            }
            tracing::warn!(url = %self.url, attempt, error = %last_err, "remote call failed");
        }
        Err(format!("{last_err} after {} attempt(s)", self.retries + 1))
    }
}

/// Client for a generic `{"model", "input"} -> {"data": [{"index", "embedding"}]}`
/// embeddings endpoint. Returned vectors are re-normalized.
pub struct RemoteEmbeddingProvider {
    config: RemoteConfig,
    dim: usize,
}

impl RemoteEmbeddingProvider {
    pub fn new(config: RemoteConfig, dim: usize) -> Self {
        Self { config, dim }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vec<f64>,
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn id(&self) -> String {
        format!("remote:{}/{}", self.config.model, self.dim)
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = serde_json::json!({ "model": self.config.model, "input": texts });
        let raw = self.config.post_json(&body).map_err(EmbeddingError::Provider)?;
        let parsed: EmbeddingResponse =
            serde_json::from_value(raw).map_err(|e| EmbeddingError::Provider(format!("unexpected response shape: {e}")))?;
        let mut slots: Vec<Option<EmbeddingVector>> = vec![None; texts.len()];
        for datum in parsed.data {
            if datum.embedding.len() != self.dim {
                return Err(EmbeddingError::DimensionMismatch { expected: self.dim, got: datum.embedding.len() });
            }
            let slot = slots
                .get_mut(datum.index)
                .ok_or_else(|| EmbeddingError::Provider(format!("response index {} out of range", datum.index)))?;
            *slot = Some(
                EmbeddingVector::normalized(datum.embedding)
                    .ok_or_else(|| EmbeddingError::Provider("zero or non-finite embedding".into()))?,
            );
        }
        slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or_else(|| EmbeddingError::Provider(format!("response missing index {i}"))))
            .collect()
    }
}

/// Linear map `W` (`out_dim x in_dim`, row-major) applied before
/// re-normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
}

impl ProjectionHead {
    pub fn identity(dim: usize) -> Self {
        let mut weights = vec![0.0; dim * dim];
        for i in 0..dim {
            weights[i * dim + i] = 1.0;
        }
        Self { in_dim: dim, out_dim: dim, weights }
    }

    pub fn from_weights(in_dim: usize, out_dim: usize, weights: Vec<f64>) -> Option<Self> {
        (in_dim > 0 && out_dim > 0 && weights.len() == in_dim * out_dim && weights.iter().all(|w| w.is_finite()))
            .then_some(Self { in_dim, out_dim, weights })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.in_dim..(r + 1) * self.in_dim]
    }

    /// `W x` without normalization.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim).map(|r| dot(self.row(r), x)).collect()
    }
}

/// `normalize(W v)`.
pub fn apply_projection(vec: &EmbeddingVector, head: &ProjectionHead) -> Result<EmbeddingVector, EmbeddingError> {
    if head.in_dim != vec.dim() {
        return Err(EmbeddingError::DimensionMismatch { expected: head.in_dim, got: vec.dim() });
    }
    EmbeddingVector::normalized(head.matvec(vec.values())).ok_or(EmbeddingError::ZeroProjection)
}

/// Embed a batch through the provider, then project each vector.
pub fn embed_projected(
    provider: &dyn EmbeddingProvider,
    head: &ProjectionHead,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    let raw = provider.embed_texts(texts)?;
    if raw.len() != texts.len() {
        return Err(EmbeddingError::Provider(format!("provider returned {} vectors for {} texts", raw.len(), texts.len())));
    }
    raw.iter().map(|v| apply_projection(v, head)).collect()
}

fn thirds<'a>(v: f64, labels: [&'a str; 3]) -> &'a str {
    if v < 1.0 / 3.0 {
        labels[0]
    } else if v < 2.0 / 3.0 {
        labels[1]
    } else {
        labels[2]
    }
}

fn size_bucket(size: f64) -> &'static str {
    if size < 0.05 {
        "small"
    } else if size < 0.25 {
        "medium"
    } else {
        "large"
    }
}

/// `<category>; <attributes>; <h> <v>; depth <d>; size <s>` from the track's
/// per-frame means. The attribute segment is dropped when the track has none.
pub fn render_object_text(twin: &DigitalTwin, track_id: u64) -> Result<String, EmbeddingError> {
    let track = twin
        .track(track_id)
        .ok_or_else(|| EmbeddingError::UnknownTrack { video_id: twin.video_id.clone(), track: track_id })?;
    let m = track.mean;
    let mut parts = vec![track.category.clone()];
    if !track.attributes.is_empty() {
        parts.push(track.attributes.join("; "));
    }
    parts.push(format!("{} {}", thirds(m.x, ["left", "center", "right"]), thirds(m.y, ["top", "middle", "bottom"])));
    parts.push(format!("depth {}", thirds(m.depth, ["near", "mid", "far"])));
    parts.push(format!("size {}", size_bucket(m.size)));
    Ok(parts.join("; "))
}

/// `<subject category> <predicate words> <object category>`.
pub fn render_relation_text(tuple: &RelationTuple, twin: &DigitalTwin) -> Result<String, EmbeddingError> {
    let category = |id: u64| {
        twin.track(id)
            .map(|t| t.category)
            .ok_or_else(|| EmbeddingError::UnknownTrack { video_id: twin.video_id.clone(), track: id })
    };
    Ok(format!("{} {} {}", category(tuple.subject_id)?, tuple.predicate.words(), category(tuple.object_id)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relations::Predicate;
    use crate::twin::{FrameRecord, InstanceRecord, SpatialProps};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_track(cat: &str, attrs: &[&str], s: SpatialProps) -> DigitalTwin {
        DigitalTwin {
            video_id: "v".into(),
            fps: 1.0,
            width: 8,
            height: 8,
            frames: vec![FrameRecord {
                frame_index: 0,
                timestamp_s: 0.0,
                instances: vec![
                    InstanceRecord {
                        instance_id: 1,
                        category: cat.into(),
                        attributes: attrs.iter().map(|a| a.to_string()).collect(),
                        mask_ref: "m".into(),
                        spatial: s,
                    },
                    InstanceRecord {
                        instance_id: 2,
                        category: "table".into(),
                        attributes: vec![],
                        mask_ref: "n".into(),
                        spatial: SpatialProps::new(0.9, 0.9, 0.9, 0.5),
                    },
                ],
            }],
        }
    }

    #[test]
    fn object_template() {
        let t = one_track("cat", &["orange"], SpatialProps::new(0.1, 0.5, 0.2, 0.01));
        assert_eq!(render_object_text(&t, 1).unwrap(), "cat; orange; left middle; depth near; size small");
        assert_eq!(render_object_text(&t, 2).unwrap(), "table; right bottom; depth far; size large");
        assert!(matches!(render_object_text(&t, 7), Err(EmbeddingError::UnknownTrack { track: 7, .. })));
    }

    #[test]
    fn bucket_boundaries() {
        let third = 1.0 / 3.0;
        let t = one_track("cat", &[], SpatialProps::new(third, third, 2.0 / 3.0, 0.05));
        assert_eq!(render_object_text(&t, 1).unwrap(), "cat; center middle; depth far; size medium");
        let t = one_track("cat", &["a", "b"], SpatialProps::new(third - 1e-12, 0.0, 0.0, 0.25));
        assert_eq!(render_object_text(&t, 1).unwrap(), "cat; a; b; left top; depth near; size large");
    }

    #[test]
    fn relation_text_all_predicates() {
        let t = one_track("cat", &[], SpatialProps::new(0.1, 0.5, 0.2, 0.01));
        let words: Vec<String> = Predicate::ALL
            .iter()
            .map(|&p| render_relation_text(&RelationTuple { subject_id: 1, object_id: 2, predicate: p, support: 1.0 }, &t).unwrap())
            .collect();
        assert_eq!(words[6], "cat to the left of table");
        assert_eq!(words[1], "cat approaching table");
        assert_eq!(words[4], "cat in front of table");
        let distinct: std::collections::BTreeSet<_> = words.iter().collect();
        assert_eq!(distinct.len(), 10);
        assert!(words.iter().all(|w| w.starts_with("cat ") && w.ends_with(" table")));
        let bad = RelationTuple { subject_id: 1, object_id: 9, predicate: Predicate::Near, support: 1.0 };
        assert!(render_relation_text(&bad, &t).is_err());
    }

    #[test]
    fn hash_embed_properties() {
        let a = hash_embed("cat", 256).unwrap();
        let b = hash_embed("cat", 256).unwrap();
        assert_eq!(a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(a.is_unit());
        assert_eq!(hash_embed("cat cat", 256).unwrap(), a);
        assert_eq!(hash_embed("CAT!", 256).unwrap(), a);
        assert_eq!(hash_embed("  ;; ", 16).unwrap(), EmbeddingVector::basis(16, 0));
        assert!(matches!(hash_embed("x", 4), Err(EmbeddingError::DimensionTooSmall(4))));
    }

    #[test]
    fn hash_embed_direct_computation() {
        // "cat" hashes to one bucket with one sign; the vector is that signed basis vector.
        let h = "cat".bytes().fold(14695981039346656037u64, |h, b| (h ^ b as u64).wrapping_mul(1099511628211));
        let mut expected = vec![0.0; 64];
        expected[(h % 64) as usize] = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
        assert_eq!(hash_embed("cat", 64).unwrap().values(), &expected[..]);
    }

    #[test]
    fn projection_identity_and_scale() {
        let v = hash_embed("red ball near the dog", 32).unwrap();
        assert_eq!(apply_projection(&v, &ProjectionHead::identity(32)).unwrap(), v);
        let mut twice = ProjectionHead::identity(32);
        twice.weights.iter_mut().for_each(|w| *w *= 2.0);
        let out = apply_projection(&v, &twice).unwrap();
        for (a, b) in out.values().iter().zip(v.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(apply_projection(&v, &ProjectionHead::identity(16)), Err(EmbeddingError::DimensionMismatch { .. })));
    }

    #[test]
    fn projection_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (din, dout) = (12, 9);
        let w: Vec<f64> = (0..din * dout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let head = ProjectionHead::from_weights(din, dout, w.clone()).unwrap();
        let v = EmbeddingVector::normalized((0..din).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut y = vec![0.0; dout];
        for (r, out) in y.iter_mut().enumerate() {
            for c in 0..din {
                *out += w[r * din + c] * v.values()[c];
            }
        }
        let n = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        let got = apply_projection(&v, &head).unwrap();
        for (a, b) in got.values().iter().zip(&y) {
            assert!((a - b / n).abs() < 1e-9);
        }
    }

    struct Flaky;
    impl EmbeddingProvider for Flaky {
        fn id(&self) -> String {
            "flaky".into()
        }
        fn dim(&self) -> usize {
            8
        }
        fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
            texts.iter().map(|t| hash_embed(t, 8)).collect()
        }
        fn single_flight(&self) -> bool {
            true
        }
    }

    #[test]
    fn single_flight_wrapping() {
        let p = SingleFlight::wrap_if_needed(Arc::new(Flaky));
        assert_eq!(p.id(), "flaky");
        assert!(!p.single_flight());
        let out = p.embed_texts(&["a b".into()]).unwrap();
        assert_eq!(out[0], hash_embed("a b", 8).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn batch_equals_single(texts in proptest::collection::vec("[a-z ]{0,24}", 0..12)) {
            let p = HashEmbedder::new(DEFAULT_DIM).unwrap();
            let batch = p.embed_texts(&texts).unwrap();
            prop_assert_eq!(batch.len(), texts.len());
            for (t, v) in texts.iter().zip(&batch) {
                prop_assert_eq!(&p.embed_texts(std::slice::from_ref(t)).unwrap()[0], v);
                prop_assert!(v.is_unit());
            }
        }

        #[test]
        fn cosine_equals_dot(a in "[a-z ]{1,30}", b in "[a-z ]{1,30}") {
            let va = hash_embed(&a, 64).unwrap();
            let vb = hash_embed(&b, 64).unwrap();
            let na = va.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = vb.values().iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = va.dot(&vb) / (na * nb);
            prop_assert!((cos - va.dot(&vb)).abs() < 1e-6);
        }
    }
}

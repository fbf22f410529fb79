//! End-to-end retrieval engine: configuration, artifact loading, the
//! decompose / coarse / rerank pipeline, and benchmark evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{load_benchmark, BenchError, Benchmark};
use crate::decomposer::{decompose, embed_subqueries, DecomposeError, SubQuery};
use crate::embedding::{EmbeddingError, EmbeddingProvider, HashEmbedder, RemoteConfig, RemoteEmbeddingProvider, SingleFlight, DEFAULT_DIM};
use crate::index::{build_index, AggMode, AggregationSpec, ComponentIndex, HeadSet, IndexError, DEFAULT_K};
use crate::llm::{FixtureLlmClient, LlmClient, RemoteLlmClient};
use crate::mask::{MaskBitmap, MaskError};
use crate::metrics::{MaskSet, MetricError, MetricReport, QueryOutcome, DEFAULT_K_SET};
use crate::reasoner::{rerank, ObjectMasks, ReasonError, RerankConfig, Tier, DEFAULT_MAX_REFINEMENTS, DEFAULT_TAU};
use crate::relations::{extract_relations, RelationConfig};
use crate::tools::{RemoteTool, ToolRegistry};
use crate::trainer::{heads_from_json, TrainError};
use crate::twin::{serialize_twin, DigitalTwin};

pub const ENV_EMBED_URL: &str = "RT2V_EMBED_URL";
pub const ENV_LLM_URL: &str = "RT2V_LLM_URL";
pub const ENV_API_KEY: &str = "RT2V_API_KEY";
pub const ENV_FIXTURES: &str = "RT2V_FIXTURES";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub embed_url: Option<String>,
    pub embed_model: String,
    pub llm_url: Option<String>,
    pub llm_model: String,
    pub tool_url: Option<String>,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub dim: usize,
    pub k: usize,
    pub tau: f64,
    pub agg: AggMode,
    pub max_refinements: usize,
    pub tool_timeout_ms: u64,
    /// Offline LLM responses; enables fixture mode.
    pub fixtures: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub heads: Option<PathBuf>,
    /// Directory for enriched twins; nothing is persisted when unset.
    pub enrichment_dir: Option<PathBuf>,
    pub metric_k: Vec<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            embed_url: None,
            embed_model: "text-embedding-3-small".into(),
            llm_url: None,
            llm_model: "gpt-4o".into(),
            tool_url: None,
            api_key: None,
            dim: DEFAULT_DIM,
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            agg: AggMode::WeightedMean,
            max_refinements: DEFAULT_MAX_REFINEMENTS,
            tool_timeout_ms: 10_000,
            fixtures: None,
            benchmark: None,
            index: None,
            heads: None,
            enrichment_dir: None,
            metric_k: DEFAULT_K_SET.to_vec(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("index does not match the engine: {0}")]
    StaleIndex(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("decomposition failed: {0}")]
    Decompose(#[from] DecomposeError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Reason(#[from] ReasonError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |e| EngineError::Io { path: path.display().to_string(), message: e.to_string() }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self, EngineError> {
        toml::from_str(text).map_err(|e: toml::de::Error| EngineError::Config(e.to_string()))
    }

    /// Fill unset endpoint fields from environment-style lookups.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let nonempty = |k: &str| lookup(k).filter(|v| !v.trim().is_empty());
        if self.embed_url.is_none() {
            self.embed_url = nonempty(ENV_EMBED_URL);
        }
        if self.llm_url.is_none() {
            self.llm_url = nonempty(ENV_LLM_URL);
        }
        if self.api_key.is_none() {
            self.api_key = nonempty(ENV_API_KEY);
        }
        if self.fixtures.is_none() {
            self.fixtures = nonempty(ENV_FIXTURES).map(PathBuf::from);
        }
    }

    pub fn fixture_mode(&self) -> bool {
        self.fixtures.is_some()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.tau.is_finite() && (0.0..=1.0).contains(&self.tau)) {
            return bad(format!("tau must lie in [0,1] (got {})", self.tau));
        }
        if self.dim < 8 {
            return bad(format!("dim must be at least 8 (got {})", self.dim));
        }
        if self.metric_k.is_empty() || self.metric_k.contains(&0) {
            return bad("metric_k must hold positive K values".into());
        }
        if let Some(f) = &self.fixtures {
            if !f.is_dir() {
                return bad(format!("fixture directory {} does not exist", f.display()));
            }
        } else if self.llm_url.is_none() {
            return bad(format!("no LLM configured: set {ENV_LLM_URL} or a fixtures directory"));
        }
        Ok(())
    }

    fn remote(&self, url: &str, model: &str) -> RemoteConfig {
        RemoteConfig { api_key: self.api_key.clone(), ..RemoteConfig::new(url, model) }
    }

    pub fn provider(&self) -> Arc<dyn EmbeddingProvider> {
        match &self.embed_url {
            Some(url) => SingleFlight::wrap_if_needed(Arc::new(RemoteEmbeddingProvider::new(self.remote(url, &self.embed_model), self.dim))),
            None => Arc::new(HashEmbedder::new(self.dim).expect("dim validated")),
        }
    }

    pub fn llm(&self) -> Arc<dyn LlmClient> {
        match (&self.fixtures, &self.llm_url) {
            (Some(root), _) => Arc::new(FixtureLlmClient::new(root)),
            (None, Some(url)) => Arc::new(RemoteLlmClient::new(self.remote(url, &self.llm_model))),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn tools(&self) -> ToolRegistry {
        let mut tools = ToolRegistry::stubs().with_timeout(Duration::from_millis(self.tool_timeout_ms));
        if let Some(url) = &self.tool_url {
            for name in ["captioner", "action_recognizer"] {
                tools.register(name, Arc::new(RemoteTool::new(self.remote(url, name))));
            }
        }
        tools
    }
}

/// Per-request overrides.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RetrieveOptions {
    pub k: Option<usize>,
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictSummary {
    pub relevance: f64,
    pub trace: String,
    pub object_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEntry {
    pub rank: usize,
    pub video_id: String,
    pub tier: Tier,
    pub score: f64,
    pub coarse_score: f64,
    pub verdict: Option<VerdictSummary>,
    pub masks: Vec<ObjectMasks>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub decompose_ms: f64,
    pub coarse_ms: f64,
    pub rerank_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResponse {
    pub query: String,
    pub k: usize,
    pub tau: f64,
    pub agg: AggMode,
    pub subqueries: Vec<SubQuery>,
    pub entries: Vec<ResponseEntry>,
    pub warnings: Vec<String>,
    pub timings: StageTimings,
}

impl RetrievalResponse {
    pub fn to_json(&self) -> String {
        crate::canonical::to_canonical_string(self).expect("response serialization")
    }

    pub fn rank_of(&self, video_id: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.video_id == video_id).map(|e| e.rank)
    }

    /// Human-readable table of the top entries.
    pub fn to_table(&self, limit: usize) -> String {
        let mut out = format!("query: {}\nk: {}  tau: {}\n", self.query, self.k, self.tau);
        for sq in &self.subqueries {
            out.push_str(&format!("  - [{:?}] {}\n", sq.kind, sq.text).to_lowercase());
        }
        let idw = self.entries.iter().map(|e| e.video_id.len()).max().unwrap_or(5).max(5);
        out.push_str(&format!("{:>4}  {:<idw$}  {:<13}  {:>7}  {:>7}  objects\n", "rank", "video", "tier", "score", "coarse"));
        for e in self.entries.iter().take(limit) {
            let tier = match e.tier {
                Tier::Verified => "verified",
                Tier::SubThreshold => "sub_threshold",
                Tier::Uncandidated => "uncandidated",
            };
            let objects = e.verdict.as_ref().map(|v| v.object_ids.iter().map(u64::to_string).collect::<Vec<_>>().join(",")).unwrap_or_default();
            out.push_str(&format!("{:>4}  {:<idw$}  {:<13}  {:>7.4}  {:>7.4}  {}\n", e.rank, e.video_id, tier, e.score, e.coarse_score, objects));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// An immutable, fully loaded engine.
pub struct Engine {
    config: EngineConfig,
    provider: Arc<dyn EmbeddingProvider>,
    llm: Arc<dyn LlmClient>,
    tools: ToolRegistry,
    heads: HeadSet,
    index: ComponentIndex,
    twins: BTreeMap<String, DigitalTwin>,
    benchmark: Option<Benchmark>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).field("videos", &self.twins.len()).finish()
    }
}

/// Index every twin with default relation settings.
pub fn index_twins(twins: &[DigitalTwin], provider: &dyn EmbeddingProvider, heads: &HeadSet) -> Result<ComponentIndex, IndexError> {
    let cfg = RelationConfig::default();
    let relations = twins.iter().map(|t| (t.video_id.clone(), extract_relations(t, &cfg))).collect();
    build_index(twins, &relations, provider, heads)
}

impl Engine {
    /// Assemble an engine from parts; checks that the index was built with
    /// the same provider and heads.
    pub fn from_parts(
        config: EngineConfig,
        provider: Arc<dyn EmbeddingProvider>,
        llm: Arc<dyn LlmClient>,
        tools: ToolRegistry,
        heads: HeadSet,
        index: ComponentIndex,
        twins: BTreeMap<String, DigitalTwin>,
    ) -> Result<Self, EngineError> {
        if config.k == 0 {
            return Err(EngineError::Config("k must be at least 1".into()));
        }
        let meta = index.meta();
        if meta.provider_id != provider.id() {
            return Err(EngineError::StaleIndex(format!("built with provider {}, engine uses {}", meta.provider_id, provider.id())));
        }
        if meta.head_version != heads.twin_version() {
            return Err(EngineError::StaleIndex(format!("built with heads {}, engine uses {}", meta.head_version, heads.twin_version())));
        }
        if let Some(missing) = index.video_ids().find(|v| !twins.contains_key(*v)) {
            return Err(EngineError::StaleIndex(format!("video {missing} has no twin")));
        }
        Ok(Self { config, provider, llm, tools, heads, index, twins, benchmark: None })
    }

    /// Load the benchmark, heads, and index named by `config`. A missing
    /// index path builds the index in memory.
    pub fn load(config: EngineConfig) -> Result<Self, EngineError> {
        config.validate()?;
        let root = config.benchmark.clone().ok_or_else(|| EngineError::Config("a benchmark directory is required".into()))?;
        let bench = load_benchmark(&root)?;
        let provider = config.provider();
        let heads = match &config.heads {
            Some(path) => heads_from_json(&fs::read_to_string(path).map_err(io_err(path))?)?,
            None => HeadSet::identity(config.dim),
        };
        let index = match &config.index {
            Some(path) => ComponentIndex::from_json(&fs::read_to_string(path).map_err(io_err(path))?)?,
            None => {
                let twins: Vec<DigitalTwin> = bench.twins.values().cloned().collect();
                index_twins(&twins, provider.as_ref(), &heads)?
            }
        };
        let llm = config.llm();
        let tools = config.tools();
        let twins = bench.twins.clone();
        let mut engine = Self::from_parts(config, provider, llm, tools, heads, index, twins)?;
        engine.benchmark = Some(bench);
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn index(&self) -> &ComponentIndex {
        &self.index
    }

    pub fn heads(&self) -> &HeadSet {
        &self.heads
    }

    pub fn twin(&self, video_id: &str) -> Option<&DigitalTwin> {
        self.twins.get(video_id)
    }

    pub fn benchmark(&self) -> Option<&Benchmark> {
        self.benchmark.as_ref()
    }

    /// Read the RLE text of one instance mask in one frame.
    pub fn mask_text(&self, video_id: &str, instance_id: u64, frame_index: u64) -> Option<Result<String, EngineError>> {
        let twin = self.twins.get(video_id)?;
        let inst = twin
            .frames
            .iter()
            .find(|f| f.frame_index == frame_index)?
            .instances
            .iter()
            .find(|i| i.instance_id == instance_id)?;
        let bench = self.benchmark.as_ref()?;
        let path = bench.mask_dir().join(&inst.mask_ref);
        Some(fs::read_to_string(&path).map_err(io_err(&path)))
    }

    /// Run the full pipeline for one query.
    pub fn retrieve(&self, query: &str, opts: RetrieveOptions) -> Result<RetrievalResponse, EngineError> {
        self.retrieve_inner(query, opts, self.config.enrichment_dir.as_deref())
    }

    /// As [`Engine::retrieve`] but never persists enrichments.
    pub fn retrieve_read_only(&self, query: &str, opts: RetrieveOptions) -> Result<RetrievalResponse, EngineError> {
        self.retrieve_inner(query, opts, None)
    }

    fn retrieve_inner(&self, query: &str, opts: RetrieveOptions, persist: Option<&Path>) -> Result<RetrievalResponse, EngineError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        let k = opts.k.unwrap_or(self.config.k);
        let tau = opts.tau.unwrap_or(self.config.tau);
        if k == 0 {
            return Err(EngineError::Config("k must be at least 1".into()));
        }
        if !(tau.is_finite() && (0.0..=1.0).contains(&tau)) {
            return Err(EngineError::Config(format!("tau must lie in [0,1] (got {tau})")));
        }
        let clock = Instant::now();
        let subqueries = decompose(query, self.llm.as_ref())?;
        let t_decompose = clock.elapsed();

        let clock = Instant::now();
        let vecs = embed_subqueries(&subqueries, self.provider.as_ref(), &self.heads.query)?;
        let agg = match self.config.agg {
            AggMode::Min => AggregationSpec::min(),
            AggMode::WeightedMean => AggregationSpec { mode: AggMode::WeightedMean, weights: Some(subqueries.iter().map(|s| s.weight).collect()) },
        };
        let coarse = self.index.retrieve_topk(&vecs, &agg, k)?;
        let t_coarse = clock.elapsed();

        let clock = Instant::now();
        let cfg = RerankConfig { tau, max_refinements: self.config.max_refinements };
        let outcome = rerank(query, &subqueries, &coarse, &self.twins, self.llm.as_ref(), &self.tools, &cfg)?;
        let t_rerank = clock.elapsed();

        if let Some(dir) = persist {
            for (video_id, twin) in outcome.enriched_twins() {
                let path = dir.join(format!("{video_id}.json"));
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                fs::write(&path, serialize_twin(&twin) + "\n").map_err(io_err(&path))?;
            }
        }

        let ms = |d: Duration| d.as_secs_f64() * 1000.0;
        let timings = if self.config.fixture_mode() {
            StageTimings::default()
        } else {
            StageTimings { decompose_ms: ms(t_decompose), coarse_ms: ms(t_coarse), rerank_ms: ms(t_rerank) }
        };
        let entries = outcome
            .ranking
            .entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| ResponseEntry {
                rank: i + 1,
                video_id: e.video_id,
                tier: e.tier,
                score: e.score,
                coarse_score: e.coarse_score,
                verdict: e.verdict.map(|v| VerdictSummary { relevance: v.relevance, trace: v.trace, object_ids: v.object_ids }),
                masks: e.masks,
            })
            .collect();
        Ok(RetrievalResponse {
            query: query.to_owned(),
            k,
            tau,
            agg: self.config.agg,
            subqueries,
            entries,
            warnings: outcome.ranking.warnings,
            timings,
        })
    }

    /// Run every benchmark query and score the rankings and grounding masks.
    pub fn evaluate(&self) -> Result<Evaluation, EngineError> {
        let bench = self.benchmark.as_ref().ok_or_else(|| EngineError::Config("evaluation needs a benchmark".into()))?;
        let mut outcomes = Vec::new();
        let mut responses = Vec::new();
        for q in &bench.manifest.queries {
            let response = self.retrieve(&q.text, RetrieveOptions::default())?;
            let rank = response.rank_of(&q.gt_video_id).ok_or_else(|| EngineError::StaleIndex(format!("{} missing from ranking", q.gt_video_id)))?;
            let mut predicted: MaskSet = BTreeMap::new();
            if let Some(top) = response.entries.first().filter(|e| e.video_id == q.gt_video_id) {
                for obj in &top.masks {
                    for fm in &obj.frames {
                        let mask: MaskBitmap = bench.read_mask(&fm.mask_ref)?;
                        predicted.insert((obj.object_id, fm.frame_index), mask);
                    }
                }
            }
            outcomes.push(QueryOutcome { query_id: q.query_id.clone(), rank, predicted, ground_truth: bench.gt_masks(q)? });
            responses.push(response);
        }
        let report = MetricReport::compute(&outcomes, &self.config.metric_k, None)?;
        Ok(Evaluation { report, responses })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub responses: Vec<RetrievalResponse>,
}

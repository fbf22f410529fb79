//! Specialist tool registry and execution plans used for just-in-time
//! refinement of a twin.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::RemoteConfig;
use crate::twin::DigitalTwin;

pub const MAX_PLAN_CALLS: usize = 4;

/// One tool invocation. An empty `instance_ids` targets every track present
/// in the frame range; `frames` is an inclusive `[start, end]` range over
/// frame indices and defaults to the whole video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default)]
    pub instance_ids: Vec<u64>,
    #[serde(default)]
    pub frames: Option<[u64; 2]>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ExecutionPlan {
    pub calls: Vec<ToolCall>,
}

/// What a tool is asked about: one instance over an inclusive frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToolTarget {
    pub instance_id: u64,
    pub frame_start: u64,
    pub frame_end: u64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ToolError {
    #[error("timed out")]
    Timeout,
    #[error("{0}")]
    Failed(String),
}

/// A specialist model producing attribute text for a target. Tools read the
/// twin and never modify it.
pub trait Tool: Send + Sync {
    fn describe(&self, twin: &DigitalTwin, target: ToolTarget, params: &BTreeMap<String, String>) -> Result<String, ToolError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrichmentRecord {
    pub instance_id: u64,
    pub frame_start: u64,
    pub frame_end: u64,
    pub text: String,
    pub tool: String,
    /// Wall-clock milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolFailure {
    pub tool: String,
    pub instance_id: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PlanOutcome {
    pub records: Vec<EnrichmentRecord>,
    pub failures: Vec<ToolFailure>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("plan names unregistered tool {0:?}")]
    UnknownTool(String),
    #[error("plan has {0} calls; at most {MAX_PLAN_CALLS} allowed")]
    TooManyCalls(usize),
    #[error("plan has no calls")]
    Empty,
    #[error("plan targets unknown instance {0}")]
    UnknownInstance(u64),
    #[error("plan frame range [{0}, {1}] selects no frames")]
    EmptyRange(u64, u64),
}

#[derive(Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Arc<dyn Tool>>,
    timeout: Option<Duration>,
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolRegistry").field("tools", &self.names()).field("timeout", &self.timeout).finish()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with the offline stub tools (`captioner`, `action_recognizer`).
    pub fn stubs() -> Self {
        let mut r = Self::new();
        r.register("captioner", Arc::new(StubCaptioner));
        r.register("action_recognizer", Arc::new(StubActionRecognizer));
        r
    }

    /// Register (or replace) a tool under `name`.
    pub fn register(&mut self, name: impl Into<String>, tool: Arc<dyn Tool>) {
        self.tools.insert(name.into(), tool);
    }

    /// Per-call timeout; calls exceeding it yield a failure record.
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn names(&self) -> Vec<String> {
        self.tools.keys().cloned().collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tools.contains_key(name)
    }

    fn invoke(&self, name: &str, twin: &Arc<DigitalTwin>, target: ToolTarget, params: &BTreeMap<String, String>) -> Result<String, ToolError> {
        let tool = Arc::clone(&self.tools[name]);
        let Some(timeout) = self.timeout else {
            return tool.describe(twin, target, params);
        };
        let (tx, rx) = mpsc::channel();
        let twin = Arc::clone(twin);
        let params = params.clone();
        // a timed-out worker is left to finish on its own; its result is dropped
        thread::spawn(move || {
            let _ = tx.send(tool.describe(&twin, target, &params));
        });
        rx.recv_timeout(timeout).unwrap_or(Err(ToolError::Timeout))
    }
}

/// Resolve plan targets against the twin without running anything.
pub fn resolve_plan(plan: &ExecutionPlan, twin: &DigitalTwin, tools: &ToolRegistry) -> Result<Vec<(String, ToolTarget, BTreeMap<String, String>)>, PlanError> {
    if plan.calls.is_empty() {
        return Err(PlanError::Empty);
    }
    if plan.calls.len() > MAX_PLAN_CALLS {
        return Err(PlanError::TooManyCalls(plan.calls.len()));
    }
    if let Some(call) = plan.calls.iter().find(|c| !tools.contains(&c.tool)) {
        return Err(PlanError::UnknownTool(call.tool.clone()));
    }
    let tracks: BTreeSet<u64> = twin.track_ids().into_iter().collect();
    let mut out = Vec::new();
    for call in &plan.calls {
        let (start, end) = match call.frames {
            Some([a, b]) => (a.min(b), a.max(b)),
            None => (0, u64::MAX),
        };
        let frames: Vec<_> = twin.frames.iter().filter(|f| f.frame_index >= start && f.frame_index <= end).collect();
        if frames.is_empty() {
            return Err(PlanError::EmptyRange(start, end));
        }
        let ids: Vec<u64> = if call.instance_ids.is_empty() {
            frames.iter().flat_map(|f| f.instances.iter().map(|i| i.instance_id)).collect::<BTreeSet<_>>().into_iter().collect()
        } else {
            call.instance_ids.clone()
        };
        for id in ids {
            if !tracks.contains(&id) {
                return Err(PlanError::UnknownInstance(id));
            }
            let present: Vec<u64> =
                frames.iter().filter(|f| f.instances.iter().any(|i| i.instance_id == id)).map(|f| f.frame_index).collect();
            let (fs, fe) = match (present.first(), present.last()) {
                (Some(a), Some(b)) => (*a, *b),
                _ => (start, end.min(frames[frames.len() - 1].frame_index)),
            };
            out.push((call.tool.clone(), ToolTarget { instance_id: id, frame_start: fs, frame_end: fe }, call.params.clone()));
        }
    }
    Ok(out)
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Execute every call of a plan. The whole plan is rejected before any call
/// runs if it names an unknown tool or target; individual tool failures
/// (including timeouts) become failure records while other calls proceed.
pub fn run_plan(plan: &ExecutionPlan, twin: &DigitalTwin, tools: &ToolRegistry) -> Result<PlanOutcome, PlanError> {
    let calls = resolve_plan(plan, twin, tools)?;
    let shared = Arc::new(twin.clone());
    let mut outcome = PlanOutcome::default();
    for (tool, target, params) in calls {
        match tools.invoke(&tool, &shared, target, &params) {
            Ok(text) => outcome.records.push(EnrichmentRecord {
                instance_id: target.instance_id,
                frame_start: target.frame_start,
                frame_end: target.frame_end,
                text,
                tool,
                timestamp_ms: now_ms(),
            }),
            Err(e) => outcome.failures.push(ToolFailure { tool, instance_id: target.instance_id, message: e.to_string() }),
        }
    }
    Ok(outcome)
}

/// A record that could not be applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub instance_id: u64,
    pub tool: String,
    pub reason: String,
}

/// The attribute string appended for a record: text tagged with its tool.
pub fn tagged_attribute(record: &EnrichmentRecord) -> String {
    format!("{} [via {}]", record.text, record.tool)
}

/// Produce an enriched copy of `twin`: each record's tagged text is appended
/// to the targeted instance's attributes in every frame of its range.
/// Nothing else changes, and duplicates are not collapsed.
pub fn apply_enrichment(twin: &DigitalTwin, records: &[EnrichmentRecord]) -> (DigitalTwin, Vec<SkippedRecord>) {
    let mut out = twin.clone();
    let mut skipped = Vec::new();
    for record in records {
        let mut applied = false;
        for frame in out.frames.iter_mut().filter(|f| f.frame_index >= record.frame_start && f.frame_index <= record.frame_end) {
            for inst in frame.instances.iter_mut().filter(|i| i.instance_id == record.instance_id) {
                inst.attributes.push(tagged_attribute(record));
                applied = true;
            }
        }
        if !applied {
            let reason = if twin.has_track(record.instance_id) { "instance absent from frame range" } else { "dangling instance reference" };
            skipped.push(SkippedRecord { instance_id: record.instance_id, tool: record.tool.clone(), reason: reason.into() });
        }
    }
    (out, skipped)
}

/// Offline captioner: `params["text"]` when given, otherwise a description
/// assembled from the twin's own category and attributes.
pub struct StubCaptioner;

impl Tool for StubCaptioner {
    fn describe(&self, twin: &DigitalTwin, target: ToolTarget, params: &BTreeMap<String, String>) -> Result<String, ToolError> {
        if let Some(text) = params.get("text") {
            return Ok(text.clone());
        }
        let track = twin.track(target.instance_id).ok_or_else(|| ToolError::Failed("unknown instance".into()))?;
        let attrs: Vec<&str> = track.attributes.iter().filter(|a| !a.contains("[via ")).map(String::as_str).collect();
        Ok(if attrs.is_empty() { format!("a {}", track.category) } else { format!("a {} {}", attrs.join(" "), track.category) })
    }
}

/// Offline action recognizer: reports horizontal/vertical motion of the
/// target's centroid between the first and last frame of the range.
pub struct StubActionRecognizer;

impl Tool for StubActionRecognizer {
    fn describe(&self, twin: &DigitalTwin, target: ToolTarget, _params: &BTreeMap<String, String>) -> Result<String, ToolError> {
        let spots: Vec<_> = twin
            .frames_in_order()
            .into_iter()
            .filter(|f| f.frame_index >= target.frame_start && f.frame_index <= target.frame_end)
            .filter_map(|f| f.instances.iter().find(|i| i.instance_id == target.instance_id).map(|i| i.spatial))
            .collect();
        let (Some(first), Some(last)) = (spots.first(), spots.last()) else {
            return Err(ToolError::Failed("instance not visible in range".into()));
        };
        let (dx, dy) = (last.x - first.x, last.y - first.y);
        Ok(if dx.abs().max(dy.abs()) < 0.05 {
            "stationary".to_owned()
        } else if dx.abs() >= dy.abs() {
            if dx > 0.0 { "moving right" } else { "moving left" }.to_owned()
        } else if dy > 0.0 {
            "moving down".to_owned()
        } else {
            "moving up".to_owned()
        })
    }
}

/// Remote tool speaking the same POST/JSON conventions as the LLM client:
/// `{"model", "video_id", "instance_id", "frames", "params"}` in,
/// `{"text"}` out.
pub struct RemoteTool {
    config: RemoteConfig,
}

impl RemoteTool {
    pub fn new(config: RemoteConfig) -> Self {
        Self { config }
    }
}

impl Tool for RemoteTool {
    fn describe(&self, twin: &DigitalTwin, target: ToolTarget, params: &BTreeMap<String, String>) -> Result<String, ToolError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "video_id": twin.video_id,
            "instance_id": target.instance_id,
            "frames": [target.frame_start, target.frame_end],
            "params": params,
        });
        let resp = self.config.post_json(&body).map_err(ToolError::Failed)?;
        resp.get("text").and_then(|t| t.as_str()).map(str::to_owned).ok_or_else(|| ToolError::Failed("response lacks text".into()))
    }
}

//! Fine-grained reranking of coarse candidates.
//!
//! Each candidate goes through a structured exchange with the LLM over its
//! canonical twin. Every turn answers either with a refinement plan (tools
//! run, the twin is enriched, the exchange resumes) or with a verdict.
//! Candidates whose relevance reaches the threshold form the verified tier;
//! the rest stay in the ranking below them, followed by every video that was
//! not a candidate, so the final ranking always covers the whole database.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposer::SubQuery;
use crate::index::{CoarseCandidate, CoarseRetrieval};
use crate::llm::{LlmClient, Prompt, SchemaId};
use crate::tools::{apply_enrichment, run_plan, ExecutionPlan, ToolRegistry};
use crate::twin::{serialize_twin, DigitalTwin};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_MAX_REFINEMENTS: usize = 2;
pub const MAX_REASKS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerVerdict {
    pub relevance: f64,
    pub trace: String,
    pub object_ids: Vec<u64>,
}

/// One LLM turn of the reasoning exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReasonerTurn {
    Refine { plan: ExecutionPlan },
    Verdict { verdict: ReasonerVerdict },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Verified,
    SubThreshold,
    Uncandidated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMask {
    pub frame_index: u64,
    pub mask_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectMasks {
    pub object_id: u64,
    pub frames: Vec<FrameMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub video_id: String,
    pub tier: Tier,
    /// Relevance for verified entries, coarse score otherwise.
    pub score: f64,
    pub coarse_score: f64,
    pub verdict: Option<ReasonerVerdict>,
    pub masks: Vec<ObjectMasks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRanking {
    pub entries: Vec<RankedEntry>,
    pub warnings: Vec<String>,
}

impl FinalRanking {
    /// 1-based rank of a video, if present.
    pub fn rank_of(&self, video_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.video_id == video_id).map(|p| p + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub tau: f64,
    pub max_refinements: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, max_refinements: DEFAULT_MAX_REFINEMENTS }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReasonError {
    #[error("tau must lie in [0,1] (got {0})")]
    Tau(f64),
    #[error("no twin for candidate {0}")]
    MissingTwin(String),
    #[error("object {object_id} does not resolve to a track of {video_id}")]
    UnknownObject { video_id: String, object_id: u64 },
}

/// Result of reasoning over one candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOutcome {
    pub video_id: String,
    pub verdict: Option<ReasonerVerdict>,
    /// The enriched twin, when at least one refinement was applied.
    pub enriched: Option<DigitalTwin>,
    pub warnings: Vec<String>,
    pub llm_calls: usize,
    pub refinements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub ranking: FinalRanking,
    pub candidates: Vec<CandidateOutcome>,
}

impl RerankOutcome {
    /// Enriched twins keyed by video id.
    pub fn enriched_twins(&self) -> BTreeMap<String, DigitalTwin> {
        self.candidates.iter().filter_map(|c| c.enriched.clone().map(|t| (c.video_id.clone(), t))).collect()
    }
}

fn reasoning_prompt(
    query: &str,
    subqueries: &[SubQuery],
    twin: &DigitalTwin,
    tools: &ToolRegistry,
    refinements_left: usize,
    feedback: Option<&str>,
) -> String {
    let sub = serde_json::to_string(subqueries).expect("sub-query serialization");
    let mut text = format!(
        "[{schema}]\nDecide whether the video described by the digital twin below satisfies the query.\n\
         Query: {query}\nSub-queries: {sub}\n",
        schema = SchemaId::Reasoning.as_str(),
    );
    if refinements_left > 0 {
        text.push_str(&format!(
            "If information needed to decide is missing from the twin, you may request a refinement \
             ({refinements_left} left) with at most {} tool calls. Tools: {}.\n",
            crate::tools::MAX_PLAN_CALLS,
            tools.names().join(", ")
        ));
        text.push_str(
            "Refinement response: {\"action\":\"refine\",\"plan\":{\"calls\":[{\"tool\":<name>,\"instance_ids\":[<id>...],\"frames\":[<start>,<end>],\"params\":{}}]}}\n",
        );
    } else {
        text.push_str("No refinements remain: you must answer with a verdict now.\n");
    }
    text.push_str(
        "Verdict response: {\"action\":\"verdict\",\"verdict\":{\"relevance\":<0..1>,\"trace\":<reasoning>,\"object_ids\":[<instance id>...]}}\n",
    );
    text.push_str("Digital twin: ");
    text.push_str(&serialize_twin(twin));
    text.push('\n');
    if let Some(err) = feedback {
        text.push_str(&format!("Your previous response was rejected: {err}\n"));
    }
    text
}

fn validate_verdict(v: &ReasonerVerdict, twin: &DigitalTwin) -> Result<(), String> {
    if !(v.relevance.is_finite() && (0.0..=1.0).contains(&v.relevance)) {
        return Err(format!("relevance must lie in [0,1] (got {})", v.relevance));
    }
    if v.trace.trim().is_empty() {
        return Err("trace must be non-empty".into());
    }
    if let Some(id) = v.object_ids.iter().find(|id| !twin.has_track(**id)) {
        return Err(format!("object id {id} is not a track of this video"));
    }
    Ok(())
}

/// Run the reasoning exchange for one candidate. Never fails: an exhausted
/// exchange yields no verdict and a warning.
pub fn reason_candidate(
    query: &str,
    subqueries: &[SubQuery],
    twin: &DigitalTwin,
    llm: &dyn LlmClient,
    tools: &ToolRegistry,
    max_refinements: usize,
) -> CandidateOutcome {
    let mut current = twin.clone();
    let mut out = CandidateOutcome {
        video_id: twin.video_id.clone(),
        verdict: None,
        enriched: None,
        warnings: Vec::new(),
        llm_calls: 0,
        refinements: 0,
    };
    let mut feedback: Option<String> = None;
    let mut rejected = 0;
    loop {
        let left = max_refinements.saturating_sub(out.refinements);
        let prompt = Prompt {
            schema: SchemaId::Reasoning,
            query: query.to_owned(),
            video_id: Some(twin.video_id.clone()),
            turn: out.llm_calls,
            text: reasoning_prompt(query, subqueries, &current, tools, left, feedback.as_deref()),
        };
        out.llm_calls += 1;
        let response = match llm.complete(&prompt) {
            Ok(r) => r,
            Err(e) => {
                out.warnings.push(format!("{}: LLM call failed: {e}", twin.video_id));
                break;
            }
        };
        let problem = match serde_json::from_str::<ReasonerTurn>(&response) {
            Err(e) => format!("response does not match {}: {e}", SchemaId::Reasoning.as_str()),
            Ok(ReasonerTurn::Verdict { verdict }) => match validate_verdict(&verdict, &current) {
                Ok(()) => {
                    out.verdict = Some(verdict);
                    break;
                }
                Err(e) => e,
            },
            Ok(ReasonerTurn::Refine { .. }) if left == 0 => "refinement is no longer allowed; answer with a verdict".to_owned(),
            Ok(ReasonerTurn::Refine { plan }) => match run_plan(&plan, &current, tools) {
                Ok(result) => {
                    for f in &result.failures {
                        out.warnings.push(format!("{}: tool {} failed on instance {}: {}", twin.video_id, f.tool, f.instance_id, f.message));
                    }
                    let (enriched, skipped) = apply_enrichment(&current, &result.records);
                    for s in skipped {
                        out.warnings.push(format!("{}: enrichment for instance {} skipped: {}", twin.video_id, s.instance_id, s.reason));
                    }
                    current = enriched;
                    out.refinements += 1;
                    rejected = 0;
                    feedback = None;
                    continue;
                }
                Err(e) => format!("invalid plan: {e}"),
            },
        };
        rejected += 1;
        if rejected > MAX_REASKS {
            out.warnings.push(format!("{}: no valid reasoning response after {MAX_REASKS} re-asks: {problem}", twin.video_id));
            break;
        }
        feedback = Some(problem);
    }
    if out.refinements > 0 {
        out.enriched = Some(current);
    }
    out
}

/// Mask references, per object id, for every frame where the object appears.
pub fn extract_masks(verdict: &ReasonerVerdict, twin: &DigitalTwin) -> Result<Vec<ObjectMasks>, ReasonError> {
    verdict
        .object_ids
        .iter()
        .map(|&object_id| {
            let frames: Vec<FrameMask> = twin
                .frames_in_order()
                .into_iter()
                .filter_map(|f| {
                    f.instances
                        .iter()
                        .find(|i| i.instance_id == object_id)
                        .map(|i| FrameMask { frame_index: f.frame_index, mask_ref: i.mask_ref.clone() })
                })
                .collect();
            if frames.is_empty() {
                return Err(ReasonError::UnknownObject { video_id: twin.video_id.clone(), object_id });
            }
            Ok(ObjectMasks { object_id, frames })
        })
        .collect()
}

fn by_coarse(a: &(f64, &str), b: &(f64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Rerank the top-K candidates and assemble the full ranking.
///
/// `twins` must hold every candidate's twin. Candidates are reasoned over in
/// parallel; the ranking depends only on the tier rules.
pub fn rerank(
    query: &str,
    subqueries: &[SubQuery],
    coarse: &CoarseRetrieval,
    twins: &BTreeMap<String, DigitalTwin>,
    llm: &dyn LlmClient,
    tools: &ToolRegistry,
    cfg: &RerankConfig,
) -> Result<RerankOutcome, ReasonError> {
    if !(cfg.tau.is_finite() && (0.0..=1.0).contains(&cfg.tau)) {
        return Err(ReasonError::Tau(cfg.tau));
    }
    let candidate_twins: Vec<(&CoarseCandidate, &DigitalTwin)> = coarse
        .candidates
        .iter()
        .map(|c| twins.get(&c.video_id).map(|t| (c, t)).ok_or_else(|| ReasonError::MissingTwin(c.video_id.clone())))
        .collect::<Result<_, _>>()?;
    let outcomes: Vec<CandidateOutcome> = candidate_twins
        .par_iter()
        .map(|(_, twin)| reason_candidate(query, subqueries, twin, llm, tools, cfg.max_refinements))
        .collect();

    let mut verified = Vec::new();
    let mut below = Vec::new();
    let mut warnings = Vec::new();
    for ((cand, twin), outcome) in candidate_twins.iter().zip(&outcomes) {
        warnings.extend(outcome.warnings.iter().cloned());
        let masks = match &outcome.verdict {
            Some(v) => extract_masks(v, outcome.enriched.as_ref().unwrap_or(twin))?,
            None => Vec::new(),
        };
        let mut entry = RankedEntry {
            video_id: cand.video_id.clone(),
            tier: Tier::SubThreshold,
            score: cand.score,
            coarse_score: cand.score,
            verdict: outcome.verdict.clone(),
            masks,
        };
        match &outcome.verdict {
            Some(v) if v.relevance >= cfg.tau => {
                entry.tier = Tier::Verified;
                entry.score = v.relevance;
                verified.push(entry);
            }
            _ => below.push(entry),
        }
    }
    verified.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| by_coarse(&(a.coarse_score, &a.video_id), &(b.coarse_score, &b.video_id))));
    below.sort_by(|a, b| by_coarse(&(a.coarse_score, &a.video_id), &(b.coarse_score, &b.video_id)));

    let mut rest: Vec<RankedEntry> = coarse
        .full
        .iter()
        .filter(|c| !coarse.candidates.iter().any(|k| k.video_id == c.video_id))
        .map(|c| RankedEntry {
            video_id: c.video_id.clone(),
            tier: Tier::Uncandidated,
            score: c.score,
            coarse_score: c.score,
            verdict: None,
            masks: Vec::new(),
        })
        .collect();
    rest.sort_by(|a, b| by_coarse(&(a.coarse_score, &a.video_id), &(b.coarse_score, &b.video_id)));

    let mut entries = verified;
    entries.extend(below);
    entries.extend(rest);
    Ok(RerankOutcome { ranking: FinalRanking { entries, warnings }, candidates: outcomes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedLlmClient;
    use crate::twin::{FrameRecord, InstanceRecord, SpatialProps};

    fn twin(id: &str) -> DigitalTwin {
        let inst = |iid: u64| InstanceRecord {
            instance_id: iid,
            category: "cat".into(),
            attributes: vec![],
            mask_ref: format!("{id}/{iid}_f.rle"),
            spatial: SpatialProps::new(0.5, 0.5, 0.5, 0.1),
        };
        DigitalTwin {
            video_id: id.into(),
            fps: 1.0,
            width: 8,
            height: 8,
            frames: vec![
                FrameRecord { frame_index: 0, timestamp_s: 0.0, instances: vec![inst(1), inst(2)] },
                FrameRecord { frame_index: 1, timestamp_s: 1.0, instances: vec![inst(2)] },
                FrameRecord { frame_index: 2, timestamp_s: 2.0, instances: vec![inst(1)] },
            ],
        }
    }

    fn verdict(r: f64, ids: &[u64]) -> String {
        serde_json::json!({"action": "verdict", "verdict": {"relevance": r, "trace": "because", "object_ids": ids}}).to_string()
    }

    fn refine() -> String {
        serde_json::json!({"action": "refine", "plan": {"calls": [{"tool": "captioner", "instance_ids": [1]}]}}).to_string()
    }

    /// Answers per candidate video from a fixed table, ignoring turn.
    struct PerVideo(BTreeMap<String, String>);
    impl LlmClient for PerVideo {
        fn complete(&self, p: &Prompt) -> Result<String, crate::llm::LlmError> {
            self.0.get(p.video_id.as_deref().unwrap()).cloned().ok_or(crate::llm::LlmError::Exhausted)
        }
    }

    fn coarse(scores: &[(&str, f64)], k: usize) -> CoarseRetrieval {
        let full: Vec<CoarseCandidate> = scores.iter().map(|(v, s)| CoarseCandidate { video_id: v.to_string(), score: *s, best: vec![] }).collect();
        CoarseRetrieval { candidates: full[..k].to_vec(), full }
    }

    #[test]
    fn tiers_from_scripted_verdicts() {
        let twins: BTreeMap<_, _> = ["video1", "video2", "video3", "video4"].iter().map(|v| (v.to_string(), twin(v))).collect();
        let llm = PerVideo(
            [("video1", verdict(0.9, &[1])), ("video2", verdict(0.2, &[])), ("video3", verdict(0.7, &[2]))]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        );
        let c = coarse(&[("video1", 0.8), ("video2", 0.7), ("video3", 0.6), ("video4", 0.5)], 3);
        let out = rerank("q", &[], &c, &twins, &llm, &ToolRegistry::stubs(), &RerankConfig::default()).unwrap();
        let order: Vec<(&str, Tier)> = out.ranking.entries.iter().map(|e| (e.video_id.as_str(), e.tier)).collect();
        assert_eq!(
            order,
            vec![("video1", Tier::Verified), ("video3", Tier::Verified), ("video2", Tier::SubThreshold), ("video4", Tier::Uncandidated)]
        );
        assert_eq!(out.ranking.entries[0].score, 0.9);
        assert_eq!(out.ranking.entries[2].score, 0.7, "sub-threshold keeps coarse score");
        assert_eq!(out.ranking.entries[0].masks[0].frames.len(), 2);
        assert_eq!(out.ranking.rank_of("video3"), Some(2));
    }

    #[test]
    fn always_refine_hits_loop_bound_then_fails() {
        let llm = ScriptedLlmClient::new([refine()]);
        let out = reason_candidate("q", &[], &twin("v"), &llm, &ToolRegistry::stubs(), 2);
        assert_eq!(out.refinements, 2);
        assert!(out.verdict.is_none());
        // two refinements, one forced-verdict prompt, two re-asks
        assert_eq!(out.llm_calls, 5);
        let prompts = llm.prompts();
        assert!(prompts[2].text.contains("must answer with a verdict"));
        assert!(prompts[4].text.contains("no longer allowed"));
        assert!(out.warnings.iter().any(|w| w.contains("re-asks")));
        let enriched = out.enriched.unwrap();
        assert_eq!(enriched.frames[0].instances[0].attributes.len(), 2);
    }

    #[test]
    fn refine_then_verdict() {
        let llm = ScriptedLlmClient::new([refine(), verdict(0.8, &[1])]);
        let out = reason_candidate("q", &[], &twin("v"), &llm, &ToolRegistry::stubs(), 2);
        assert_eq!(out.verdict.unwrap().relevance, 0.8);
        assert_eq!(out.refinements, 1);
        assert!(llm.prompts()[1].text.contains("[via captioner]"), "second prompt embeds the enriched twin");
    }

    #[test]
    fn invalid_verdicts_are_reasked() {
        let llm = ScriptedLlmClient::new([verdict(1.5, &[]), verdict(0.6, &[9]), verdict(0.6, &[2])]);
        let out = reason_candidate("q", &[], &twin("v"), &llm, &ToolRegistry::stubs(), 0);
        assert_eq!(out.verdict.unwrap().object_ids, vec![2]);
        assert_eq!(out.llm_calls, 3);
        let prompts = llm.prompts();
        assert!(prompts[1].text.contains("relevance must lie"));
        assert!(prompts[2].text.contains("object id 9"));
    }

    #[test]
    fn one_failing_candidate_degrades_alone() {
        let twins: BTreeMap<_, _> = ["a", "b"].iter().map(|v| (v.to_string(), twin(v))).collect();
        let llm = PerVideo([("a".to_string(), "not json".to_string()), ("b".to_string(), verdict(0.9, &[1]))].into());
        let c = coarse(&[("a", 0.9), ("b", 0.1)], 2);
        let out = rerank("q", &[], &c, &twins, &llm, &ToolRegistry::stubs(), &RerankConfig::default()).unwrap();
        assert_eq!(out.ranking.entries[0].video_id, "b");
        assert_eq!(out.ranking.entries[1].tier, Tier::SubThreshold);
        assert!(out.ranking.entries[1].verdict.is_none());
        assert_eq!(out.ranking.warnings.len(), 1);
    }

    #[test]
    fn masks_extraction() {
        let t = twin("v");
        assert!(extract_masks(&ReasonerVerdict { relevance: 1.0, trace: "t".into(), object_ids: vec![] }, &t).unwrap().is_empty());
        let m = extract_masks(&ReasonerVerdict { relevance: 1.0, trace: "t".into(), object_ids: vec![1] }, &t).unwrap();
        assert_eq!(
            m[0].frames,
            vec![FrameMask { frame_index: 0, mask_ref: "v/1_f.rle".into() }, FrameMask { frame_index: 2, mask_ref: "v/1_f.rle".into() }]
        );
        assert!(extract_masks(&ReasonerVerdict { relevance: 1.0, trace: "t".into(), object_ids: vec![5] }, &t).is_err());
    }

    #[test]
    fn tau_validated() {
        let c = coarse(&[("a", 0.9)], 1);
        let cfg = RerankConfig { tau: 1.5, max_refinements: 0 };
        let llm = ScriptedLlmClient::new([verdict(1.0, &[])]);
        assert_eq!(rerank("q", &[], &c, &BTreeMap::new(), &llm, &ToolRegistry::stubs(), &cfg).unwrap_err(), ReasonError::Tau(1.5));
        assert_eq!(
            rerank("q", &[], &c, &BTreeMap::new(), &llm, &ToolRegistry::stubs(), &RerankConfig::default()).unwrap_err(),
            ReasonError::MissingTwin("a".into())
        );
    }
}

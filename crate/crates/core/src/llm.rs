//! Language-model clients: a remote chat-completions client, an offline
//! fixture client backed by response files, and a scripted client for tests.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::value_to_canonical;
use crate::embedding::RemoteConfig;

/// Response schema a prompt asks for. The identifiers are versioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemaId {
    #[serde(rename = "rt2v.decompose.v1")]
    Decomposition,
    #[serde(rename = "rt2v.reason.v1")]
    Reasoning,
}

impl SchemaId {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemaId::Decomposition => "rt2v.decompose.v1",
            SchemaId::Reasoning => "rt2v.reason.v1",
        }
    }
}

/// A rendered prompt plus the structured fields it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub schema: SchemaId,
    pub query: String,
    /// Candidate video for reasoning prompts.
    pub video_id: Option<String>,
    /// Zero-based exchange turn within one reasoning session.
    pub turn: usize,
    pub text: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("no fixture for {0}")]
    MissingFixture(String),
    #[error("fixture {path} is unreadable: {message}")]
    BadFixture { path: String, message: String },
    #[error("remote LLM call failed: {0}")]
    Remote(String),
    #[error("scripted client exhausted")]
    Exhausted,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &Prompt) -> Result<String, LlmError>;
}

/// 64-bit FNV-1a of the query text as 16 lowercase hex digits; names fixture
/// files.
pub fn fixture_key(query: &str) -> String {
    let h = query.bytes().fold(14695981039346656037u64, |h, b| (h ^ u64::from(b)).wrapping_mul(1099511628211));
    format!("{h:016x}")
}

/// Scripted reasoning responses for one query, keyed by candidate video.
/// Each video maps to the responses for turns 0, 1, ...; turns past the end
/// reuse the last response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonerFixture {
    pub query: String,
    pub videos: BTreeMap<String, Vec<serde_json::Value>>,
}

/// Offline client reading `decompositions/<key>.json` and
/// `reasoner/<key>.json` under a fixture root.
#[derive(Debug, Clone)]
pub struct FixtureLlmClient {
    root: PathBuf,
}

impl FixtureLlmClient {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn decomposition_path(root: &Path, query: &str) -> PathBuf {
        root.join("decompositions").join(format!("{}.json", fixture_key(query)))
    }

    pub fn reasoner_path(root: &Path, query: &str) -> PathBuf {
        root.join("reasoner").join(format!("{}.json", fixture_key(query)))
    }

    fn read(path: &Path) -> Result<String, LlmError> {
        fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                LlmError::MissingFixture(path.display().to_string())
            } else {
                LlmError::BadFixture { path: path.display().to_string(), message: e.to_string() }
            }
        })
    }
}

impl LlmClient for FixtureLlmClient {
    fn complete(&self, prompt: &Prompt) -> Result<String, LlmError> {
        match prompt.schema {
            SchemaId::Decomposition => Ok(Self::read(&Self::decomposition_path(&self.root, &prompt.query))?.trim_end().to_owned()),
            SchemaId::Reasoning => {
                let path = Self::reasoner_path(&self.root, &prompt.query);
                let text = Self::read(&path)?;
                let fixture: ReasonerFixture = serde_json::from_str(&text)
                    .map_err(|e| LlmError::BadFixture { path: path.display().to_string(), message: e.to_string() })?;
                let video = prompt.video_id.as_deref().unwrap_or_default();
                let turns = fixture
                    .videos
                    .get(video)
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| LlmError::MissingFixture(format!("{} (video {video})", path.display())))?;
                Ok(value_to_canonical(&turns[prompt.turn.min(turns.len() - 1)]))
            }
        }
    }
}

/// Replays canned responses in order and records every prompt it receives.
/// Once the script runs out, the last response repeats.
pub struct ScriptedLlmClient {
    script: Mutex<VecDeque<Result<String, LlmError>>>,
    last: Mutex<Option<Result<String, LlmError>>>,
    prompts: Mutex<Vec<Prompt>>,
}

impl ScriptedLlmClient {
    pub fn new(responses: impl IntoIterator<Item = String>) -> Self {
        Self::with_results(responses.into_iter().map(Ok))
    }

    pub fn with_results(responses: impl IntoIterator<Item = Result<String, LlmError>>) -> Self {
        Self { script: Mutex::new(responses.into_iter().collect()), last: Mutex::new(None), prompts: Mutex::new(Vec::new()) }
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        self.prompts.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

impl LlmClient for ScriptedLlmClient {
    fn complete(&self, prompt: &Prompt) -> Result<String, LlmError> {
        self.prompts.lock().unwrap_or_else(|p| p.into_inner()).push(prompt.clone());
        let next = self.script.lock().unwrap_or_else(|p| p.into_inner()).pop_front();
        let mut last = self.last.lock().unwrap_or_else(|p| p.into_inner());
        match next {
            Some(r) => {
                *last = Some(r.clone());
                r
            }
            None => last.clone().unwrap_or(Err(LlmError::Exhausted)),
        }
    }
}

/// Chat-style remote client: POSTs `{model, messages, response_format}` and
/// reads `choices[0].message.content`.
pub struct RemoteLlmClient {
    config: RemoteConfig,
}

impl RemoteLlmClient {
    pub fn new(config: RemoteConfig) -> Self {
        Self { config }
    }
}

impl LlmClient for RemoteLlmClient {
    fn complete(&self, prompt: &Prompt) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": format!("Respond with JSON only, following schema {}.", prompt.schema.as_str())},
                {"role": "user", "content": prompt.text},
            ],
            "response_format": {"type": "json_object", "schema": prompt.schema.as_str()},
        });
        let resp = self.config.post_json(&body).map_err(LlmError::Remote)?;
        resp.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or_else(|| LlmError::Remote("response lacks choices[0].message.content".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prompt(schema: SchemaId, query: &str, video: Option<&str>, turn: usize) -> Prompt {
        Prompt { schema, query: query.into(), video_id: video.map(Into::into), turn, text: String::new() }
    }

    #[test]
    fn fixture_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let q = "a red cat";
        let dp = FixtureLlmClient::decomposition_path(dir.path(), q);
        fs::create_dir_all(dp.parent().unwrap()).unwrap();
        fs::write(&dp, "[{\"kind\":\"attribute\",\"text\":\"red cat\"}]\n").unwrap();
        let rp = FixtureLlmClient::reasoner_path(dir.path(), q);
        fs::create_dir_all(rp.parent().unwrap()).unwrap();
        let fixture = ReasonerFixture {
            query: q.into(),
            videos: [("v1".to_string(), vec![serde_json::json!({"action": "refine"}), serde_json::json!({"action": "verdict"})])].into(),
        };
        fs::write(&rp, serde_json::to_string(&fixture).unwrap()).unwrap();

        let c = FixtureLlmClient::new(dir.path());
        assert_eq!(c.complete(&prompt(SchemaId::Decomposition, q, None, 0)).unwrap(), "[{\"kind\":\"attribute\",\"text\":\"red cat\"}]");
        assert_eq!(c.complete(&prompt(SchemaId::Reasoning, q, Some("v1"), 0)).unwrap(), "{\"action\":\"refine\"}");
        assert_eq!(c.complete(&prompt(SchemaId::Reasoning, q, Some("v1"), 5)).unwrap(), "{\"action\":\"verdict\"}");
        assert!(matches!(c.complete(&prompt(SchemaId::Reasoning, q, Some("v2"), 0)), Err(LlmError::MissingFixture(_))));
        assert!(matches!(c.complete(&prompt(SchemaId::Decomposition, "other", None, 0)), Err(LlmError::MissingFixture(_))));
    }

    #[test]
    fn scripted_repeats_last() {
        let c = ScriptedLlmClient::new(["a".to_string(), "b".to_string()]);
        let p = prompt(SchemaId::Decomposition, "q", None, 0);
        assert_eq!(c.complete(&p).unwrap(), "a");
        assert_eq!(c.complete(&p).unwrap(), "b");
        assert_eq!(c.complete(&p).unwrap(), "b");
        assert_eq!(c.prompts().len(), 3);
        let empty = ScriptedLlmClient::new(Vec::<String>::new());
        assert_eq!(empty.complete(&p), Err(LlmError::Exhausted));
    }

    #[test]
    fn keys_are_stable() {
        assert_eq!(fixture_key(""), "cbf29ce484222325");
        assert_eq!(fixture_key("a"), "af63dc4c8601ec8c");
    }
}

//! Implicit-query decomposition into atomic sub-queries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{embed_projected, EmbeddingError, EmbeddingProvider, EmbeddingVector, ProjectionHead};
use crate::llm::{LlmClient, LlmError, Prompt, SchemaId};

pub const MAX_SUBQUERIES: usize = 16;
pub const MAX_REASKS: usize = 2;

const TEMPLATE: &str = "\
[rt2v.decompose.v1]
Decompose the video search request below into atomic, independently verifiable
conditions on what is visible in a video. Each condition names one object with
its attributes, one spatial relation between objects, one temporal change, or
one action. Use at most 16 conditions and keep their natural order.

Respond with a JSON array only:
[{\"text\": \"<explicit condition>\", \"kind\": \"attribute\" | \"spatial\" | \"temporal\" | \"action\"}]

Request: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubQueryKind {
    Attribute,
    Spatial,
    Temporal,
    Action,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuery {
    pub text: String,
    pub kind: SubQueryKind,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl SubQuery {
    pub fn new(text: impl Into<String>, kind: SubQueryKind) -> Self {
        Self { text: text.into(), kind, weight: 1.0 }
    }
}

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("LLM call failed: {0}")]
    Client(#[from] LlmError),
    #[error("no valid decomposition after {} attempt(s): {last_error}", .responses.len())]
    Invalid { responses: Vec<String>, last_error: String },
}

/// The first-turn prompt text for a query.
pub fn decomposition_prompt(query: &str) -> String {
    format!("{TEMPLATE}{query}\n")
}

/// Validate a response against the decomposition schema.
pub fn parse_decomposition(response: &str) -> Result<Vec<SubQuery>, String> {
    let value: serde_json::Value = serde_json::from_str(response).map_err(|e| format!("not valid JSON: {e}"))?;
    let items = value.as_array().ok_or("response must be a JSON array")?;
    if items.is_empty() {
        return Err("response must contain at least one sub-query".into());
    }
    if items.len() > MAX_SUBQUERIES {
        return Err(format!("response has {} sub-queries; at most {MAX_SUBQUERIES} allowed", items.len()));
    }
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let sq: SubQuery = serde_json::from_value(item.clone()).map_err(|e| format!("item {i}: {e}"))?;
            if sq.text.trim().is_empty() {
                return Err(format!("item {i}: text must be non-empty"));
            }
            if !(sq.weight.is_finite() && sq.weight > 0.0) {
                return Err(format!("item {i}: weight must be positive"));
            }
            Ok(sq)
        })
        .collect()
}

/// Ask the client for a decomposition, re-asking up to twice with the
/// validation error appended.
pub fn decompose(query: &str, client: &dyn LlmClient) -> Result<Vec<SubQuery>, DecomposeError> {
    if query.trim().is_empty() {
        return Err(DecomposeError::EmptyQuery);
    }
    let base = decomposition_prompt(query);
    let mut responses = Vec::new();
    let mut last_error = String::new();
    for turn in 0..=MAX_REASKS {
        let text = if turn == 0 {
            base.clone()
        } else {
            format!("{base}\nYour previous response was rejected: {last_error}\nRespond again with a corrected JSON array.\n")
        };
        let prompt = Prompt { schema: SchemaId::Decomposition, query: query.to_owned(), video_id: None, turn, text };
        let response = client.complete(&prompt)?;
        match parse_decomposition(&response) {
            Ok(subqueries) => return Ok(subqueries),
            Err(e) => {
                tracing::debug!(turn, error = %e, "decomposition rejected");
                last_error = e;
                responses.push(response);
            }
        }
    }
    Err(DecomposeError::Invalid { responses, last_error })
}

/// One projected unit vector per sub-query, in order.
pub fn embed_subqueries(
    subqueries: &[SubQuery],
    provider: &dyn EmbeddingProvider,
    query_head: &ProjectionHead,
) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
    let texts: Vec<String> = subqueries.iter().map(|s| s.text.clone()).collect();
    embed_projected(provider, query_head, &texts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{apply_projection, hash_embed, HashEmbedder};
    use crate::llm::ScriptedLlmClient;

    #[test]
    fn reask_then_accept() {
        let c = ScriptedLlmClient::new([
            "{\"text\": \"cat\"}".to_string(),
            "[{\"text\": \"an orange cat\", \"kind\": \"attribute\"}]".to_string(),
        ]);
        let out = decompose("the cat", &c).unwrap();
        assert_eq!(out, vec![SubQuery::new("an orange cat", SubQueryKind::Attribute)]);
        let prompts = c.prompts();
        assert_eq!(prompts.len(), 2);
        assert!(prompts[1].text.contains("must be a JSON array"));
    }

    #[test]
    fn persistent_empty_fails_with_raw_responses() {
        let c = ScriptedLlmClient::new(["[]".to_string(), "[]".to_string()]);
        match decompose("q", &c) {
            Err(DecomposeError::Invalid { responses, .. }) => {
                assert_eq!(responses.len(), MAX_REASKS + 1);
                assert!(responses.iter().all(|r| r == "[]"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_rules() {
        assert!(parse_decomposition("[{\"text\":\"x\",\"kind\":\"pose\"}]").is_err());
        assert!(parse_decomposition("[{\"text\":\" \",\"kind\":\"action\"}]").is_err());
        assert!(parse_decomposition("[{\"text\":\"x\",\"kind\":\"action\",\"weight\":0}]").is_err());
        let many = serde_json::to_string(&vec![SubQuery::new("x", SubQueryKind::Action); 17]).unwrap();
        assert!(parse_decomposition(&many).unwrap_err().contains("at most 16"));
        let ok = parse_decomposition("[{\"text\":\"x\",\"kind\":\"spatial\",\"weight\":2.5}]").unwrap();
        assert_eq!(ok[0].weight, 2.5);
    }

    #[test]
    fn empty_query_and_client_error() {
        let c = ScriptedLlmClient::new(Vec::<String>::new());
        assert!(matches!(decompose("  ", &c), Err(DecomposeError::EmptyQuery)));
        assert!(matches!(decompose("q", &c), Err(DecomposeError::Client(LlmError::Exhausted))));
    }

    #[test]
    fn embeddings_follow_order() {
        let p = HashEmbedder::new(64).unwrap();
        let head = crate::embedding::ProjectionHead::identity(64);
        let sqs = vec![
            SubQuery::new("an animal", SubQueryKind::Attribute),
            SubQuery::new("discovers an object", SubQueryKind::Action),
            SubQuery::new("an animal", SubQueryKind::Attribute),
        ];
        let vecs = embed_subqueries(&sqs, &p, &head).unwrap();
        assert_eq!(vecs.len(), 3);
        assert_eq!(vecs[0], vecs[2]);
        for (s, v) in sqs.iter().zip(&vecs) {
            assert!(v.is_unit());
            assert_eq!(&apply_projection(&hash_embed(&s.text, 64).unwrap(), &head).unwrap(), v);
        }
    }
}

//! Embedding scorer backed by an OpenAI-compatible `/embeddings` endpoint.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::scorers::{EmbeddingScorer, ScorerError};
use crate::scalar::Scalar;

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

pub struct OpenAiEmbeddings {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    dim: usize,
}

impl OpenAiEmbeddings {
    /// `base_url` is the API root, e.g. `http://localhost:8000/v1`.
    pub fn new(
        base_url: &str,
        model: impl Into<String>,
        api_key: Option<String>,
        dim: usize,
        timeout: Duration,
    ) -> Self {
        OpenAiEmbeddings {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            dim,
        }
    }
}

impl<S: Scalar> EmbeddingScorer<S> for OpenAiEmbeddings {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<S>>, ScorerError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let body = EmbeddingRequest { model: &self.model, input: texts };
        let resp = req.send_json(&body).map_err(|e| ScorerError::Transport(e.to_string()))?;
        let mut parsed: EmbeddingResponse =
            resp.into_json().map_err(|e| ScorerError::Transport(format!("bad embeddings body: {e}")))?;
        if parsed.data.len() != texts.len() {
            return Err(ScorerError::Count { expected: texts.len(), got: parsed.data.len() });
        }
        parsed.data.sort_by_key(|d| d.index);
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.dim {
                    return Err(ScorerError::Dimension { expected: self.dim, got: d.embedding.len() });
                }
                Ok(d.embedding.into_iter().map(S::from_f64_lossy).collect())
            })
            .collect()
    }
}

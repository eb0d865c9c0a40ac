//! OpenAI-compatible `/chat/completions` backend.
//!
//! Each prompt is sent as a single user message.

use std::io::ErrorKind;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, CallRequest, ChatBackend, GenerationParams};

#[derive(Debug, Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
pub(crate) struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<Message<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Debug, Deserialize)]
pub(crate) struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Debug, Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

pub(crate) fn request_body<'a>(model: &'a str, prompt: &'a str, params: &GenerationParams) -> ChatRequest<'a> {
    ChatRequest {
        model,
        messages: vec![Message { role: "user", content: prompt }],
        temperature: params.temperature,
        max_tokens: params.max_tokens,
    }
}

pub(crate) fn response_text(resp: ChatResponse) -> Result<String, BackendError> {
    resp.choices
        .into_iter()
        .next()
        .map(|c| c.message.content.unwrap_or_default())
        .ok_or_else(|| BackendError::Other("response has no choices".into()))
}

pub struct OpenAiChat {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl OpenAiChat {
    /// `base_url` is the API root, e.g. `https://api.openai.com/v1`.
    pub fn new(base_url: &str, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        OpenAiChat {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            timeout,
        }
    }

    fn classify(&self, err: ureq::Error) -> BackendError {
        match err {
            ureq::Error::Status(code, resp) => {
                let body = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", body.chars().take(200).collect::<String>());
                if code == 429 || code >= 500 {
                    BackendError::Transport(msg)
                } else {
                    BackendError::Other(msg)
                }
            }
            ureq::Error::Transport(t) => {
                let timed_out = std::error::Error::source(&t)
                    .and_then(|s| s.downcast_ref::<std::io::Error>())
                    .map(|io| matches!(io.kind(), ErrorKind::TimedOut | ErrorKind::WouldBlock))
                    .unwrap_or(false)
                    || t.to_string().contains("timed out");
                if timed_out {
                    BackendError::Timeout(self.timeout)
                } else {
                    BackendError::Transport(t.to_string())
                }
            }
        }
    }
}

impl ChatBackend for OpenAiChat {
    fn chat(&self, req: &CallRequest<'_>, params: &GenerationParams) -> Result<String, BackendError> {
        let mut http = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            http = http.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = http.send_json(request_body(&self.model, req.prompt, params)).map_err(|e| self.classify(e))?;
        let parsed: ChatResponse =
            resp.into_json().map_err(|e| BackendError::Transport(format!("bad completion body: {e}")))?;
        response_text(parsed)
    }

    fn name(&self) -> &str {
        "openai-compatible"
    }
}

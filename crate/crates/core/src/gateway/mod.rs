//! The single path for generative model calls.
//!
//! [`Gateway::call`] renders a registry template, runs it through a
//! [`ChatBackend`] under the retry policy and meters both sides with the
//! configured [`TokenCounter`].

mod mock;
mod openai;
mod templates;
mod tokens;

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{mock_key, wildcard_key, DryRunBackend, MockBackend, MockScript, ScriptError, ScriptLine};
pub use openai::OpenAiChat;
pub use templates::{has_placeholder, render, PromptTemplate, RenderError, Slots, TemplateName};
pub use tokens::{ApproxTokenCounter, TokenCounter, WhitespaceTokenCounter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: Option<f32>,
    pub max_tokens: Option<u32>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { temperature: Some(0.0), max_tokens: None }
    }
}

/// What a backend sees for one call.
#[derive(Debug, Clone, Copy)]
pub struct CallRequest<'a> {
    pub template: TemplateName,
    pub slots: &'a Slots,
    pub prompt: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("unscripted mock call: {key}")]
    Unscripted { key: String },
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::Timeout(_))
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &CallRequest<'_>, params: &GenerationParams) -> Result<String, BackendError>;

    fn name(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Sleep before attempt `n + 1` is `base_backoff * 2^(n - 1)`.
    pub base_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, base_backoff: Duration::from_millis(500), timeout: Duration::from_secs(120) }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: u32) -> Self {
        RetryPolicy { max_attempts, base_backoff: Duration::ZERO, ..Default::default() }
    }

    fn backoff(&self, failed_attempts: u32) -> Duration {
        self.base_backoff.saturating_mul(1u32 << (failed_attempts.saturating_sub(1)).min(16))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("transport failed after {} attempts: {}", attempts.len(), attempts.join("; "))]
    Transport { attempts: Vec<String> },
    #[error("timed out after {} attempts ({timeout:?} per call)", attempts.len())]
    Timeout { timeout: Duration, attempts: Vec<String> },
    #[error("unscripted mock call: {key}")]
    Unscripted { key: String },
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("backend error: {0}")]
    Backend(String),
}

impl GatewayError {
    /// Transport and timeout failures are the ones retries could not fix.
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport { .. } | GatewayError::Timeout { .. })
    }
}

/// One completed model call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmCall {
    pub template: TemplateName,
    pub prompt: String,
    pub response: String,
    pub prompt_tokens: usize,
    pub response_tokens: usize,
    pub attempts: u32,
    /// Wall-clock time; left out of serialized traces so they stay reproducible.
    #[serde(skip)]
    pub latency: Duration,
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(cap: usize) -> Self {
        InFlight { cap: cap.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().expect("in-flight lock poisoned");
        while *used >= self.cap {
            used = self.freed.wait(used).expect("in-flight lock poisoned");
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().expect("in-flight lock poisoned");
        *used -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    counter: Arc<dyn TokenCounter>,
    retry: RetryPolicy,
    params: GenerationParams,
    in_flight: Arc<InFlight>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("counter", &self.counter.name())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Gateway {
            backend,
            counter: Arc::new(ApproxTokenCounter),
            retry: RetryPolicy::default(),
            params: GenerationParams::default(),
            in_flight: Arc::new(InFlight::new(8)),
        }
    }

    pub fn mock(script: MockScript) -> Self {
        Self::new(Arc::new(MockBackend::new(script))).with_retry(RetryPolicy::no_backoff(1))
    }

    pub fn with_counter(mut self, counter: Arc<dyn TokenCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.in_flight = Arc::new(InFlight::new(cap));
        self
    }

    pub fn counter(&self) -> &dyn TokenCounter {
        self.counter.as_ref()
    }

    pub fn counter_arc(&self) -> Arc<dyn TokenCounter> {
        Arc::clone(&self.counter)
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Renders `template` with `slots` and completes it.
    pub fn call(&self, template: TemplateName, slots: &Slots) -> Result<LlmCall, GatewayError> {
        let prompt = render(template, slots)?;
        self.complete(template, slots, prompt)
    }

    /// Sends an already rendered prompt, retrying transport failures.
    pub fn complete(&self, template: TemplateName, slots: &Slots, prompt: String) -> Result<LlmCall, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let req = CallRequest { template, slots, prompt: &prompt };
        let started = Instant::now();
        let mut log: Vec<String> = Vec::new();
        let max_attempts = self.retry.max_attempts.max(1);
        let mut last_timeout = false;
        for attempt in 1..=max_attempts {
            let outcome = {
                let _slot = self.in_flight.acquire();
                self.backend.chat(&req, &self.params)
            };
            match outcome {
                Ok(response) => {
                    log::debug!("{template} call succeeded on attempt {attempt}");
                    return Ok(LlmCall {
                        template,
                        prompt_tokens: self.counter.count(&prompt),
                        response_tokens: self.counter.count(&response),
                        prompt,
                        response,
                        attempts: attempt,
                        latency: started.elapsed(),
                    });
                }
                Err(e) if e.retryable() => {
                    log::warn!("{template} attempt {attempt}/{max_attempts} failed: {e}");
                    last_timeout = matches!(e, BackendError::Timeout(_));
                    log.push(format!("attempt {attempt}: {e}"));
                    if attempt < max_attempts {
                        let pause = self.retry.backoff(attempt);
                        if !pause.is_zero() {
                            std::thread::sleep(pause);
                        }
                    }
                }
                Err(BackendError::Unscripted { key }) => return Err(GatewayError::Unscripted { key }),
                Err(e) => return Err(GatewayError::Backend(e.to_string())),
            }
        }
        if last_timeout {
            Err(GatewayError::Timeout { timeout: self.retry.timeout, attempts: log })
        } else {
            Err(GatewayError::Transport { attempts: log })
        }
    }
}

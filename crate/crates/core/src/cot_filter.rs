//! CoT-guided chunk filtering.
//!
//! A guiding chain of thought is generated once over every retrieved chunk;
//! each chunk is then judged on its own under that CoT and the chunks judged
//! relevant form the detail set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::ChunkId;
use crate::extractor::PASSAGE_SEPARATOR;
use crate::gateway::{Gateway, GatewayError, LlmCall, Slots, TemplateName};
use crate::retriever::RetrievalResult;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidingCot {
    pub text: String,
    pub call: LlmCall,
}

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("cot: no retrieved chunks")]
    NoHits,
    #[error("cot: {0}")]
    Cot(GatewayError),
    #[error("cot: empty CoT")]
    EmptyCot { call: Box<LlmCall> },
    #[error("filter: chunk {chunk_id}: {source}")]
    Verdict {
        chunk_id: ChunkId,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    /// Strict JSON or the canonical `{"status": {"True"}}` shape.
    Clean,
    /// Recovered from ragged JSON, a `status: value` pair or a bare keyword.
    Repaired,
    /// Nothing usable; the caller's default label applies.
    Defaulted,
}

/// Result of reading one status response. `label` is `None` when defaulted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParsedStatus {
    pub label: Option<bool>,
    pub status: ParseStatus,
}

impl ParsedStatus {
    fn clean(label: bool) -> Self {
        ParsedStatus { label: Some(label), status: ParseStatus::Clean }
    }

    fn repaired(label: bool) -> Self {
        ParsedStatus { label: Some(label), status: ParseStatus::Repaired }
    }

    const DEFAULTED: ParsedStatus = ParsedStatus { label: None, status: ParseStatus::Defaulted };

    /// Label with a fallback for defaulted parses.
    pub fn label_or(&self, default: bool) -> bool {
        self.label.unwrap_or(default)
    }
}

fn bool_word(s: &str) -> Option<bool> {
    if s.eq_ignore_ascii_case("true") {
        Some(true)
    } else if s.eq_ignore_ascii_case("false") {
        Some(false)
    } else {
        None
    }
}

fn json_status(v: &serde_json::Value) -> Option<bool> {
    match v.get("status")? {
        serde_json::Value::Bool(b) => Some(*b),
        serde_json::Value::String(s) => bool_word(s.trim()),
        _ => None,
    }
}

/// `{"status": {"True"}}` with arbitrary whitespace between tokens.
fn canonical_shape(text: &str) -> Option<bool> {
    let compact: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let inner = compact.strip_prefix("{\"status\":{\"")?.strip_suffix("\"}}")?;
    bool_word(inner)
}

/// First balanced `{...}` block.
fn brace_block(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    for (i, c) in text[start..].char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn lenient_json(text: &str) -> Option<bool> {
    let block = brace_block(text)?;
    if let Some(b) = canonical_shape(block) {
        return Some(b);
    }
    let candidates = [block.to_string(), block.replace('\'', "\"")];
    candidates.iter().filter_map(|c| serde_json::from_str::<serde_json::Value>(c).ok()).find_map(|v| json_status(&v))
}

/// `status` followed by separators and a true/false word, e.g. `status=True`.
fn key_value(text: &str) -> Option<bool> {
    let lower = text.to_ascii_lowercase();
    let mut from = 0;
    while let Some(found) = lower[from..].find("status") {
        let after = from + found + "status".len();
        let rest = &text[after..];
        let trimmed = rest.trim_start_matches(|c: char| c.is_whitespace() || "\"'`:={*".contains(c));
        if trimmed.len() < rest.len() {
            let word: String = trimmed.chars().take_while(|c| c.is_ascii_alphabetic()).collect();
            if let Some(b) = bool_word(&word) {
                return Some(b);
            }
        }
        from = after;
    }
    None
}

fn bare_keyword(text: &str) -> Option<bool> {
    let lower = text.to_ascii_lowercase();
    match (lower.contains("true"), lower.contains("false")) {
        (true, false) => Some(true),
        (false, true) => Some(false),
        _ => None,
    }
}

/// Reads a status verdict, trying strict forms first and ragged ones after.
pub fn parse_status(raw: &str) -> ParsedStatus {
    let text = raw.trim();
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(text) {
        if let Some(b) = json_status(&v) {
            return ParsedStatus::clean(b);
        }
    }
    if let Some(b) = canonical_shape(text) {
        return ParsedStatus::clean(b);
    }
    if let Some(b) = lenient_json(text).or_else(|| key_value(text)).or_else(|| bare_keyword(text)) {
        return ParsedStatus::repaired(b);
    }
    ParsedStatus::DEFAULTED
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub chunk_id: ChunkId,
    pub label: bool,
    pub raw_response: String,
    pub parse_status: ParseStatus,
    /// Set when the call itself failed after retries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetailSet {
    /// Kept chunks in retrieval order.
    pub chunks: Vec<ChunkId>,
    /// One verdict per hit, in retrieval order.
    pub verdicts: Vec<FilterVerdict>,
    pub fallback_applied: bool,
}

impl DetailSet {
    /// Replaces an empty selection by every hit.
    pub fn apply_fallback<S: Scalar>(&mut self, hits: &RetrievalResult<S>) {
        if self.chunks.is_empty() && !hits.is_empty() {
            self.chunks = hits.hits.iter().map(|h| h.chunk.id.clone()).collect();
            self.fallback_applied = true;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOptions {
    /// Label used when a response cannot be parsed or the call failed.
    pub default_label: bool,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions { default_label: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub detail: DetailSet,
    /// Successful verdict calls in retrieval order.
    pub calls: Vec<LlmCall>,
}

pub fn cot_slots<S: Scalar>(question: &str, hits: &RetrievalResult<S>) -> Slots {
    let content = hits.hits.iter().map(|h| h.chunk.text.as_str()).collect::<Vec<_>>().join(PASSAGE_SEPARATOR);
    Slots::new().with("content", content).with("question", question)
}

pub fn verdict_slots(question: &str, chunk_text: &str, cot: &str) -> Slots {
    Slots::new().with("content", chunk_text).with("question", question).with("cot", cot)
}

pub fn guide_cot<S: Scalar>(
    question: &str,
    hits: &RetrievalResult<S>,
    gateway: &Gateway,
) -> Result<GuidingCot, FilterError> {
    if hits.is_empty() {
        return Err(FilterError::NoHits);
    }
    let call = gateway.call(TemplateName::CotGuidance, &cot_slots(question, hits)).map_err(FilterError::Cot)?;
    if call.response.trim().is_empty() {
        return Err(FilterError::EmptyCot { call: Box::new(call) });
    }
    Ok(GuidingCot { text: call.response.clone(), call })
}

/// Judges every hit under `cot` and keeps the ones labelled true.
///
/// Calls fan out over the rayon pool; the gateway bounds how many are in
/// flight. Transport failures and timeouts produce a defaulted verdict
/// instead of an error.
pub fn filter_chunks<S: Scalar>(
    question: &str,
    hits: &RetrievalResult<S>,
    cot: &GuidingCot,
    gateway: &Gateway,
    opts: FilterOptions,
) -> Result<FilterOutcome, FilterError> {
    if cot.text.trim().is_empty() {
        return Err(FilterError::EmptyCot { call: Box::new(cot.call.clone()) });
    }
    let judged: Vec<Result<(FilterVerdict, Option<LlmCall>), FilterError>> = hits
        .hits
        .par_iter()
        .map(|hit| {
            let slots = verdict_slots(question, &hit.chunk.text, &cot.text);
            match gateway.call(TemplateName::ChunkFilter, &slots) {
                Ok(call) => {
                    let parsed = parse_status(&call.response);
                    let verdict = FilterVerdict {
                        chunk_id: hit.chunk.id.clone(),
                        label: parsed.label_or(opts.default_label),
                        raw_response: call.response.clone(),
                        parse_status: parsed.status,
                        error: None,
                    };
                    Ok((verdict, Some(call)))
                }
                Err(e) if e.is_transport() => {
                    log::warn!("filter call for {} failed, using default label: {e}", hit.chunk.id);
                    let verdict = FilterVerdict {
                        chunk_id: hit.chunk.id.clone(),
                        label: opts.default_label,
                        raw_response: String::new(),
                        parse_status: ParseStatus::Defaulted,
                        error: Some(e.to_string()),
                    };
                    Ok((verdict, None))
                }
                Err(source) => Err(FilterError::Verdict { chunk_id: hit.chunk.id.clone(), source }),
            }
        })
        .collect();

    let mut verdicts = Vec::with_capacity(judged.len());
    let mut calls = Vec::with_capacity(judged.len());
    for item in judged {
        let (verdict, call) = item?;
        verdicts.push(verdict);
        calls.extend(call);
    }
    let chunks = verdicts.iter().filter(|v| v.label).map(|v| v.chunk_id.clone()).collect();
    Ok(FilterOutcome { detail: DetailSet { chunks, verdicts, fallback_applied: false }, calls })
}

//! Prompt templates and literal `{slot}` substitution.
//!
//! A placeholder is `{` + one or more of `[a-z_]` + `}`. Anything else in
//! braces (the JSON shape hints such as `{"status": {the value of status}}`)
//! is literal text.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::short_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    /// Global-information extraction over mapped source paragraphs.
    Extractor,
    /// Guiding chain of thought over all retrieved chunks.
    CotGuidance,
    /// Per-chunk relevance verdict under the guiding CoT.
    ChunkFilter,
    /// Final answer generation.
    Generator,
    /// Teacher prompt producing extractor training targets from supporting paragraphs.
    ExtractorData,
    /// Self-evaluation of an extractor training target.
    ExtractorEval,
    /// Teacher prompt producing a guiding CoT from supporting paragraphs and the answer.
    CotData,
    /// Self-evaluation of a teacher CoT.
    CotEval,
}

impl TemplateName {
    pub const ALL: [TemplateName; 8] = [
        TemplateName::Extractor,
        TemplateName::CotGuidance,
        TemplateName::ChunkFilter,
        TemplateName::Generator,
        TemplateName::ExtractorData,
        TemplateName::ExtractorEval,
        TemplateName::CotData,
        TemplateName::CotEval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::Extractor => "extractor",
            TemplateName::CotGuidance => "cot_guidance",
            TemplateName::ChunkFilter => "chunk_filter",
            TemplateName::Generator => "generator",
            TemplateName::ExtractorData => "extractor_data",
            TemplateName::ExtractorEval => "extractor_eval",
            TemplateName::CotData => "cot_data",
            TemplateName::CotEval => "cot_eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    pub fn template(self) -> PromptTemplate {
        PromptTemplate { name: self, body: body(self) }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

const EXTRACTOR: &str = "Instruction:\n{content}\nBased on the above background, please output the information you need to cite to answer the question below.\n{question}\n\nOutput:\n";

const COT_GUIDANCE: &str = "Instruction:\n{content}\nPlease combine the above information and give your thought process for the following\nQuestion:{question}\n\nOutput:\n";

const CHUNK_FILTER: &str = "Instruction:\nGiven an article:{content}\nQuestion:{question}\nThought process for the question:{cot}\n\nYour task is to use the thought process provided to decide whether you need to cite the article to answer this question. If you need to cite the article, set the status value to True. If not, set the status value to False. Please output the response in the following json format:\n{\"status\": {the value of status}}\n\nOutput:\n";

const GENERATOR: &str = "Instruction:\n{content}\nBased on the above information, Only give me the answer and do not output any other words.\nQuestion:{question}\n\nOutput:\n";

const EXTRACTOR_DATA: &str = "{content}\n\nBased on the above background only, please output the original information that needs to be cited to answer the following questions. Please ensure that the information cited is detailed and comprehensive.\n\nQuestion:{question}\n\nOutput only the original information of the required reference:\n";

const EXTRACTOR_EVAL: &str = "I am going to provide you with a question, the background information, and the answer to that question. Please evaluate whether the answer can be solely derived from the given background information. If it can, set the status value as True, if it can\u{2019}t, set the status value as False.\n\nQuestion:{question}\n\nBackground Information:{global_information}\n\nAnswer:{answer}\n\nYour output format should be the following json format:\nstatus: {the value of status}";

const COT_DATA: &str = "{content}\n\nGiven question:{question}\n\nThe answer is:{answer}\n\nYour task is to give your thought process for this given question based on the above information, only give me your thought process and do not output other information.\nThought process:";

const COT_EVAL: &str = "Question:{question}\n\nThought process of the question:{cot}\n\nAnswer:{answer}\n\nPlease evaluate whether the thought process of this question can explain the answer to this question. If it can explain the answer, set the value of status to True. If it cannot explain the answer, set the value of status to False. Your output format should be the following json format:\nstatus: {the value of status}";

fn body(name: TemplateName) -> &'static str {
    match name {
        TemplateName::Extractor => EXTRACTOR,
        TemplateName::CotGuidance => COT_GUIDANCE,
        TemplateName::ChunkFilter => CHUNK_FILTER,
        TemplateName::Generator => GENERATOR,
        TemplateName::ExtractorData => EXTRACTOR_DATA,
        TemplateName::ExtractorEval => EXTRACTOR_EVAL,
        TemplateName::CotData => COT_DATA,
        TemplateName::CotEval => COT_EVAL,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("missing slot `{0}`")]
    MissingSlot(String),
    #[error("unexpected slot `{0}`")]
    ExtraSlot(String),
}

impl RenderError {
    pub fn placeholder(&self) -> &str {
        match self {
            RenderError::MissingSlot(s) | RenderError::ExtraSlot(s) => s,
        }
    }
}

/// Named slot values for one rendering.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Slots(BTreeMap<String, String>);

impl Slots {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: impl Into<String>) -> Self {
        self.0.insert(name.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, name: &str, value: impl Into<String>) {
        self.0.insert(name.to_string(), value.into());
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0.get(name).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    /// Order-independent digest of names and values.
    pub fn fingerprint(&self) -> String {
        let mut buf = Vec::new();
        for (k, v) in &self.0 {
            buf.extend_from_slice(&(k.len() as u64).to_le_bytes());
            buf.extend_from_slice(k.as_bytes());
            buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
            buf.extend_from_slice(v.as_bytes());
        }
        short_hash(&buf, 16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: &'static str,
}

enum Piece<'a> {
    Literal(&'a str),
    Slot(&'a str),
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let bytes = body.as_bytes();
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                if lit_start < i {
                    out.push(Piece::Literal(&body[lit_start..i]));
                }
                out.push(Piece::Slot(&body[i + 1..j]));
                i = j + 1;
                lit_start = i;
                continue;
            }
        }
        i += 1;
    }
    if lit_start < body.len() {
        out.push(Piece::Literal(&body[lit_start..]));
    }
    out
}

/// True when `text` contains a `{name}` placeholder marker.
pub fn has_placeholder(text: &str) -> bool {
    pieces(text).iter().any(|p| matches!(p, Piece::Slot(_)))
}

impl PromptTemplate {
    /// Distinct placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        for p in pieces(self.body) {
            if let Piece::Slot(s) = p {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Literal substitution. Slots must match the placeholders exactly.
    pub fn render(&self, slots: &Slots) -> Result<String, RenderError> {
        let wanted = self.placeholders();
        if let Some(missing) = wanted.iter().find(|w| slots.get(w).is_none()) {
            return Err(RenderError::MissingSlot(missing.to_string()));
        }
        if let Some(extra) = slots.names().find(|n| !wanted.contains(n)) {
            return Err(RenderError::ExtraSlot(extra.to_string()));
        }
        let mut out = String::with_capacity(self.body.len() + slots.0.values().map(String::len).sum::<usize>());
        for p in pieces(self.body) {
            match p {
                Piece::Literal(l) => out.push_str(l),
                Piece::Slot(s) => out.push_str(slots.get(s).expect("checked above")),
            }
        }
        Ok(out)
    }
}

pub fn render(name: TemplateName, slots: &Slots) -> Result<String, RenderError> {
    name.template().render(slots)
}

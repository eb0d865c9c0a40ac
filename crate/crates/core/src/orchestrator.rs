//! Strategy wiring, answer generation and token metering.
//!
//! | strategy | calls   | generator context                        |
//! |----------|---------|------------------------------------------|
//! | `RB`     | 1       | retrieved chunks                         |
//! | `RL`     | 1       | source paragraphs of the retrieved chunks |
//! | `EXT`    | 2       | retrieved chunks and global information  |
//! | `FIL`    | k + 2   | chunks kept by the filter                |
//! | `EF`     | k + 3   | global information and kept chunks       |

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::cot_filter::{filter_chunks, guide_cot, DetailSet, FilterOptions, GuidingCot};
use crate::extractor::{extract_global, map_chunks, GlobalInfo, MappedContext, MappingOptions, PASSAGE_SEPARATOR};
use crate::gateway::{Gateway, GatewayError, LlmCall, Slots, TemplateName, TokenCounter};
use crate::retriever::{default_coarse_n, retrieve, PairScorer, RetrievalResult, VectorIndex};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    RB,
    RL,
    EXT,
    FIL,
    EF,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::RB, Strategy::RL, Strategy::EXT, Strategy::FIL, Strategy::EF];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::RB => "RB",
            Strategy::RL => "RL",
            Strategy::EXT => "EXT",
            Strategy::FIL => "FIL",
            Strategy::EF => "EF",
        }
    }

    /// Column label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::RB => "R&B",
            Strategy::RL => "R&L",
            Strategy::EXT => "Ext.",
            Strategy::FIL => "Fil.",
            Strategy::EF => "E&F",
        }
    }

    pub fn uses_extractor(self) -> bool {
        matches!(self, Strategy::EXT | Strategy::EF)
    }

    pub fn uses_filter(self) -> bool {
        matches!(self, Strategy::FIL | Strategy::EF)
    }

    /// Model calls for one question with `k` retrieved chunks.
    pub fn call_budget(self, k: usize) -> usize {
        match self {
            Strategy::RB | Strategy::RL => 1,
            Strategy::EXT => 2,
            Strategy::FIL => k + 2,
            Strategy::EF => k + 3,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown strategy `{0}` (expected one of RB, RL, EXT, FIL, EF)")]
pub struct UnknownStrategy(pub String);

impl FromStr for Strategy {
    type Err = UnknownStrategy;

    /// Accepts the short names and the table labels, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_uppercase();
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == key || st.label().to_ascii_uppercase() == key)
            .ok_or_else(|| UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub chunk_size: usize,
    pub top_k: usize,
    pub coarse_n: usize,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy, chunk_size: usize, top_k: usize) -> Self {
        StrategyConfig { strategy, chunk_size, top_k, coarse_n: default_coarse_n(top_k) }
    }

    /// `"chunk_size*top_k"`.
    pub fn grid_label(&self) -> String {
        format!("{}*{}", self.chunk_size, self.top_k)
    }
}

/// The four chunk-size/top-k points of the evaluation grid, default first.
pub const DEFAULT_GRID: [(usize, usize); 4] = [(200, 7), (200, 12), (500, 3), (500, 5)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoPosition {
    BeforeChunks,
    AfterChunks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextLayout {
    /// Prefix each chunk or paragraph with `Passage n:` on its own line.
    pub passage_headers: bool,
    pub ext_info: InfoPosition,
    pub ef_info: InfoPosition,
}

impl Default for ContextLayout {
    fn default() -> Self {
        ContextLayout {
            passage_headers: false,
            ext_info: InfoPosition::AfterChunks,
            ef_info: InfoPosition::BeforeChunks,
        }
    }
}

impl ContextLayout {
    pub fn with_headers() -> Self {
        ContextLayout { passage_headers: true, ..Default::default() }
    }

    fn passages(&self, texts: &[&str]) -> Vec<String> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| if self.passage_headers { format!("Passage {}:\n{t}", i + 1) } else { t.to_string() })
            .collect()
    }

    /// Joins passages and optional global information with the passage separator.
    pub fn assemble(&self, texts: &[&str], info: Option<(&str, InfoPosition)>) -> String {
        let mut parts = self.passages(texts);
        match info {
            Some((text, InfoPosition::BeforeChunks)) => parts.insert(0, text.to_string()),
            Some((text, InfoPosition::AfterChunks)) => parts.push(text.to_string()),
            None => {}
        }
        parts.join(PASSAGE_SEPARATOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PipelineOptions {
    #[serde(default)]
    pub layout: ContextLayout,
    #[serde(default)]
    pub mapping: MappingOptions,
    #[serde(default)]
    pub filter: FilterOptions,
    /// Leave an empty detail set empty instead of falling back to every hit.
    #[serde(default)]
    pub no_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieval,
    Mapping,
    Extractor,
    Cot,
    Filter,
    Generator,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Retrieval => "retrieval",
            Stage::Mapping => "mapping",
            Stage::Extractor => "extractor",
            Stage::Cot => "cot",
            Stage::Filter => "filter",
            Stage::Generator => "generator",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: index built for chunk size {index}, config asks for {config}")]
    ChunkSizeMismatch { index: usize, config: usize },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            PipelineError::ChunkSizeMismatch { .. } => None,
        }
    }

    /// True when the root cause is a transport failure or timeout.
    pub fn is_transport(&self) -> bool {
        let PipelineError::Stage { source, .. } = self else { return false };
        let mut cur: Option<&(dyn std::error::Error + 'static)> = Some(source.as_ref());
        while let Some(e) = cur {
            if let Some(g) = e.downcast_ref::<GatewayError>() {
                return g.is_transport();
            }
            cur = e.source();
        }
        false
    }

    fn at(stage: Stage, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        PipelineError::Stage { stage, source: Box::new(e) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct PipelineTrace<S: Scalar> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<String>,
    pub question: String,
    pub config: StrategyConfig,
    pub hits: RetrievalResult<S>,
    pub mapped: Option<MappedContext<S>>,
    pub global_info: Option<GlobalInfo>,
    pub cot: Option<GuidingCot>,
    pub detail: Option<DetailSet>,
    pub generator_prompt: String,
    pub answer: String,
    pub generator_input_tokens: usize,
    /// Every model call in issue order; filter calls in retrieval order.
    pub stage_calls: Vec<LlmCall>,
}

impl<S: Scalar> PipelineTrace<S> {
    pub fn call_count(&self) -> usize {
        self.stage_calls.len()
    }
}

/// Runs questions through one of the strategies over a prebuilt index.
pub struct Pipeline<'a, S: Scalar> {
    corpus: &'a Corpus,
    index: &'a VectorIndex<S>,
    chunk_size: usize,
    pair: Arc<dyn PairScorer<S>>,
    gateway: &'a Gateway,
    options: PipelineOptions,
}

impl<'a, S: Scalar> Pipeline<'a, S> {
    /// `chunk_size` is the budget `index` was chunked with.
    pub fn new(
        corpus: &'a Corpus,
        index: &'a VectorIndex<S>,
        chunk_size: usize,
        pair: Arc<dyn PairScorer<S>>,
        gateway: &'a Gateway,
    ) -> Self {
        Pipeline { corpus, index, chunk_size, pair, gateway, options: PipelineOptions::default() }
    }

    pub fn with_options(mut self, options: PipelineOptions) -> Self {
        self.options = options;
        self
    }

    pub fn options(&self) -> &PipelineOptions {
        &self.options
    }

    pub fn run_question(&self, question: &str, cfg: &StrategyConfig) -> Result<PipelineTrace<S>, PipelineError> {
        if cfg.chunk_size != self.chunk_size {
            return Err(PipelineError::ChunkSizeMismatch { index: self.chunk_size, config: cfg.chunk_size });
        }
        let hits = retrieve(question, self.index, self.pair.as_ref(), cfg.coarse_n, cfg.top_k)
            .map_err(|e| PipelineError::at(Stage::Retrieval, e))?;
        self.run_with_hits(question, cfg, hits)
    }

    /// Runs everything after retrieval on a given hit list.
    pub fn run_with_hits(
        &self,
        question: &str,
        cfg: &StrategyConfig,
        hits: RetrievalResult<S>,
    ) -> Result<PipelineTrace<S>, PipelineError> {
        let strategy = cfg.strategy;
        let layout = &self.options.layout;
        let mut calls = Vec::new();

        let mapped = if matches!(strategy, Strategy::RL | Strategy::EXT | Strategy::EF) {
            Some(
                map_chunks(&hits, self.corpus, self.options.mapping)
                    .map_err(|e| PipelineError::at(Stage::Mapping, e))?,
            )
        } else {
            None
        };

        let global_info = if strategy.uses_extractor() {
            let ctx = mapped.as_ref().expect("mapped for extractor strategies");
            let g = extract_global(question, ctx, self.corpus, self.gateway)
                .map_err(|e| PipelineError::at(Stage::Extractor, e))?;
            calls.push(g.call.clone());
            Some(g)
        } else {
            None
        };

        let (cot, detail) = if strategy.uses_filter() {
            let cot = guide_cot(question, &hits, self.gateway).map_err(|e| PipelineError::at(Stage::Cot, e))?;
            calls.push(cot.call.clone());
            let out = filter_chunks(question, &hits, &cot, self.gateway, self.options.filter)
                .map_err(|e| PipelineError::at(Stage::Filter, e))?;
            calls.extend(out.calls);
            let mut detail = out.detail;
            if !self.options.no_fallback {
                detail.apply_fallback(&hits);
            }
            (Some(cot), Some(detail))
        } else {
            (None, None)
        };

        let chunk_texts: Vec<&str> = hits.hits.iter().map(|h| h.chunk.text.as_str()).collect();
        let kept_texts = |d: &DetailSet| -> Vec<&str> {
            hits.hits.iter().filter(|h| d.chunks.contains(&h.chunk.id)).map(|h| h.chunk.text.as_str()).collect()
        };
        let info = global_info.as_ref().map(|g| g.text.as_str());
        let content = match strategy {
            Strategy::RB => layout.assemble(&chunk_texts, None),
            Strategy::RL => {
                let texts = mapped
                    .as_ref()
                    .expect("mapped for RL")
                    .texts(self.corpus)
                    .map_err(|e| PipelineError::at(Stage::Mapping, e))?;
                layout.assemble(&texts, None)
            }
            Strategy::EXT => layout.assemble(&chunk_texts, info.map(|t| (t, layout.ext_info))),
            Strategy::FIL => layout.assemble(&kept_texts(detail.as_ref().expect("detail for FIL")), None),
            Strategy::EF => {
                layout.assemble(&kept_texts(detail.as_ref().expect("detail for EF")), info.map(|t| (t, layout.ef_info)))
            }
        };

        let slots = Slots::new().with("content", content).with("question", question);
        let call =
            self.gateway.call(TemplateName::Generator, &slots).map_err(|e| PipelineError::at(Stage::Generator, e))?;
        let answer = call.response.trim().to_string();
        let generator_prompt = call.prompt.clone();
        let generator_input_tokens = self.gateway.counter().count(&generator_prompt);
        calls.push(call);

        Ok(PipelineTrace {
            qid: None,
            question: question.to_string(),
            config: *cfg,
            hits,
            mapped,
            global_info,
            cot,
            detail,
            generator_prompt,
            answer,
            generator_input_tokens,
            stage_calls: calls,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageTokens {
    pub calls: usize,
    pub prompt_tokens: usize,
    pub response_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenReport {
    pub generator_input_tokens: usize,
    pub per_template: BTreeMap<TemplateName, StageTokens>,
    pub total_prompt_tokens: usize,
    pub total_response_tokens: usize,
}

/// Generator-input tokens re-counted with `counter`, plus per-template call totals.
pub fn meter_tokens<S: Scalar>(trace: &PipelineTrace<S>, counter: &dyn TokenCounter) -> TokenReport {
    let mut per_template: BTreeMap<TemplateName, StageTokens> = BTreeMap::new();
    for call in &trace.stage_calls {
        let e = per_template.entry(call.template).or_default();
        e.calls += 1;
        e.prompt_tokens += call.prompt_tokens;
        e.response_tokens += call.response_tokens;
    }
    TokenReport {
        generator_input_tokens: counter.count(&trace.generator_prompt),
        total_prompt_tokens: per_template.values().map(|s| s.prompt_tokens).sum(),
        total_response_tokens: per_template.values().map(|s| s.response_tokens).sum(),
        per_template,
    }
}

pub fn write_traces<S: Scalar, W: Write>(traces: &[PipelineTrace<S>], mut out: W) -> std::io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces<S: Scalar, R: BufRead>(input: R) -> Result<Vec<PipelineTrace<S>>, serde_json::Error> {
    input
        .lines()
        .map(|l| l.map_err(serde_json::Error::io))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?))
        .collect()
}

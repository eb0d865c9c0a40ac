//! Chunk-to-paragraph mapping and global-information extraction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::ChunkId;
use crate::corpus::{Corpus, ParagraphId};
use crate::gateway::{Gateway, GatewayError, LlmCall, Slots, TemplateName};
use crate::retriever::{Hit, RetrievalResult};
use crate::scalar::Scalar;

/// Separator between paragraph or chunk texts inside a prompt's content slot.
pub const PASSAGE_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingOrder {
    /// Rank of each paragraph's representative chunk.
    #[default]
    RetrievalRank,
    /// Position of the paragraph in the corpus.
    CorpusOrder,
}

/// Which hit score picks the representative chunk of a paragraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DedupScore {
    #[default]
    Fine,
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MappingOptions {
    #[serde(default)]
    pub order: MappingOrder,
    #[serde(default)]
    pub score: DedupScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Origin<S: Scalar> {
    pub chunk_id: ChunkId,
    /// Zero-based position of the representative in the hit list.
    pub rank: usize,
    pub score: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct MappedContext<S: Scalar> {
    pub paragraphs: Vec<ParagraphId>,
    pub origin: BTreeMap<ParagraphId, Origin<S>>,
}

impl<S: Scalar> MappedContext<S> {
    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    /// Paragraph texts joined by [`PASSAGE_SEPARATOR`] in mapping order.
    pub fn content(&self, corpus: &Corpus) -> Result<String, MapError> {
        let texts = self.texts(corpus)?;
        Ok(texts.join(PASSAGE_SEPARATOR))
    }

    pub fn texts<'c>(&self, corpus: &'c Corpus) -> Result<Vec<&'c str>, MapError> {
        self.paragraphs
            .iter()
            .map(|id| {
                corpus.get(id).map(|p| p.text.as_str()).ok_or_else(|| MapError::UnknownParent {
                    chunk_id: self.origin.get(id).map(|o| o.chunk_id.clone()),
                    parent_id: id.clone(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("{}: parent paragraph {parent_id} is not in the corpus", chunk_id.as_ref().map_or("<unknown chunk>".to_string(), |c| format!("chunk {c}")))]
    UnknownParent { chunk_id: Option<ChunkId>, parent_id: ParagraphId },
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("extractor: empty mapped context")]
    EmptyContext,
    #[error("extractor: {0}")]
    Mapping(#[from] MapError),
    #[error("extractor: {0}")]
    Gateway(#[from] GatewayError),
    #[error("extractor: model returned empty global information")]
    EmptyOutput { call: Box<LlmCall> },
}

fn better<S: Scalar>(candidate: &Hit<S>, current: &Hit<S>, score: DedupScore) -> bool {
    let pick = |h: &Hit<S>| match score {
        DedupScore::Fine => h.fine_score,
        DedupScore::Coarse => h.coarse_score,
    };
    match pick(candidate).rank_cmp(&pick(current)) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => candidate.chunk.seq < current.chunk.seq,
    }
}

/// Maps retrieved chunks to their source paragraphs, one entry per parent.
///
/// The representative of a parent is its best-scoring chunk (lower `seq` on
/// ties); paragraphs are ordered by the representative's rank unless
/// `opts.order` asks for corpus order.
pub fn map_chunks<S: Scalar>(
    hits: &RetrievalResult<S>,
    corpus: &Corpus,
    opts: MappingOptions,
) -> Result<MappedContext<S>, MapError> {
    let mut best: BTreeMap<&ParagraphId, usize> = BTreeMap::new();
    for (rank, hit) in hits.hits.iter().enumerate() {
        if corpus.get(&hit.chunk.parent_id).is_none() {
            return Err(MapError::UnknownParent {
                chunk_id: Some(hit.chunk.id.clone()),
                parent_id: hit.chunk.parent_id.clone(),
            });
        }
        best.entry(&hit.chunk.parent_id)
            .and_modify(|cur| {
                if better(hit, &hits.hits[*cur], opts.score) {
                    *cur = rank;
                }
            })
            .or_insert(rank);
    }

    let mut order: Vec<(&ParagraphId, usize)> = best.into_iter().collect();
    match opts.order {
        MappingOrder::RetrievalRank => order.sort_by_key(|&(_, rank)| rank),
        MappingOrder::CorpusOrder => order.sort_by_key(|&(id, _)| corpus.position(id)),
    }

    let mut origin = BTreeMap::new();
    let paragraphs = order
        .into_iter()
        .map(|(id, rank)| {
            let hit = &hits.hits[rank];
            let score = match opts.score {
                DedupScore::Fine => hit.fine_score,
                DedupScore::Coarse => hit.coarse_score,
            };
            origin.insert(id.clone(), Origin { chunk_id: hit.chunk.id.clone(), rank, score });
            id.clone()
        })
        .collect();
    Ok(MappedContext { paragraphs, origin })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalInfo {
    /// Model response, verbatim.
    pub text: String,
    pub call: LlmCall,
}

/// Slots for the extractor prompt over a mapped context.
pub fn extractor_slots<S: Scalar>(question: &str, ctx: &MappedContext<S>, corpus: &Corpus) -> Result<Slots, MapError> {
    Ok(Slots::new().with("content", ctx.content(corpus)?).with("question", question))
}

/// One extractor call over the full text of every mapped paragraph.
pub fn extract_global<S: Scalar>(
    question: &str,
    ctx: &MappedContext<S>,
    corpus: &Corpus,
    gateway: &Gateway,
) -> Result<GlobalInfo, ExtractError> {
    if ctx.is_empty() {
        return Err(ExtractError::EmptyContext);
    }
    let slots = extractor_slots(question, ctx, corpus)?;
    let call = gateway.call(TemplateName::Extractor, &slots)?;
    if call.response.trim().is_empty() {
        return Err(ExtractError::EmptyOutput { call: Box::new(call) });
    }
    Ok(GlobalInfo { text: call.response.clone(), call })
}

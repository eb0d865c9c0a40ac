//! Two-stage hybrid retrieval.
//!
//! The coarse stage takes the top `coarse_n` chunks by cosine similarity
//! between independently embedded question and chunk. The fine stage scores
//! each of those jointly with a [`PairScorer`], sorts by that score and keeps
//! `k`. Both scores are kept on every hit.

mod index;
pub mod remote;
mod scorers;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{build_index, BuildOptions, IndexError, VectorIndex};
pub use scorers::{
    BagOfWordsEmbedder, EmbeddingPairScorer, EmbeddingScorer, HashEmbedder, LexicalOverlapScorer, PairScorer,
    ScorerError,
};

use crate::chunker::{Chunk, ChunkId};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Hit<S: Scalar> {
    pub chunk: Chunk,
    pub coarse_score: S,
    pub fine_score: S,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct RetrievalResult<S: Scalar> {
    pub question: String,
    pub hits: Vec<Hit<S>>,
    pub k: usize,
}

impl<S: Scalar> RetrievalResult<S> {
    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn chunk_ids(&self) -> Vec<&ChunkId> {
        self.hits.iter().map(|h| &h.chunk.id).collect()
    }
}

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("rerank failed at chunk {chunk_id} after scoring {scored} of {candidates} candidates: {source}")]
    Rerank {
        chunk_id: ChunkId,
        scored: usize,
        candidates: usize,
        #[source]
        source: ScorerError,
    },
    #[error("k must be positive")]
    ZeroK,
}

/// Coarse fan-out used when none is configured: `max(50, 5k)`.
pub fn default_coarse_n(k: usize) -> usize {
    (5 * k).max(50)
}

/// Coarse cosine top-`coarse_n`, then rerank by `pair` and keep `k`.
///
/// `k` is capped at the index size and `coarse_n` is raised to at least `k`.
pub fn retrieve<S: Scalar>(
    question: &str,
    index: &VectorIndex<S>,
    pair: &dyn PairScorer<S>,
    coarse_n: usize,
    k: usize,
) -> Result<RetrievalResult<S>, RetrieveError> {
    if k == 0 {
        return Err(RetrieveError::ZeroK);
    }
    let k = k.min(index.len());
    let coarse_n = coarse_n.max(k).min(index.len());
    let query = index.embed_query(question)?;
    let coarse = index.search(&query, coarse_n);

    let mut hits = Vec::with_capacity(coarse.len());
    for (scored, (pos, coarse_score)) in coarse.iter().enumerate() {
        let chunk = &index.chunks()[*pos];
        let fine_score = pair.score(question, &chunk.text).map_err(|source| RetrieveError::Rerank {
            chunk_id: chunk.id.clone(),
            scored,
            candidates: coarse.len(),
            source,
        })?;
        hits.push(Hit { chunk: chunk.clone(), coarse_score: *coarse_score, fine_score });
    }
    hits.sort_by(|a, b| index::rank_order((&a.chunk.id, a.fine_score), (&b.chunk.id, b.fine_score)));
    hits.truncate(k);
    Ok(RetrievalResult { question: question.to_string(), hits, k })
}

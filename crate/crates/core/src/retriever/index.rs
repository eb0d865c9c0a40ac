//! Exact cosine index over unit-normalized chunk embeddings.

use std::cmp::Ordering;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use super::scorers::{EmbeddingScorer, ScorerError};
use crate::chunker::{Chunk, ChunkId};
use crate::scalar::{dot, normalize_in_place, Scalar};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index over zero chunks")]
    Empty,
    #[error("embedding failed at chunk {chunk_id}: {source}")]
    Embedding {
        chunk_id: ChunkId,
        #[source]
        source: ScorerError,
    },
    #[error("query embedding failed: {0}")]
    Query(#[source] ScorerError),
    #[error("could not start embedding workers: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub batch_size: usize,
    /// Upper bound on embedding batches in flight at once.
    pub max_in_flight: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { batch_size: 64, max_in_flight: 4 }
    }
}

pub struct VectorIndex<S: Scalar> {
    chunks: Vec<Chunk>,
    /// Row-major `chunks.len() x dim`, each row unit length (or zero).
    vectors: Vec<S>,
    dim: usize,
    embedder: Arc<dyn EmbeddingScorer<S>>,
}

impl<S: Scalar> std::fmt::Debug for VectorIndex<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorIndex").field("len", &self.chunks.len()).field("dim", &self.dim).finish()
    }
}

fn embed_batch<S: Scalar>(embedder: &dyn EmbeddingScorer<S>, batch: &[Chunk]) -> Result<Vec<Vec<S>>, IndexError> {
    let dim = embedder.dimension();
    let texts: Vec<&str> = batch.iter().map(|c| c.text.as_str()).collect();
    let check = |vs: &[Vec<S>], chunks: &[Chunk]| -> Result<(), IndexError> {
        if vs.len() != chunks.len() {
            return Err(IndexError::Embedding {
                chunk_id: chunks[vs.len().min(chunks.len() - 1)].id.clone(),
                source: ScorerError::Count { expected: chunks.len(), got: vs.len() },
            });
        }
        for (v, c) in vs.iter().zip(chunks) {
            if v.len() != dim {
                return Err(IndexError::Embedding {
                    chunk_id: c.id.clone(),
                    source: ScorerError::Dimension { expected: dim, got: v.len() },
                });
            }
        }
        Ok(())
    };
    match embedder.embed(&texts) {
        Ok(vs) => {
            check(&vs, batch)?;
            Ok(vs)
        }
        Err(batch_err) => {
            // Pin the failure to a single chunk.
            for c in batch {
                if let Err(source) = embedder.embed(&[c.text.as_str()]) {
                    return Err(IndexError::Embedding { chunk_id: c.id.clone(), source });
                }
            }
            Err(IndexError::Embedding { chunk_id: batch[0].id.clone(), source: batch_err })
        }
    }
}

/// Embeds every chunk and stores the normalized vectors.
pub fn build_index<S: Scalar>(
    chunks: Vec<Chunk>,
    embedder: Arc<dyn EmbeddingScorer<S>>,
    opts: BuildOptions,
) -> Result<VectorIndex<S>, IndexError> {
    if chunks.is_empty() {
        return Err(IndexError::Empty);
    }
    let dim = embedder.dimension();
    let batch_size = opts.batch_size.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.max_in_flight.max(1))
        .build()
        .map_err(|e| IndexError::Pool(e.to_string()))?;
    let batches: Vec<Result<Vec<Vec<S>>, IndexError>> =
        pool.install(|| chunks.par_chunks(batch_size).map(|b| embed_batch(embedder.as_ref(), b)).collect());

    let mut vectors = Vec::with_capacity(chunks.len() * dim);
    for batch in batches {
        for mut v in batch? {
            normalize_in_place(&mut v);
            vectors.extend(v);
        }
    }
    Ok(VectorIndex { chunks, vectors, dim, embedder })
}

/// Highest score first, chunk id ascending on ties.
pub(crate) fn rank_order<S: Scalar>(a: (&ChunkId, S), b: (&ChunkId, S)) -> Ordering {
    b.1.rank_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

impl<S: Scalar> VectorIndex<S> {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn vector(&self, i: usize) -> &[S] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedder(&self) -> &Arc<dyn EmbeddingScorer<S>> {
        &self.embedder
    }

    pub fn embed_query(&self, text: &str) -> Result<Vec<S>, IndexError> {
        let mut v = self
            .embedder
            .embed(&[text])
            .map_err(IndexError::Query)?
            .pop()
            .ok_or(IndexError::Query(ScorerError::Count { expected: 1, got: 0 }))?;
        if v.len() != self.dim {
            return Err(IndexError::Query(ScorerError::Dimension { expected: self.dim, got: v.len() }));
        }
        normalize_in_place(&mut v);
        Ok(v)
    }

    /// Top `n` chunk positions by cosine with `query` (normalized here).
    pub fn search(&self, query: &[S], n: usize) -> Vec<(usize, S)> {
        let mut q = query.to_vec();
        normalize_in_place(&mut q);
        let mut scored: Vec<(usize, S)> = (0..self.chunks.len()).map(|i| (i, dot(self.vector(i), &q))).collect();
        let n = n.min(scored.len());
        let cmp = |a: &(usize, S), b: &(usize, S)| rank_order((&self.chunks[a.0].id, a.1), (&self.chunks[b.0].id, b.1));
        if n < scored.len() && n > 0 {
            scored.select_nth_unstable_by(n - 1, cmp);
            scored.truncate(n);
        } else {
            scored.truncate(n);
        }
        scored.sort_by(cmp);
        scored
    }
}

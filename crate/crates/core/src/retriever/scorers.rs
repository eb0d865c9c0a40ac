//! Scorer interfaces and deterministic offline implementations.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::{cosine, normalize_in_place, Scalar};
use crate::text::stable_u64;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ScorerError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("expected {expected}-dimensional vectors, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("expected {expected} vectors, got {got}")]
    Count { expected: usize, got: usize },
    #[error("{0}")]
    Other(String),
}

/// Independent text encoder (the dual-encoder side of hybrid retrieval).
pub trait EmbeddingScorer<S: Scalar>: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<S>>, ScorerError>;
}

/// Joint question/passage relevance scorer (the cross-encoder side).
pub trait PairScorer<S: Scalar>: Send + Sync {
    fn score(&self, question: &str, passage: &str) -> Result<S, ScorerError>;
}

impl<S: Scalar, T: EmbeddingScorer<S> + ?Sized> EmbeddingScorer<S> for Arc<T> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<S>>, ScorerError> {
        (**self).embed(texts)
    }
}

impl<S: Scalar, T: PairScorer<S> + ?Sized> PairScorer<S> for Arc<T> {
    fn score(&self, question: &str, passage: &str) -> Result<S, ScorerError> {
        (**self).score(question, passage)
    }
}

/// Hashes each text into a pseudo-random unit vector. Equal texts get equal
/// vectors; otherwise similarity carries no meaning.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder { dim }
    }

    pub fn vector<S: Scalar>(&self, text: &str) -> Vec<S> {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&["hash-embedder", text]));
        let mut v: Vec<S> = (0..self.dim).map(|_| S::from_f64_lossy(rng.gen::<f64>() * 2.0 - 1.0)).collect();
        normalize_in_place(&mut v);
        v
    }
}

impl<S: Scalar> EmbeddingScorer<S> for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<S>>, ScorerError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

pub(crate) fn lexical_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

/// Signed feature hashing over lower-cased alphanumeric tokens. Gives a
/// lexical notion of similarity without any model.
#[derive(Debug, Clone)]
pub struct BagOfWordsEmbedder {
    pub dim: usize,
}

impl BagOfWordsEmbedder {
    pub fn new(dim: usize) -> Self {
        BagOfWordsEmbedder { dim }
    }
}

impl<S: Scalar> EmbeddingScorer<S> for BagOfWordsEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<S>>, ScorerError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![S::zero(); self.dim];
                for tok in lexical_tokens(t) {
                    let h = stable_u64(&[&tok]);
                    let slot = (h % self.dim as u64) as usize;
                    let sign = if (h >> 63) == 1 { -S::one() } else { S::one() };
                    v[slot] = v[slot] + sign;
                }
                normalize_in_place(&mut v);
                v
            })
            .collect())
    }
}

/// Fraction of distinct question tokens that occur in the passage.
#[derive(Debug, Clone, Default)]
pub struct LexicalOverlapScorer;

impl<S: Scalar> PairScorer<S> for LexicalOverlapScorer {
    fn score(&self, question: &str, passage: &str) -> Result<S, ScorerError> {
        let q: HashSet<String> = lexical_tokens(question).collect();
        if q.is_empty() {
            return Ok(S::zero());
        }
        let p: HashSet<String> = lexical_tokens(passage).collect();
        let hit = q.iter().filter(|t| p.contains(*t)).count();
        Ok(S::from_f64_lossy(hit as f64 / q.len() as f64))
    }
}

/// Pair scorer that re-embeds both sides and returns their cosine. Wrapping
/// the same encoder used for the index reproduces the coarse score exactly.
pub struct EmbeddingPairScorer<S: Scalar> {
    embedder: Arc<dyn EmbeddingScorer<S>>,
}

impl<S: Scalar> EmbeddingPairScorer<S> {
    pub fn new(embedder: Arc<dyn EmbeddingScorer<S>>) -> Self {
        EmbeddingPairScorer { embedder }
    }
}

impl<S: Scalar> PairScorer<S> for EmbeddingPairScorer<S> {
    fn score(&self, question: &str, passage: &str) -> Result<S, ScorerError> {
        let v = self.embedder.embed(&[question, passage])?;
        if v.len() != 2 {
            return Err(ScorerError::Count { expected: 2, got: v.len() });
        }
        let mut a = v[0].clone();
        let mut b = v[1].clone();
        normalize_in_place(&mut a);
        normalize_in_place(&mut b);
        Ok(cosine(&a, &b))
    }
}

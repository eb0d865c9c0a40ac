//! Sentence-aligned chunking with a word budget, sentence overlap and tail merging.
//!
//! A paragraph is split into sentences, which are packed greedily into chunk
//! bodies of at most `chunk_size` words. Each chunk after the first repeats
//! the last `overlap_sentences` sentences before its body; the overlap does
//! not count against the budget. A final body shorter than `min_tail_words`
//! is folded into the chunk before it. Sentences are never cut: a sentence
//! longer than the budget becomes a chunk of its own and is flagged.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Paragraph, ParagraphId};
use crate::text::word_count;

/// Lower-cased tokens that end in `.` without ending a sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "vs", "e.g", "i.e", "inc", "ltd", "co", "corp", "fig",
    "approx", "dept", "u.s", "u.k", "jan", "feb", "mar", "apr", "aug", "sept", "oct", "nov", "dec",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub String);

impl ChunkId {
    pub fn new(parent: &ParagraphId, seq: usize) -> Self {
        ChunkId(format!("{parent}#{seq}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ChunkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: ChunkId,
    pub parent_id: ParagraphId,
    pub seq: usize,
    pub text: String,
    /// Words in `text`, overlap included.
    pub word_count: usize,
    /// Sentence index range of the whole chunk (overlap + body) in the parent.
    pub sentences: Range<usize>,
    /// First sentence of the body; `sentences.start..body_start` is the overlap.
    pub body_start: usize,
    pub body_words: usize,
    /// A single sentence longer than the budget.
    pub oversized: bool,
    /// The original final chunk was too short and got merged into this one.
    pub merged_tail: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    pub chunk_size: usize,
    pub overlap_sentences: usize,
    pub min_tail_words: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("chunk_size must be positive")]
    ZeroChunkSize,
    #[error("min_tail_words must be positive")]
    ZeroMinTail,
    #[error("min_tail_words ({min_tail}) exceeds chunk_size ({chunk_size})")]
    TailExceedsChunk { min_tail: usize, chunk_size: usize },
}

impl ChunkPolicy {
    /// One sentence of overlap, tails shorter than a quarter chunk are merged.
    pub fn with_size(chunk_size: usize) -> Self {
        ChunkPolicy { chunk_size, overlap_sentences: 1, min_tail_words: (chunk_size / 4).max(1) }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.chunk_size == 0 {
            return Err(PolicyError::ZeroChunkSize);
        }
        if self.min_tail_words == 0 {
            return Err(PolicyError::ZeroMinTail);
        }
        if self.min_tail_words > self.chunk_size {
            return Err(PolicyError::TailExceedsChunk { min_tail: self.min_tail_words, chunk_size: self.chunk_size });
        }
        Ok(())
    }
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self::with_size(200)
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ';')
}

fn is_abbreviation(text_before: &str) -> bool {
    let token = text_before.rsplit(char::is_whitespace).next().unwrap_or("");
    let token = token.trim_start_matches(|c: char| !c.is_alphanumeric());
    let lower = token.to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Byte ranges of the sentences of `text`, whitespace between them excluded.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if start.is_none() {
            if c.is_whitespace() {
                continue;
            }
            start = Some(i);
        }
        if !is_terminator(c) {
            continue;
        }
        let followed_by_space = matches!(chars.peek(), Some((_, n)) if n.is_whitespace());
        if !followed_by_space {
            continue;
        }
        let s = start.expect("inside a sentence");
        if c == '.' && is_abbreviation(&text[s..i]) {
            continue;
        }
        let end = i + c.len_utf8();
        spans.push(s..end);
        start = None;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            spans.push(s..end);
        }
    }
    spans
}

/// Splits on `.`, `!`, `?` or `;` followed by whitespace, except after a
/// known abbreviation.
pub fn split_sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}

/// Greedy body packing: returns `(start, end)` sentence ranges of chunk bodies.
fn pack_bodies(words: &[usize], policy: &ChunkPolicy) -> Vec<Range<usize>> {
    let mut bodies = Vec::new();
    let mut start = 0;
    let mut used = 0;
    for (i, &w) in words.iter().enumerate() {
        if i > start && used + w > policy.chunk_size {
            bodies.push(start..i);
            start = i;
            used = 0;
        }
        used += w;
    }
    if start < words.len() {
        bodies.push(start..words.len());
    }
    bodies
}

pub fn chunk_paragraph(p: &Paragraph, policy: &ChunkPolicy) -> Vec<Chunk> {
    let spans = sentence_spans(&p.text);
    if spans.is_empty() {
        return Vec::new();
    }
    let words: Vec<usize> = spans.iter().map(|r| word_count(&p.text[r.clone()])).collect();
    let body_words = |r: &Range<usize>| words[r.clone()].iter().sum::<usize>();

    let mut bodies = pack_bodies(&words, policy);
    let mut merged_tail = false;
    if bodies.len() >= 2 && body_words(bodies.last().expect("non-empty")) < policy.min_tail_words {
        let tail = bodies.pop().expect("len >= 2");
        bodies.last_mut().expect("len >= 1").end = tail.end;
        merged_tail = true;
    }

    let last = bodies.len() - 1;
    bodies
        .into_iter()
        .enumerate()
        .map(|(seq, body)| {
            let first = if seq == 0 { body.start } else { body.start.saturating_sub(policy.overlap_sentences) };
            let text = p.text[spans[first].start..spans[body.end - 1].end].to_string();
            let bw = body_words(&body);
            Chunk {
                id: ChunkId::new(&p.id, seq),
                parent_id: p.id.clone(),
                seq,
                word_count: words[first..body.end].iter().sum(),
                text,
                sentences: first..body.end,
                body_start: body.start,
                body_words: bw,
                oversized: body.len() == 1 && bw > policy.chunk_size,
                merged_tail: merged_tail && seq == last,
            }
        })
        .collect()
}

/// Chunks every paragraph, ordered by (paragraph id, seq).
pub fn chunk_corpus(corpus: &Corpus, policy: &ChunkPolicy) -> Vec<Chunk> {
    let mut chunks: Vec<Chunk> = corpus.paragraphs().par_iter().flat_map_iter(|p| chunk_paragraph(p, policy)).collect();
    chunks.sort_by(|a, b| a.parent_id.cmp(&b.parent_id).then(a.seq.cmp(&b.seq)));
    chunks
}

#[derive(Serialize)]
struct DumpLine<'a> {
    id: &'a ChunkId,
    parent_id: &'a ParagraphId,
    seq: usize,
    text: &'a str,
}

/// Line-delimited `{id, parent_id, seq, text}` objects.
pub fn write_chunk_dump<W: std::io::Write>(chunks: &[Chunk], mut out: W) -> std::io::Result<()> {
    for c in chunks {
        serde_json::to_writer(&mut out, &DumpLine { id: &c.id, parent_id: &c.parent_id, seq: c.seq, text: &c.text })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

//! Questions, source paragraphs and the deduplicated retrieval corpus.
//!
//! Multi-hop QA records arrive as one JSON object per line:
//!
//! ```text
//! {"question": "...", "answer": "...", "dataset": "hotpotqa",
//!  "paragraphs": [{"title": "...", "text": "...", "is_supporting": true}, ...]}
//! ```
//!
//! Every paragraph is keyed by a hash of its normalized text, so the same
//! paragraph attached to several questions collapses into one corpus entry
//! and all of those questions reference the same id.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{normalize_text, short_hash, word_count};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParagraphId(pub String);

impl ParagraphId {
    /// Content id: `p` followed by 16 hex digits of the hash of the normalized text.
    pub fn for_text(text: &str) -> Self {
        ParagraphId(format!("p{}", short_hash(normalize_text(text).as_bytes(), 16)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParagraphId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub id: ParagraphId,
    pub title: Option<String>,
    pub text: String,
    pub source_dataset: String,
    pub word_count: usize,
}

impl Paragraph {
    pub fn new(text: impl Into<String>, title: Option<String>, source_dataset: impl Into<String>) -> Self {
        let text = text.into();
        Paragraph {
            id: ParagraphId::for_text(&text),
            word_count: word_count(&text),
            title: title.filter(|t| !t.is_empty()),
            text,
            source_dataset: source_dataset.into(),
        }
    }
}

/// One paragraph slot inside a question's context, in source order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextParagraph {
    pub id: ParagraphId,
    pub supporting: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qid: String,
    pub question: String,
    pub answer: String,
    pub dataset: String,
    /// Supporting and distracting paragraphs interleaved in source order.
    pub context: Vec<ContextParagraph>,
}

impl QaRecord {
    pub fn supporting(&self) -> Vec<&ParagraphId> {
        self.context.iter().filter(|c| c.supporting).map(|c| &c.id).collect()
    }

    pub fn distracting(&self) -> Vec<&ParagraphId> {
        self.context.iter().filter(|c| !c.supporting).map(|c| &c.id).collect()
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at index {index}: {reason}")]
    MalformedRecord { index: usize, reason: String },
    #[error("duplicate paragraph {0} in corpus")]
    DuplicateParagraph(ParagraphId),
    #[error("paragraph {0} has empty text")]
    EmptyParagraph(ParagraphId),
    #[error("unknown paragraph id {0}")]
    UnknownParagraph(ParagraphId),
    #[error("corpus line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable, deduplicated paragraph store.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    paragraphs: Vec<Paragraph>,
    by_id: HashMap<ParagraphId, usize>,
    /// normalized-text hash -> paragraph id
    dedup_index: HashMap<String, ParagraphId>,
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    id: ParagraphId,
    title: Option<String>,
    text: String,
    source_dataset: String,
}

impl Corpus {
    /// Builds a corpus from already-unique paragraphs, keeping their order.
    pub fn from_paragraphs(paragraphs: Vec<Paragraph>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for p in paragraphs {
            if p.text.trim().is_empty() {
                return Err(CorpusError::EmptyParagraph(p.id));
            }
            match corpus.insert(p) {
                Insert::Added(_) => {}
                Insert::Existing(id) => return Err(CorpusError::DuplicateParagraph(id)),
            }
        }
        Ok(corpus)
    }

    fn insert(&mut self, p: Paragraph) -> Insert {
        let key = short_hash(normalize_text(&p.text).as_bytes(), 64);
        if let Some(existing) = self.dedup_index.get(&key) {
            return Insert::Existing(existing.clone());
        }
        if self.by_id.contains_key(&p.id) {
            return Insert::Existing(p.id);
        }
        let id = p.id.clone();
        self.dedup_index.insert(key, id.clone());
        self.by_id.insert(id.clone(), self.paragraphs.len());
        self.paragraphs.push(p);
        Insert::Added(id)
    }

    pub fn get(&self, id: &ParagraphId) -> Option<&Paragraph> {
        self.by_id.get(id).map(|&i| &self.paragraphs[i])
    }

    pub fn resolve(&self, id: &ParagraphId) -> Result<&Paragraph, CorpusError> {
        self.get(id).ok_or_else(|| CorpusError::UnknownParagraph(id.clone()))
    }

    pub fn paragraphs(&self) -> &[Paragraph] {
        &self.paragraphs
    }

    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    /// Position of a paragraph in corpus (first-seen) order.
    pub fn position(&self, id: &ParagraphId) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Line-delimited `{id, title, text, source_dataset}` objects.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CorpusError> {
        for p in &self.paragraphs {
            let line = CorpusLine {
                id: p.id.clone(),
                title: p.title.clone(),
                text: p.text.clone(),
                source_dataset: p.source_dataset.clone(),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| CorpusError::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, CorpusError> {
        let mut paragraphs = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: CorpusLine =
                serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?;
            paragraphs.push(Paragraph {
                word_count: word_count(&parsed.text),
                id: parsed.id,
                title: parsed.title,
                text: parsed.text,
                source_dataset: parsed.source_dataset,
            });
        }
        Self::from_paragraphs(paragraphs)
    }
}

enum Insert {
    Added(ParagraphId),
    Existing(ParagraphId),
}

/// A record as found in the ingest file. Every field is optional here so
/// that missing ones surface as a [`CorpusError::MalformedRecord`] with the
/// record index instead of a bare serde error.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub question: Option<String>,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default)]
    pub paragraphs: Option<Vec<RawParagraph>>,
    #[serde(default)]
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawParagraph {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub is_supporting: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestFormat {
    /// One JSON object per line.
    #[default]
    Jsonl,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub paragraphs_seen: usize,
    pub corpus_size: usize,
    pub duplicates_merged: usize,
    /// (record index, paragraph index) of paragraphs rejected for empty text
    pub rejected_empty: Vec<(usize, usize)>,
    /// (record index, paragraph id) where one record listed the same text twice
    pub repeated_in_record: Vec<(usize, ParagraphId)>,
    pub per_dataset: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub corpus: Corpus,
    pub records: Vec<QaRecord>,
    pub report: IngestReport,
}

/// Parses an ingest file into raw records. Blank lines are skipped but
/// still advance the record index.
pub fn parse_records<R: BufRead>(input: R, format: IngestFormat) -> Result<Vec<RawRecord>, CorpusError> {
    match format {
        IngestFormat::Jsonl => {
            let mut out = Vec::new();
            for (index, line) in input.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RawRecord = serde_json::from_str(&line)
                    .map_err(|e| CorpusError::MalformedRecord { index, reason: e.to_string() })?;
                out.push(rec);
            }
            Ok(out)
        }
    }
}

/// Deduplicates all paragraphs of `records` into one corpus and links each
/// question to its paragraphs.
pub fn ingest_dataset(records: &[RawRecord]) -> Result<Ingested, CorpusError> {
    let mut corpus = Corpus::default();
    let mut report = IngestReport::default();
    let mut out = Vec::with_capacity(records.len());

    for (index, raw) in records.iter().enumerate() {
        let malformed = |reason: &str| CorpusError::MalformedRecord { index, reason: reason.to_string() };
        let question = raw.question.as_ref().ok_or_else(|| malformed("missing question"))?;
        let answer = raw.answer.as_ref().ok_or_else(|| malformed("missing answer"))?;
        let paragraphs = raw.paragraphs.as_ref().ok_or_else(|| malformed("missing paragraph list"))?;
        if paragraphs.is_empty() {
            return Err(malformed("empty paragraph list"));
        }
        let dataset = raw.dataset.clone().unwrap_or_default();

        let mut context: Vec<ContextParagraph> = Vec::with_capacity(paragraphs.len());
        for (pi, rp) in paragraphs.iter().enumerate() {
            report.paragraphs_seen += 1;
            if rp.text.trim().is_empty() {
                report.rejected_empty.push((index, pi));
                continue;
            }
            let title = if rp.title.is_empty() { None } else { Some(rp.title.clone()) };
            let id = match corpus.insert(Paragraph::new(rp.text.clone(), title, dataset.clone())) {
                Insert::Added(id) => id,
                Insert::Existing(id) => {
                    report.duplicates_merged += 1;
                    id
                }
            };
            if let Some(slot) = context.iter_mut().find(|c| c.id == id) {
                // Same text twice in one record: keep the first slot, a
                // supporting flag on either copy wins.
                slot.supporting |= rp.is_supporting;
                report.repeated_in_record.push((index, id));
                continue;
            }
            context.push(ContextParagraph { id, supporting: rp.is_supporting });
        }
        if context.is_empty() {
            return Err(malformed("no paragraph with non-empty text"));
        }

        *report.per_dataset.entry(dataset.clone()).or_default() += 1;
        out.push(QaRecord {
            qid: raw.id.clone().unwrap_or_else(|| format!("{dataset}-{index:05}")),
            question: question.clone(),
            answer: answer.clone(),
            dataset,
            context,
        });
    }

    report.records = out.len();
    report.corpus_size = corpus.len();
    Ok(Ingested { corpus, records: out, report })
}

pub fn write_records_jsonl<W: Write>(records: &[QaRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records_jsonl<R: BufRead>(input: R) -> Result<Vec<QaRecord>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

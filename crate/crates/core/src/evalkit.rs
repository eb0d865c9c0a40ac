//! Answer scoring and strategy-grid experiments.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunker::{chunk_corpus, ChunkPolicy};
use crate::corpus::{Corpus, QaRecord};
use crate::gateway::Gateway;
use crate::orchestrator::{Pipeline, PipelineOptions, PipelineTrace, Strategy, StrategyConfig};
use crate::retriever::{build_index, BuildOptions, EmbeddingScorer, IndexError, PairScorer, VectorIndex};
use crate::scalar::Scalar;

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let mut out = String::with_capacity(no_punct.len());
    let mut word = String::new();
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    let flush = |word: &mut String, out: &mut String| {
        if matches!(word.as_str(), "a" | "an" | "the") {
            out.push(' ');
        } else {
            out.push_str(word);
        }
        word.clear();
    };
    for c in no_punct.chars() {
        if is_word(c) {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Token-multiset F1 between normalized prediction and gold.
///
/// Two empty answers score 1, exactly one empty answer scores 0.
pub fn f1_score<S: Scalar>(prediction: &str, gold: &str) -> S {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { S::one() } else { S::zero() };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return S::zero();
    }
    let same = S::from_usize(same).expect("count fits");
    let precision = same / S::from_usize(pt.len()).expect("count fits");
    let recall = same / S::from_usize(gt.len()).expect("count fits");
    let two = S::one() + S::one();
    two * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct QuestionScore<S: Scalar> {
    pub qid: String,
    pub f1: S,
    pub answer: String,
    pub gold: String,
    pub generator_input_tokens: usize,
    pub calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct EvalResult<S: Scalar> {
    pub config: StrategyConfig,
    pub dataset: String,
    pub per_question: Vec<QuestionScore<S>>,
    /// Mean F1 over scored questions, times 100.
    pub mean_f1: S,
    pub mean_gen_tokens: S,
    /// Questions counted in the means.
    pub n: usize,
}

impl<S: Scalar> EvalResult<S> {
    fn aggregate(
        config: StrategyConfig,
        dataset: String,
        per_question: Vec<QuestionScore<S>>,
        exclude_failures: bool,
    ) -> Self {
        let counted: Vec<&QuestionScore<S>> =
            per_question.iter().filter(|q| !(exclude_failures && q.error.is_some())).collect();
        let n = counted.len();
        let (mean_f1, mean_gen_tokens) = if n == 0 {
            (S::zero(), S::zero())
        } else {
            let nn = S::from_usize(n).expect("count fits");
            let hundred = S::from_f64_lossy(100.0);
            let f1: S = counted.iter().map(|q| q.f1).sum();
            let tok: S = counted.iter().map(|q| S::from_usize(q.generator_input_tokens).expect("fits")).sum();
            (f1 / nn * hundred, tok / nn)
        };
        EvalResult { config, dataset, per_question, mean_f1, mean_gen_tokens, n }
    }
}

/// Everything an experiment needs besides the questions and the grid.
pub struct ExperimentDeps<'a, S: Scalar> {
    pub corpus: &'a Corpus,
    /// One index per chunk size used in the grid.
    pub indexes: &'a BTreeMap<usize, VectorIndex<S>>,
    pub pair: Arc<dyn PairScorer<S>>,
    pub gateway: &'a Gateway,
    pub options: PipelineOptions,
    /// Leave failed questions out of the means instead of scoring them 0.
    pub exclude_failures: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("no index for chunk size {0}")]
    MissingIndex(usize),
}

/// Chunks and indexes the corpus once per distinct chunk size.
pub fn build_indexes<S: Scalar>(
    corpus: &Corpus,
    chunk_sizes: impl IntoIterator<Item = usize>,
    embedder: Arc<dyn EmbeddingScorer<S>>,
    opts: BuildOptions,
) -> Result<BTreeMap<usize, VectorIndex<S>>, IndexError> {
    let sizes: BTreeSet<usize> = chunk_sizes.into_iter().collect();
    let mut out = BTreeMap::new();
    for size in sizes {
        let chunks = chunk_corpus(corpus, &ChunkPolicy::with_size(size));
        out.insert(size, build_index(chunks, Arc::clone(&embedder), opts)?);
    }
    Ok(out)
}

/// Output of [`run_experiment`].
pub struct Experiment<S: Scalar> {
    /// Grid order, then dataset name.
    pub results: Vec<EvalResult<S>>,
    /// Successful traces in the same order as the scores they produced.
    pub traces: Vec<PipelineTrace<S>>,
}

/// Runs every grid point on every question, grouped by dataset.
///
/// Questions run in parallel; results keep input order, so repeated runs
/// against the same mocks produce identical output.
pub fn run_experiment<S: Scalar>(
    questions: &[QaRecord],
    grid: &[StrategyConfig],
    deps: &ExperimentDeps<'_, S>,
) -> Result<Experiment<S>, ExperimentError> {
    let mut by_dataset: BTreeMap<&str, Vec<&QaRecord>> = BTreeMap::new();
    for q in questions {
        by_dataset.entry(q.dataset.as_str()).or_default().push(q);
    }

    let mut results = Vec::new();
    let mut traces = Vec::new();
    for cfg in grid {
        let index = deps.indexes.get(&cfg.chunk_size).ok_or(ExperimentError::MissingIndex(cfg.chunk_size))?;
        let pipeline = Pipeline::new(deps.corpus, index, cfg.chunk_size, Arc::clone(&deps.pair), deps.gateway)
            .with_options(deps.options);
        for (dataset, qs) in &by_dataset {
            let runs: Vec<(QuestionScore<S>, Option<PipelineTrace<S>>)> = qs
                .par_iter()
                .map(|q| match pipeline.run_question(&q.question, cfg) {
                    Ok(mut trace) => {
                        trace.qid = Some(q.qid.clone());
                        let score = QuestionScore {
                            qid: q.qid.clone(),
                            f1: f1_score(&trace.answer, &q.answer),
                            answer: trace.answer.clone(),
                            gold: q.answer.clone(),
                            generator_input_tokens: trace.generator_input_tokens,
                            calls: trace.call_count(),
                            error: None,
                        };
                        (score, Some(trace))
                    }
                    Err(e) => {
                        log::warn!("{} {} on {}: {e}", cfg.strategy, cfg.grid_label(), q.qid);
                        let score = QuestionScore {
                            qid: q.qid.clone(),
                            f1: S::zero(),
                            answer: String::new(),
                            gold: q.answer.clone(),
                            generator_input_tokens: 0,
                            calls: 0,
                            error: Some(e.to_string()),
                        };
                        (score, None)
                    }
                })
                .collect();
            let mut scores = Vec::with_capacity(runs.len());
            for (s, t) in runs {
                scores.push(s);
                traces.extend(t);
            }
            results.push(EvalResult::aggregate(*cfg, dataset.to_string(), scores, deps.exclude_failures));
        }
    }
    Ok(Experiment { results, traces })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    strategy: &'a str,
    chunk_size: usize,
    top_k: usize,
    dataset: &'a str,
    mean_f1: String,
    mean_gen_tokens: String,
    n: usize,
}

/// One row per result: strategy, chunk_size, top_k, dataset, mean_f1, mean_gen_tokens, n.
pub fn results_csv<S: Scalar>(results: &[EvalResult<S>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(CsvRow {
            strategy: r.config.strategy.as_str(),
            chunk_size: r.config.chunk_size,
            top_k: r.config.top_k,
            dataset: &r.dataset,
            mean_f1: format!("{:.2}", r.mean_f1.to_f64_lossy()),
            mean_gen_tokens: format!("{:.1}", r.mean_gen_tokens.to_f64_lossy()),
            n: r.n,
        })
        .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

/// Rows are grid points (`chunk*k`), columns are strategies grouped by dataset.
pub fn format_table<S: Scalar>(results: &[EvalResult<S>]) -> String {
    format_matrix(results, |r| format!("{:.2}", r.mean_f1.to_f64_lossy()))
}

/// Same layout as [`format_table`] with mean generator-input tokens.
pub fn format_token_table<S: Scalar>(results: &[EvalResult<S>]) -> String {
    format_matrix(results, |r| format!("{:.0}", r.mean_gen_tokens.to_f64_lossy()))
}

fn format_matrix<S: Scalar>(results: &[EvalResult<S>], cell: impl Fn(&EvalResult<S>) -> String) -> String {
    let mut rows: Vec<(usize, usize)> = Vec::new();
    let mut datasets: BTreeSet<&str> = BTreeSet::new();
    let mut strategies: BTreeSet<Strategy> = BTreeSet::new();
    let mut cells: BTreeMap<((usize, usize), &str, Strategy), String> = BTreeMap::new();
    for r in results {
        let point = (r.config.chunk_size, r.config.top_k);
        if !rows.contains(&point) {
            rows.push(point);
        }
        datasets.insert(&r.dataset);
        strategies.insert(r.config.strategy);
        cells.insert((point, r.dataset.as_str(), r.config.strategy), cell(r));
    }
    const W: usize = 8;
    let group = strategies.len() * W;
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "");
    for d in &datasets {
        let _ = write!(out, "|{d:^group$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<10}", "chunk*k");
    for _ in &datasets {
        out.push('|');
        for s in &strategies {
            let _ = write!(out, "{:>W$}", s.label());
        }
    }
    out.push('\n');
    for point in rows {
        let _ = write!(out, "{:<10}", format!("{}*{}", point.0, point.1));
        for d in &datasets {
            out.push('|');
            for s in &strategies {
                let v = cells.get(&(point, *d, *s)).map_or("-", String::as_str);
                let _ = write!(out, "{v:>W$}");
            }
        }
        out.push('\n');
    }
    out
}

//! Instruction-data construction for the extractor, the two filter stages
//! and the generator.
//!
//! Records are first pre-processed: questions with too little context are
//! dropped and a random subset of distractors is kept. Extractor and CoT data
//! go through a teacher call, a length check and a self-evaluation call;
//! filtering and task data are derived without new teacher calls.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, QaRecord};
use crate::cot_filter::parse_status;
use crate::extractor::PASSAGE_SEPARATOR;
use crate::gateway::{render, Gateway, Slots, TemplateName, TokenCounter};
use crate::text::stable_u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructKind {
    Extractor,
    CotGuiding,
    Filtering,
    TaskOriented,
}

impl InstructKind {
    pub const ALL: [InstructKind; 4] =
        [InstructKind::Extractor, InstructKind::CotGuiding, InstructKind::Filtering, InstructKind::TaskOriented];

    pub fn as_str(self) -> &'static str {
        match self {
            InstructKind::Extractor => "extractor",
            InstructKind::CotGuiding => "cot_guiding",
            InstructKind::Filtering => "filtering",
            InstructKind::TaskOriented => "task_oriented",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructRecord {
    pub kind: InstructKind,
    pub instruction: String,
    pub output: String,
    pub dataset: String,
    pub qid: String,
    /// Tokens of `instruction` followed by `output`; not written to files.
    #[serde(skip)]
    pub token_length: usize,
}

/// Lowercase alphanumerics of a dataset label, with the long 2Wiki name folded.
pub fn dataset_key(label: &str) -> String {
    let k: String = label.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect();
    match k.as_str() {
        "2wikimultihopqa" | "2wikimqa" | "2wiki" => "2wikimqa".to_string(),
        _ => k,
    }
}

fn lookup<T: Copy>(map: &BTreeMap<String, T>, dataset: &str) -> Option<T> {
    map.get(&dataset_key(dataset)).copied()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessPolicy {
    /// Minimum total paragraph tokens per question, keyed by [`dataset_key`].
    /// Datasets without an entry are not filtered.
    pub min_context_tokens: BTreeMap<String, usize>,
    /// Smallest number of distractors kept when at least that many exist.
    pub distractor_floor: usize,
    pub rng_seed: u64,
    /// Shuffle kept paragraphs instead of keeping record order.
    pub shuffle_content: bool,
}

impl Default for PreprocessPolicy {
    fn default() -> Self {
        let min_context_tokens =
            [("hotpotqa", 1500), ("2wikimqa", 1500), ("musique", 2500)].map(|(k, v)| (k.to_string(), v)).into();
        PreprocessPolicy { min_context_tokens, distractor_floor: 2, rng_seed: 0, shuffle_content: false }
    }
}

fn record_rng(seed: u64, tag: &str, qid: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_u64(&[&seed.to_string(), tag, qid]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub dataset: String,
    pub qid: String,
    /// The record kind that was discarded; `None` for the whole question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<InstructKind>,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    ShortContext { tokens: usize, threshold: usize },
    ShortOutput { tokens: usize },
    EvaluatorRejected { response: String },
    OverCap { tokens: usize, cap: usize },
    Gateway { message: String },
    OverTarget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Preprocessed {
    pub kept: Vec<QaRecord>,
    pub dropped: Vec<Dropped>,
}

/// Drops short-context questions and samples distractors.
///
/// Supporting paragraphs are always kept. For `n` distractors the kept count
/// is uniform in `[floor, n]` (all of them when `n <= floor`), chosen without
/// replacement with a generator seeded from `rng_seed` and the question id.
pub fn preprocess(
    records: &[QaRecord],
    corpus: &Corpus,
    policy: &PreprocessPolicy,
    counter: &dyn TokenCounter,
) -> Result<Preprocessed, CorpusError> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for rec in records {
        let mut total = 0;
        for c in &rec.context {
            total += counter.count(&corpus.resolve(&c.id)?.text);
        }
        if let Some(threshold) = lookup(&policy.min_context_tokens, &rec.dataset) {
            if total < threshold {
                dropped.push(Dropped {
                    dataset: rec.dataset.clone(),
                    qid: rec.qid.clone(),
                    kind: None,
                    reason: DropReason::ShortContext { tokens: total, threshold },
                });
                continue;
            }
        }
        let mut rng = record_rng(policy.rng_seed, "distractors", &rec.qid);
        let distractors: Vec<usize> = (0..rec.context.len()).filter(|&i| !rec.context[i].supporting).collect();
        let n = distractors.len();
        let chosen: BTreeSet<usize> = if n <= policy.distractor_floor {
            distractors.into_iter().collect()
        } else {
            let count = rng.gen_range(policy.distractor_floor..=n);
            rand::seq::index::sample(&mut rng, n, count).into_iter().map(|i| distractors[i]).collect()
        };
        let mut context: Vec<_> = rec
            .context
            .iter()
            .enumerate()
            .filter(|(i, c)| c.supporting || chosen.contains(i))
            .map(|(_, c)| c.clone())
            .collect();
        if policy.shuffle_content {
            context.shuffle(&mut rng);
        }
        kept.push(QaRecord { context, ..rec.clone() });
    }
    Ok(Preprocessed { kept, dropped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub extractor: usize,
    pub cot_guiding: usize,
    /// Per label, so the filtering set holds twice this many records.
    pub filtering_per_label: usize,
    pub task_oriented: usize,
}

impl Targets {
    pub const MULTI_HOP: Targets =
        Targets { extractor: 200, cot_guiding: 200, filtering_per_label: 100, task_oriented: 200 };
    pub const LONG_DOCUMENT: Targets =
        Targets { extractor: 100, cot_guiding: 100, filtering_per_label: 0, task_oriented: 0 };

    fn get(&self, kind: InstructKind) -> usize {
        match kind {
            InstructKind::Extractor => self.extractor,
            InstructKind::CotGuiding => self.cot_guiding,
            InstructKind::Filtering => 2 * self.filtering_per_label,
            InstructKind::TaskOriented => self.task_oriented,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildPolicy {
    pub preprocess: PreprocessPolicy,
    /// Teacher outputs shorter than this many tokens are discarded.
    pub min_output_tokens: usize,
    /// Records must stay below this many tokens; keyed by [`dataset_key`].
    pub max_record_tokens: BTreeMap<String, usize>,
    pub targets: BTreeMap<String, Targets>,
    /// Used for datasets missing from `targets`.
    pub default_targets: Targets,
}

impl Default for BuildPolicy {
    fn default() -> Self {
        let caps = ["hotpotqa", "2wikimqa", "musique"].map(|k| (k.to_string(), 7000)).into();
        let targets = [("qasper".to_string(), Targets::LONG_DOCUMENT)].into();
        BuildPolicy {
            preprocess: PreprocessPolicy::default(),
            min_output_tokens: 20,
            max_record_tokens: caps,
            targets,
            default_targets: Targets::MULTI_HOP,
        }
    }
}

impl BuildPolicy {
    pub fn targets_for(&self, dataset: &str) -> Targets {
        self.targets.get(&dataset_key(dataset)).copied().unwrap_or(self.default_targets)
    }
}

/// Outcome of building one candidate record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Built {
    Accepted(InstructRecord),
    Rejected(DropReason),
}

/// Teacher output plus the instruction record it produced, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CotBuilt {
    pub built: Built,
    /// The guiding CoT when it passed both checks.
    pub cot: Option<String>,
}

pub struct InstructBuilder<'a> {
    corpus: &'a Corpus,
    teacher: &'a Gateway,
    evaluator: &'a Gateway,
    counter: &'a dyn TokenCounter,
    policy: BuildPolicy,
}

impl<'a> InstructBuilder<'a> {
    /// `evaluator` may be the same gateway as `teacher`.
    pub fn new(
        corpus: &'a Corpus,
        teacher: &'a Gateway,
        evaluator: &'a Gateway,
        counter: &'a dyn TokenCounter,
    ) -> Self {
        InstructBuilder { corpus, teacher, evaluator, counter, policy: BuildPolicy::default() }
    }

    pub fn with_policy(mut self, policy: BuildPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn policy(&self) -> &BuildPolicy {
        &self.policy
    }

    fn texts(&self, rec: &QaRecord, supporting_only: bool) -> Result<String, CorpusError> {
        let mut texts = Vec::new();
        for c in rec.context.iter().filter(|c| c.supporting || !supporting_only) {
            texts.push(self.corpus.resolve(&c.id)?.text.as_str());
        }
        Ok(texts.join(PASSAGE_SEPARATOR))
    }

    fn finish(&self, kind: InstructKind, rec: &QaRecord, instruction: String, output: String) -> Built {
        let token_length = self.counter.count(&format!("{instruction}{output}"));
        if let Some(cap) = lookup(&self.policy.max_record_tokens, &rec.dataset) {
            if token_length >= cap {
                return Built::Rejected(DropReason::OverCap { tokens: token_length, cap });
            }
        }
        Built::Accepted(InstructRecord {
            kind,
            instruction,
            output,
            dataset: rec.dataset.clone(),
            qid: rec.qid.clone(),
            token_length,
        })
    }

    /// Runs a teacher prompt and its self-evaluation; `Ok(text)` when both pass.
    fn teach(
        &self,
        step1: TemplateName,
        step1_slots: Slots,
        step2: TemplateName,
        step2_slots: impl FnOnce(&str) -> Slots,
    ) -> Result<String, DropReason> {
        let gateway_err = |e: crate::gateway::GatewayError| DropReason::Gateway { message: e.to_string() };
        let call = self.teacher.call(step1, &step1_slots).map_err(gateway_err)?;
        let text = call.response.trim().to_string();
        let tokens = self.counter.count(&text);
        if tokens < self.policy.min_output_tokens {
            return Err(DropReason::ShortOutput { tokens });
        }
        let verdict = self.evaluator.call(step2, &step2_slots(&text)).map_err(gateway_err)?;
        if parse_status(&verdict.response).label != Some(true) {
            return Err(DropReason::EvaluatorRejected { response: verdict.response });
        }
        Ok(text)
    }

    pub fn build_extractor_data(&self, rec: &QaRecord) -> Result<Built, CorpusError> {
        let supporting = self.texts(rec, true)?;
        let step1 = Slots::new().with("content", supporting).with("question", rec.question.as_str());
        let taught = self.teach(TemplateName::ExtractorData, step1, TemplateName::ExtractorEval, |info| {
            Slots::new()
                .with("question", rec.question.as_str())
                .with("global_information", info)
                .with("answer", rec.answer.as_str())
        });
        Ok(match taught {
            Err(reason) => Built::Rejected(reason),
            Ok(info) => {
                let slots =
                    Slots::new().with("content", self.texts(rec, false)?).with("question", rec.question.as_str());
                self.finish(InstructKind::Extractor, rec, render_ok(TemplateName::Extractor, &slots), info)
            }
        })
    }

    pub fn build_cot_data(&self, rec: &QaRecord) -> Result<CotBuilt, CorpusError> {
        let supporting = self.texts(rec, true)?;
        let step1 = Slots::new()
            .with("content", supporting)
            .with("question", rec.question.as_str())
            .with("answer", rec.answer.as_str());
        let taught = self.teach(TemplateName::CotData, step1, TemplateName::CotEval, |cot| {
            Slots::new().with("question", rec.question.as_str()).with("cot", cot).with("answer", rec.answer.as_str())
        });
        Ok(match taught {
            Err(reason) => CotBuilt { built: Built::Rejected(reason), cot: None },
            Ok(cot) => {
                let slots =
                    Slots::new().with("content", self.texts(rec, false)?).with("question", rec.question.as_str());
                let built = self.finish(
                    InstructKind::CotGuiding,
                    rec,
                    render_ok(TemplateName::CotGuidance, &slots),
                    cot.clone(),
                );
                CotBuilt { built, cot: Some(cot) }
            }
        })
    }

    pub fn build_task_data(&self, rec: &QaRecord) -> Result<Built, CorpusError> {
        let slots = Slots::new().with("content", self.texts(rec, false)?).with("question", rec.question.as_str());
        Ok(self.finish(InstructKind::TaskOriented, rec, render_ok(TemplateName::Generator, &slots), rec.answer.clone()))
    }

    /// One candidate per (question, kept paragraph) for questions with a CoT,
    /// labelled by the supporting flag, then balanced per dataset.
    ///
    /// Each label keeps `min(per_label, |true|, |false|)` candidates drawn
    /// without replacement; the result is sorted by (dataset, qid, paragraph).
    pub fn build_filter_data(
        &self,
        recs: &[QaRecord],
        cots: &BTreeMap<String, String>,
    ) -> Result<(Vec<InstructRecord>, Vec<Dropped>), CorpusError> {
        type Pool = Vec<(String, usize, InstructRecord)>;
        let mut pools: BTreeMap<String, [Pool; 2]> = BTreeMap::new();
        let mut dropped = Vec::new();
        for rec in recs {
            let Some(cot) = cots.get(&rec.qid) else { continue };
            for (pos, c) in rec.context.iter().enumerate() {
                let text = &self.corpus.resolve(&c.id)?.text;
                let slots = Slots::new()
                    .with("content", text.as_str())
                    .with("question", rec.question.as_str())
                    .with("cot", cot.as_str());
                let output = status_output(c.supporting);
                match self.finish(InstructKind::Filtering, rec, render_ok(TemplateName::ChunkFilter, &slots), output) {
                    Built::Accepted(r) => pools.entry(rec.dataset.clone()).or_default()[usize::from(c.supporting)]
                        .push((rec.qid.clone(), pos, r)),
                    Built::Rejected(reason) => dropped.push(Dropped {
                        dataset: rec.dataset.clone(),
                        qid: rec.qid.clone(),
                        kind: Some(InstructKind::Filtering),
                        reason,
                    }),
                }
            }
        }

        let mut out = Vec::new();
        for (dataset, [negatives, positives]) in pools {
            let per_label = self.policy.targets_for(&dataset).filtering_per_label;
            let n = per_label.min(positives.len()).min(negatives.len());
            let mut rng = record_rng(self.policy.preprocess.rng_seed, "filter-balance", &dataset);
            let mut picked: Vec<(String, usize, InstructRecord)> = Vec::with_capacity(2 * n);
            for pool in [positives, negatives] {
                let mut idx = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
                idx.sort_unstable();
                let mut pool: Vec<Option<_>> = pool.into_iter().map(Some).collect();
                picked.extend(idx.into_iter().map(|i| pool[i].take().expect("indices are distinct")));
            }
            picked.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
            out.extend(picked.into_iter().map(|(_, _, r)| r));
        }
        Ok((out, dropped))
    }

    /// Full run: pre-processing, all four builders, caps and targets.
    pub fn run(&self, records: &[QaRecord]) -> Result<InstructRun, CorpusError> {
        let pre = preprocess(records, self.corpus, &self.policy.preprocess, self.counter)?;
        let mut kept = pre.kept;
        kept.sort_by(|a, b| (&a.dataset, &a.qid).cmp(&(&b.dataset, &b.qid)));

        let mut report = InstructReport::default();
        for r in records {
            report.dataset(&r.dataset).input += 1;
        }
        for r in &kept {
            report.dataset(&r.dataset).preprocessed += 1;
        }
        let mut dropped = pre.dropped;

        let built: Vec<(Built, CotBuilt, Built)> = kept
            .par_iter()
            .map(|rec| Ok((self.build_extractor_data(rec)?, self.build_cot_data(rec)?, self.build_task_data(rec)?)))
            .collect::<Result<_, CorpusError>>()?;

        let mut accepted: Vec<InstructRecord> = Vec::new();
        let mut cots = BTreeMap::new();
        for (rec, (ext, cot, task)) in kept.iter().zip(built) {
            if let Some(text) = cot.cot {
                cots.insert(rec.qid.clone(), text);
            }
            let kinds = [InstructKind::Extractor, InstructKind::CotGuiding, InstructKind::TaskOriented];
            for (kind, b) in kinds.into_iter().zip([ext, cot.built, task]) {
                match b {
                    Built::Accepted(r) => accepted.push(r),
                    Built::Rejected(reason) => dropped.push(Dropped {
                        dataset: rec.dataset.clone(),
                        qid: rec.qid.clone(),
                        kind: Some(kind),
                        reason,
                    }),
                }
            }
        }
        let (filtering, filter_dropped) = self.build_filter_data(&kept, &cots)?;
        dropped.extend(filter_dropped);
        accepted.extend(filtering);

        accepted.sort_by(|a, b| (&a.dataset, &a.qid, a.kind).cmp(&(&b.dataset, &b.qid, b.kind)));
        let mut taken: BTreeMap<(String, InstructKind), usize> = BTreeMap::new();
        let mut records_out = Vec::new();
        for r in accepted {
            let target = self.policy.targets_for(&r.dataset).get(r.kind);
            let n = taken.entry((r.dataset.clone(), r.kind)).or_default();
            if *n < target {
                *n += 1;
                records_out.push(r);
            } else if r.kind != InstructKind::Filtering {
                dropped.push(Dropped {
                    dataset: r.dataset.clone(),
                    qid: r.qid.clone(),
                    kind: Some(r.kind),
                    reason: DropReason::OverTarget,
                });
            }
        }

        for r in &records_out {
            *report.dataset(&r.dataset).emitted.entry(r.kind).or_default() += 1;
        }
        for d in &dropped {
            *report.dataset(&d.dataset).drops.entry(reason_label(&d.reason).to_string()).or_default() += 1;
        }
        dropped.sort_by(|a, b| (&a.dataset, &a.qid, a.kind).cmp(&(&b.dataset, &b.qid, b.kind)));
        Ok(InstructRun { records: records_out, dropped, report })
    }
}

fn render_ok(name: TemplateName, slots: &Slots) -> String {
    render(name, slots).expect("builder slots match the template")
}

/// `{"status": {"True"}}` or `{"status": {"False"}}`.
pub fn status_output(label: bool) -> String {
    format!("{{\"status\": {{\"{}\"}}}}", if label { "True" } else { "False" })
}

fn reason_label(r: &DropReason) -> &'static str {
    match r {
        DropReason::ShortContext { .. } => "short_context",
        DropReason::ShortOutput { .. } => "short_output",
        DropReason::EvaluatorRejected { .. } => "evaluator_rejected",
        DropReason::OverCap { .. } => "over_cap",
        DropReason::Gateway { .. } => "gateway_error",
        DropReason::OverTarget => "over_target",
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub input: usize,
    pub preprocessed: usize,
    pub emitted: BTreeMap<InstructKind, usize>,
    pub drops: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructReport {
    pub datasets: BTreeMap<String, DatasetStats>,
}

impl InstructReport {
    fn dataset(&mut self, name: &str) -> &mut DatasetStats {
        self.datasets.entry(name.to_string()).or_default()
    }

    /// Counts per kind with one column per dataset.
    pub fn render_table(&self) -> String {
        let names: Vec<&String> = self.datasets.keys().collect();
        let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<36}", "");
        for n in &names {
            let _ = write!(out, " {n:>width$}");
        }
        out.push('\n');
        let rows: [(&str, Option<InstructKind>); 5] = [
            ("Num of long-context extractor data", Some(InstructKind::Extractor)),
            ("Num of CoT-guiding data", Some(InstructKind::CotGuiding)),
            ("Num of filtering data", Some(InstructKind::Filtering)),
            ("Num of task-oriented data", Some(InstructKind::TaskOriented)),
            ("Num of samples", None),
        ];
        for (label, kind) in rows {
            let _ = write!(out, "{label:<36}");
            for n in &names {
                let s = &self.datasets[*n];
                let v = match kind {
                    Some(k) => s.emitted.get(&k).copied().unwrap_or(0),
                    None => s.emitted.values().sum(),
                };
                let _ = write!(out, " {v:>width$}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructRun {
    /// Sorted by (dataset, qid, kind).
    pub records: Vec<InstructRecord>,
    pub dropped: Vec<Dropped>,
    pub report: InstructReport,
}

pub fn write_instruct_jsonl<W: Write>(records: &[InstructRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_instruct_jsonl<R: BufRead>(input: R) -> Result<Vec<InstructRecord>, serde_json::Error> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(serde_json::Error::io)?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

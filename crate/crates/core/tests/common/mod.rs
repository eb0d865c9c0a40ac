//! Fixtures, scripted backends and reference implementations shared by the
//! integration tests and the acceptance run.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use ragkit::chunker::{chunk_paragraph, split_sentences, Chunk, ChunkId, ChunkPolicy};
use ragkit::corpus::{
    ingest_dataset, parse_records, ContextParagraph, Corpus, IngestFormat, Ingested, Paragraph, ParagraphId, QaRecord,
};
use ragkit::cot_filter::{filter_chunks, parse_status, verdict_slots, FilterOptions, GuidingCot, ParseStatus};
use ragkit::evalkit::f1_score;
use ragkit::extractor::{map_chunks, MappingOptions};
use ragkit::gateway::{
    ApproxTokenCounter, BackendError, CallRequest, ChatBackend, Gateway, GenerationParams, LlmCall, MockBackend,
    MockScript, TemplateName,
};
use ragkit::instruct::{write_instruct_jsonl, BuildPolicy, InstructBuilder, InstructKind, InstructRun};
use ragkit::orchestrator::{Pipeline, Strategy, StrategyConfig};
use ragkit::retriever::{build_index, BagOfWordsEmbedder, BuildOptions, Hit, LexicalOverlapScorer, RetrievalResult};
use ragkit::text::stable_u64;
use ragkit::{Hits, Index};

pub type Check = Result<String, String>;

pub fn tests_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests"))
}

pub fn fixture(name: &str) -> PathBuf {
    tests_dir().join("fixtures").join(name)
}

pub fn golden(name: &str) -> PathBuf {
    tests_dir().join("golden").join(name)
}

pub fn read(path: &PathBuf) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn update_goldens() -> bool {
    std::env::var("UPDATE_GOLDENS").is_ok_and(|v| v == "1")
}

/// Compares `actual` with a committed file, rewriting it under `UPDATE_GOLDENS=1`.
pub fn matches_reference(path: &PathBuf, actual: &str) -> bool {
    if update_goldens() {
        std::fs::write(path, actual).unwrap();
        return true;
    }
    read(path) == actual
}

pub fn ingest_fixture(name: &str) -> Ingested {
    let raw = parse_records(BufReader::new(File::open(fixture(name)).unwrap()), IngestFormat::Jsonl).unwrap();
    ingest_dataset(&raw).unwrap()
}

pub fn chunk(parent: &ParagraphId, seq: usize, text: &str) -> Chunk {
    let words = text.split_whitespace().count();
    Chunk {
        id: ChunkId::new(parent, seq),
        parent_id: parent.clone(),
        seq,
        text: text.to_string(),
        word_count: words,
        sentences: 0..1,
        body_start: 0,
        body_words: words,
        oversized: false,
        merged_tail: false,
    }
}

pub fn hits_of(question: &str, hits: Vec<Hit<f32>>) -> Hits {
    let k = hits.len();
    RetrievalResult { question: question.to_string(), hits, k }
}

// ---------------------------------------------------------------- backends

fn filled(n: usize) -> String {
    let mut s = "evidence ".repeat(n / 9 + 1);
    s.truncate(n);
    if s.ends_with(' ') {
        s.pop();
        s.push('.');
    }
    s
}

fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// Answers the construction prompts, steered by markers in the question:
/// `[ext-bytes=N]`, `[short-ext]`, `[reject-ext]`, `[short-cot]`, `[reject-cot]`.
#[derive(Debug, Default)]
pub struct Teacher {
    /// The evaluator answers False to everything.
    pub reject_all: bool,
}

impl ChatBackend for Teacher {
    fn chat(&self, req: &CallRequest<'_>, _params: &GenerationParams) -> Result<String, BackendError> {
        let q = req.slots.get("question").unwrap_or("");
        let content = req.slots.get("content").unwrap_or("");
        let answer = req.slots.get("answer").unwrap_or("");
        let bytes = Regex::new(r"\[ext-bytes=(\d+)\]").unwrap().captures(q).map(|c| c[1].parse::<usize>().unwrap());
        let reply = match req.template {
            TemplateName::ExtractorData => match bytes {
                Some(n) => filled(n),
                None if q.contains("[short-ext]") => "Too short.".to_string(),
                None => format!("Cited: {}", first_words(content, 40)),
            },
            TemplateName::ExtractorEval if self.reject_all || q.contains("[reject-ext]") => {
                r#"{"status": "False"}"#.to_string()
            }
            TemplateName::ExtractorEval => "status: True".to_string(),
            TemplateName::CotData if q.contains("[short-cot]") => "Because.".to_string(),
            TemplateName::CotData => format!("{} Therefore the answer is {answer}.", first_words(content, 25)),
            TemplateName::CotEval if self.reject_all || q.contains("[reject-cot]") => "status: False".to_string(),
            TemplateName::CotEval => r#"{"status": {"True"}}"#.to_string(),
            other => return Err(BackendError::Other(format!("teacher has no answer for {other}"))),
        };
        Ok(reply)
    }

    fn name(&self) -> &str {
        "teacher"
    }
}

/// Runtime prompts for the token-trend corpus: a short extractor output and
/// verdicts that keep roughly half of the chunks.
#[derive(Debug, Default)]
pub struct TrendBackend;

impl ChatBackend for TrendBackend {
    fn chat(&self, req: &CallRequest<'_>, _params: &GenerationParams) -> Result<String, BackendError> {
        let content = req.slots.get("content").unwrap_or("");
        Ok(match req.template {
            TemplateName::Extractor => {
                "The relevant passage names the topic, the place it was recorded and the year of the record.".into()
            }
            TemplateName::CotGuidance => "Find the passage that names the topic and read its first sentence.".into(),
            TemplateName::ChunkFilter if stable_u64(&[content]).is_multiple_of(2) => r#"{"status": "True"}"#.into(),
            TemplateName::ChunkFilter => r#"{"status": "False"}"#.into(),
            TemplateName::Generator => "topic".into(),
            other => return Err(BackendError::Other(format!("no answer for {other}"))),
        })
    }

    fn name(&self) -> &str {
        "trend"
    }
}

pub fn wildcard_script() -> MockScript {
    let mut s = MockScript::new();
    s.insert_any(TemplateName::Extractor, "Global information about the question.")
        .insert_any(TemplateName::CotGuidance, "Look for the paragraph that names the topic.")
        .insert_any(TemplateName::ChunkFilter, r#"{"status": "True"}"#)
        .insert_any(TemplateName::Generator, "topic");
    s
}

// ---------------------------------------------------------------- synthetic corpus

const VOCAB: &[&str] = &[
    "river",
    "castle",
    "engineer",
    "novel",
    "railway",
    "harbor",
    "empire",
    "senator",
    "village",
    "museum",
    "treaty",
    "orchestra",
    "bridge",
    "island",
    "painter",
    "valley",
    "fortress",
    "merchant",
    "cathedral",
    "academy",
    "poet",
    "chemist",
    "opera",
    "frontier",
    "garrison",
    "monastery",
    "physician",
    "observatory",
    "parliament",
    "lighthouse",
];

/// `n` paragraphs of about `words` words in 20-word sentences, one question per paragraph.
pub fn synthetic_corpus(n: usize, words: usize, seed: u64) -> (Corpus, Vec<QaRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paragraphs = Vec::with_capacity(n);
    for i in 0..n {
        let mut sentences = Vec::new();
        let mut total = 0;
        while total < words {
            let mut s: Vec<String> = (0..19).map(|_| VOCAB.choose(&mut rng).unwrap().to_string()).collect();
            s.insert(rng.gen_range(0..19), format!("topic{i}"));
            s[0] = capitalize(&s[0]);
            sentences.push(format!("{}.", s.join(" ")));
            total += 20;
        }
        paragraphs.push(Paragraph::new(sentences.join(" "), Some(format!("Topic {i}")), "synthetic"));
    }
    let records = paragraphs
        .iter()
        .enumerate()
        .map(|(i, p)| QaRecord {
            qid: format!("syn-{i:03}"),
            question: format!("What does the record say about topic{i} and the {}?", VOCAB[i % VOCAB.len()]),
            answer: format!("topic{i}"),
            dataset: "synthetic".to_string(),
            context: vec![ContextParagraph { id: p.id.clone(), supporting: true }],
        })
        .collect();
    (Corpus::from_paragraphs(paragraphs).unwrap(), records)
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

pub fn synthetic_index(corpus: &Corpus, chunk_size: usize) -> Index {
    let chunks = ragkit::chunker::chunk_corpus(corpus, &ChunkPolicy::with_size(chunk_size));
    build_index(chunks, Arc::new(BagOfWordsEmbedder::new(256)), BuildOptions::default()).unwrap()
}

// ---------------------------------------------------------------- reference implementations

/// Sentence spans found with a regex over terminator + whitespace.
pub fn regex_sentences(text: &str) -> Vec<String> {
    const ABBR: &[&str] = &[
        "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "mt", "vs", "e.g", "i.e", "inc", "ltd", "co", "corp", "fig",
        "approx", "dept", "u.s", "u.k", "jan", "feb", "mar", "apr", "aug", "sept", "oct", "nov", "dec",
    ];
    let boundary = Regex::new(r"[.!?;]\s").unwrap();
    let mut out = Vec::new();
    let mut start = 0;
    for m in boundary.find_iter(text) {
        let end = m.start() + 1;
        let piece = text[start..end].trim_start();
        if piece.is_empty() {
            continue;
        }
        if text[m.start()..].starts_with('.') {
            let body = &piece[..piece.len() - 1];
            let last = body.split_whitespace().last().unwrap_or("");
            let last = last.trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            if ABBR.contains(&last.as_str()) {
                continue;
            }
        }
        out.push(piece.to_string());
        start = end;
    }
    let rest = text[start..].trim();
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

/// Chunk bodies from greedy sentence packing, then tail merging:
/// `(first body sentence, end sentence, body words, words with overlap)`.
pub fn greedy_chunks(text: &str, policy: &ChunkPolicy) -> Vec<(usize, usize, usize, usize)> {
    let sentences = regex_sentences(text);
    let words: Vec<usize> = sentences.iter().map(|s| s.split_whitespace().count()).collect();
    let mut bodies: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0;
    for (i, w) in words.iter().enumerate() {
        if !current.is_empty() && used + w > policy.chunk_size {
            bodies.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(i);
        used += w;
    }
    if !current.is_empty() {
        bodies.push(current);
    }
    let sum = |b: &[usize]| b.iter().map(|&i| words[i]).sum::<usize>();
    if bodies.len() >= 2 && sum(bodies.last().unwrap()) < policy.min_tail_words {
        let tail = bodies.pop().unwrap();
        bodies.last_mut().unwrap().extend(tail);
    }
    bodies
        .iter()
        .enumerate()
        .map(|(seq, b)| {
            let start = b[0];
            let end = b[b.len() - 1] + 1;
            let first = if seq == 0 { start } else { start - policy.overlap_sentences.min(start) };
            (start, end, sum(b), (first..end).map(|i| words[i]).sum())
        })
        .collect()
}

/// Groups hits by parent and keeps the best fine score (lower seq on ties),
/// ordered by where that best hit sits in the list.
pub fn mapping_oracle(hits: &Hits) -> Vec<(ParagraphId, ChunkId)> {
    let mut groups: BTreeMap<ParagraphId, Vec<(usize, &Hit<f32>)>> = BTreeMap::new();
    for (rank, h) in hits.hits.iter().enumerate() {
        groups.entry(h.chunk.parent_id.clone()).or_default().push((rank, h));
    }
    let mut best: Vec<(usize, ParagraphId, ChunkId)> = groups
        .into_iter()
        .map(|(parent, mut members)| {
            members.sort_by(|a, b| {
                b.1.fine_score.partial_cmp(&a.1.fine_score).unwrap().then(a.1.chunk.seq.cmp(&b.1.chunk.seq))
            });
            let (rank, h) = members[0];
            (rank, parent, h.chunk.id.clone())
        })
        .collect();
    best.sort_by_key(|b| b.0);
    best.into_iter().map(|(_, p, c)| (p, c)).collect()
}

/// SQuAD-style F1 written with regexes.
pub fn f1_reference(prediction: &str, gold: &str) -> f64 {
    fn norm(s: &str) -> Vec<String> {
        let lower = s.to_lowercase();
        let no_punct = Regex::new(r##"[!"#$%&'()*+,\-./:;<=>?@\[\\\]^_`{|}~]"##).unwrap().replace_all(&lower, "");
        let no_articles = Regex::new(r"\b(a|an|the)\b").unwrap().replace_all(&no_punct, " ");
        no_articles.split_whitespace().map(str::to_string).collect()
    }
    let p = norm(prediction);
    let g = norm(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return 0.0;
    }
    let precision = same as f64 / p.len() as f64;
    let recall = same as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Malformed and well-formed verdict bodies with the expected label and parse status.
pub const VERDICT_TABLE: [(&str, Option<bool>, ParseStatus); 12] = [
    ("status=True", Some(true), ParseStatus::Repaired),
    ("{'status': 'False'}", Some(false), ParseStatus::Repaired),
    (r#"{"status": "true"}"#, Some(true), ParseStatus::Clean),
    (r#"{"status": {"False"}}"#, Some(false), ParseStatus::Clean),
    (r#"The answer: {"status": True}"#, Some(true), ParseStatus::Repaired),
    ("STATUS: FALSE", Some(false), ParseStatus::Repaired),
    ("```json\n{\"status\": \"True\"}\n```", Some(true), ParseStatus::Repaired),
    ("True", Some(true), ParseStatus::Repaired),
    ("I cannot decide.", None, ParseStatus::Defaulted),
    ("", None, ParseStatus::Defaulted),
    ("status: maybe; true or false", None, ParseStatus::Defaulted),
    (r#"{"status": "False"} because the article is unrelated"#, Some(false), ParseStatus::Repaired),
];

// ---------------------------------------------------------------- acceptance checks

pub fn check_prompt_fidelity() -> Check {
    let mut bad = Vec::new();
    for t in TemplateName::ALL {
        let expected = std::fs::read(golden(&format!("prompts/{}.txt", t.as_str()))).map_err(|e| e.to_string())?;
        if t.template().body.as_bytes() != expected.as_slice() {
            bad.push(t.as_str());
        }
    }
    if bad.is_empty() {
        Ok(format!("{} templates byte-equal", TemplateName::ALL.len()))
    } else {
        Err(format!("differs: {}", bad.join(", ")))
    }
}

pub fn mapping_fixture(rng: &mut ChaCha8Rng, corpus: &Corpus) -> Hits {
    let k = rng.gen_range(1..=12);
    let parents = &corpus.paragraphs()[..8];
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut hits = Vec::new();
    while hits.len() < k {
        let p = rng.gen_range(0..parents.len());
        let seq = rng.gen_range(0..6);
        if !used.insert((p, seq)) {
            continue;
        }
        let fine = rng.gen_range(1..=5) as f32 / 10.0;
        let coarse = rng.gen_range(0..100) as f32 / 100.0;
        let c = chunk(&parents[p].id, seq, &format!("chunk {seq} of paragraph {p}"));
        hits.push(Hit { chunk: c, coarse_score: coarse, fine_score: fine });
    }
    hits.sort_by(|a, b| b.fine_score.partial_cmp(&a.fine_score).unwrap().then(a.chunk.id.cmp(&b.chunk.id)));
    hits_of("q", hits)
}

pub fn small_corpus(n: usize) -> Corpus {
    Corpus::from_paragraphs(
        (0..n).map(|i| Paragraph::new(format!("Paragraph {i} is about subject {i}."), None, "fixture")).collect(),
    )
    .unwrap()
}

pub fn check_mapping() -> Check {
    let corpus = small_corpus(8);
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let started = Instant::now();
    let mut mismatches = 0;
    let mut over_k = 0;
    for _ in 0..200 {
        let hits = mapping_fixture(&mut rng, &corpus);
        let mapped = map_chunks(&hits, &corpus, MappingOptions::default()).map_err(|e| e.to_string())?;
        let got: Vec<(ParagraphId, ChunkId)> =
            mapped.paragraphs.iter().map(|p| (p.clone(), mapped.origin[p].chunk_id.clone())).collect();
        if got != mapping_oracle(&hits) {
            mismatches += 1;
        }
        if mapped.len() > hits.len() {
            over_k += 1;
        }
    }
    let elapsed = started.elapsed();
    let msg = format!("200 fixtures, {mismatches} mismatches, {over_k} k'>k, {elapsed:.2?}");
    if mismatches == 0 && over_k == 0 && elapsed.as_secs_f64() < 5.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn dummy_call(template: TemplateName, text: &str) -> LlmCall {
    LlmCall {
        template,
        prompt: String::new(),
        response: text.to_string(),
        prompt_tokens: 0,
        response_tokens: 0,
        attempts: 1,
        latency: Default::default(),
    }
}

pub fn guiding_cot(text: &str) -> GuidingCot {
    GuidingCot { text: text.to_string(), call: dummy_call(TemplateName::CotGuidance, text) }
}

pub fn check_filter_semantics() -> Check {
    const TRUE_BODIES: [&str; 3] = [r#"{"status": "True"}"#, r#"{"status": {"True"}}"#, "status: true"];
    const FALSE_BODIES: [&str; 3] = [r#"{"status": "False"}"#, r#"{"status": {"False"}}"#, "status=False"];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cot = guiding_cot("Chunk about the bridge matters.");
    let parent = ParagraphId::for_text("filter fixture parent");
    let mut fixtures = 0;
    for f in 0..50 {
        let k = rng.gen_range(1..=12);
        let labels: Vec<bool> = (0..k).map(|_| rng.gen_bool(0.4)).collect();
        let hits = hits_of(
            "Which bridge?",
            (0..k)
                .map(|i| Hit {
                    chunk: chunk(&parent, i, &format!("Fixture {f} chunk {i} text.")),
                    coarse_score: 0.0,
                    fine_score: 1.0 - i as f32 / 100.0,
                })
                .collect(),
        );
        let mut script = MockScript::new();
        for (h, &label) in hits.hits.iter().zip(&labels) {
            let body = if label { TRUE_BODIES.choose(&mut rng) } else { FALSE_BODIES.choose(&mut rng) }.unwrap();
            script.insert(TemplateName::ChunkFilter, &verdict_slots(&hits.question, &h.chunk.text, &cot.text), *body);
        }
        let gateway = Gateway::mock(script);
        let out = filter_chunks(&hits.question, &hits, &cot, &gateway, FilterOptions::default())
            .map_err(|e| e.to_string())?;
        let expected: Vec<ChunkId> =
            hits.hits.iter().zip(&labels).filter(|(_, &l)| l).map(|(h, _)| h.chunk.id.clone()).collect();
        if out.detail.chunks != expected || out.detail.fallback_applied {
            return Err(format!("fixture {f}: kept {:?}, expected {:?}", out.detail.chunks, expected));
        }
        let mut detail = out.detail.clone();
        detail.apply_fallback(&hits);
        let after: Vec<ChunkId> =
            if expected.is_empty() { hits.hits.iter().map(|h| h.chunk.id.clone()).collect() } else { expected };
        if detail.chunks != after || detail.fallback_applied != labels.iter().all(|l| !l) {
            return Err(format!("fixture {f}: fallback mismatch"));
        }
        fixtures += 1;
    }
    let mut passed = 0;
    for (raw, label, status) in VERDICT_TABLE {
        let parsed = parse_status(raw);
        if parsed.label == label && parsed.status == status {
            passed += 1;
        }
    }
    let msg = format!("{fixtures}/50 set-builder fixtures, parser table {passed}/12");
    if passed == 12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn check_call_budgets() -> Check {
    let (corpus, records) = synthetic_corpus(20, 1000, 11);
    let index = synthetic_index(&corpus, 200);
    let mut lines = Vec::new();
    for k in [3, 5, 7, 12] {
        for strategy in Strategy::ALL {
            let backend = Arc::new(MockBackend::new(wildcard_script()));
            let gateway = Gateway::new(backend.clone() as Arc<dyn ChatBackend>);
            let pipeline = Pipeline::new(&corpus, &index, 200, Arc::new(LexicalOverlapScorer), &gateway);
            let trace = pipeline
                .run_question(&records[k].question, &StrategyConfig::new(strategy, 200, k))
                .map_err(|e| format!("{strategy} k={k}: {e}"))?;
            let budget = strategy.call_budget(k);
            let expected = match strategy {
                Strategy::RB | Strategy::RL => 1,
                Strategy::EXT => 2,
                Strategy::FIL => k + 2,
                Strategy::EF => k + 3,
            };
            let logged = backend.call_log().len();
            if budget != expected || trace.call_count() != expected || logged != expected {
                return Err(format!(
                    "{strategy} k={k}: budget {budget}, trace {}, backend {logged}, expected {expected}",
                    trace.call_count()
                ));
            }
        }
        lines.push(format!("k={k}"));
    }
    Ok(format!("exact counts for {} x 5 strategies", lines.join(",")))
}

/// Mean generator-input tokens per strategy on the synthetic corpus.
pub fn token_means(k: usize) -> Result<BTreeMap<Strategy, f64>, String> {
    let (corpus, records) = synthetic_corpus(24, 1000, 5);
    let index = synthetic_index(&corpus, 200);
    let gateway = Gateway::new(Arc::new(TrendBackend)).with_counter(Arc::new(ApproxTokenCounter));
    let pipeline = Pipeline::new(&corpus, &index, 200, Arc::new(LexicalOverlapScorer), &gateway);
    let mut means = BTreeMap::new();
    for strategy in Strategy::ALL {
        let mut total = 0usize;
        for r in &records {
            let trace = pipeline
                .run_question(&r.question, &StrategyConfig::new(strategy, 200, k))
                .map_err(|e| format!("{strategy} on {}: {e}", r.qid))?;
            total += trace.generator_input_tokens;
        }
        means.insert(strategy, total as f64 / records.len() as f64);
    }
    Ok(means)
}

pub fn check_token_trend() -> Check {
    let m = token_means(7)?;
    let [rb, rl, ext, fil, ef] = Strategy::ALL.map(|s| m[&s]);
    let msg = format!("RB {rb:.0}, RL {rl:.0}, EXT {ext:.0}, FIL {fil:.0}, EF {ef:.0}");
    if rl > rb && fil <= rb && ef <= ext {
        Ok(msg)
    } else {
        Err(msg)
    }
}

#[derive(serde::Deserialize)]
pub struct F1Pair {
    pub prediction: String,
    pub gold: String,
    pub f1: f64,
}

pub fn f1_pairs() -> Vec<F1Pair> {
    serde_json::from_str(&read(&fixture("f1_pairs.json"))).unwrap()
}

pub fn check_f1() -> Check {
    let pairs = f1_pairs();
    let mut worst = 0f64;
    for p in &pairs {
        let got: f64 = f1_score(&p.prediction, &p.gold);
        worst = worst.max((got - p.f1).abs()).max((got - f1_reference(&p.prediction, &p.gold)).abs());
    }
    let identity_ok = pairs.iter().flat_map(|p| [&p.prediction, &p.gold]).all(|s| f1_score::<f64>(s, s) == 1.0);
    let msg = format!("{} pairs, max deviation {worst:e}, identity pairs exact: {identity_ok}", pairs.len());
    if pairs.len() == 25 && worst <= 1e-9 && identity_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn generated_paragraph(rng: &mut ChaCha8Rng) -> String {
    const EXTRA: &[&str] = &["Dr.", "e.g.", "U.S.", "St.", "3.5", "(a)", "\"quoted\"", "x"];
    let n = rng.gen_range(0..30);
    let mut out = String::new();
    for i in 0..n {
        let len = if rng.gen_bool(0.05) { rng.gen_range(150..260) } else { rng.gen_range(1..50) };
        let words: Vec<&str> = (0..len)
            .map(|_| if rng.gen_bool(0.05) { *EXTRA.choose(rng).unwrap() } else { *VOCAB.choose(rng).unwrap() })
            .collect();
        let end = *['.', '!', '?', ';', '.'].choose(rng).unwrap();
        if i > 0 {
            out.push_str([" ", "  ", "\n", " \t"].choose(rng).unwrap());
        }
        out.push_str(&words.join(" "));
        out.push(end);
    }
    out
}

pub fn policy_for(rng: &mut ChaCha8Rng) -> ChunkPolicy {
    let size = *[20, 50, 100, 200].choose(rng).unwrap();
    ChunkPolicy {
        chunk_size: size,
        overlap_sentences: rng.gen_range(0..=2),
        min_tail_words: rng.gen_range(1..=size / 2),
    }
}

/// Coverage, monotonicity, tail, size and reconstruction violations for one paragraph.
pub fn chunk_violations(text: &str, policy: &ChunkPolicy) -> Vec<String> {
    let p = Paragraph::new(text, None, "gen");
    let chunks = chunk_paragraph(&p, policy);
    let sentences = split_sentences(text);
    let mut v = Vec::new();
    if sentences.is_empty() {
        if !chunks.is_empty() {
            v.push("chunks from empty text".into());
        }
        return v;
    }
    let mut covered = vec![false; sentences.len()];
    let mut expected_body = 0;
    for (i, c) in chunks.iter().enumerate() {
        if c.seq != i {
            v.push(format!("seq {} at {i}", c.seq));
        }
        if c.body_start != expected_body {
            v.push(format!("chunk {i} body starts at {}, expected {expected_body}", c.body_start));
        }
        expected_body = c.sentences.end;
        let first = if i == 0 { c.body_start } else { c.body_start.saturating_sub(policy.overlap_sentences) };
        if c.sentences.start != first {
            v.push(format!("chunk {i} overlap starts at {}", c.sentences.start));
        }
        for s in c.sentences.clone() {
            covered[s] = true;
        }
        let joined_ok =
            c.text.starts_with(sentences[c.sentences.start]) && c.text.ends_with(sentences[c.sentences.end - 1]);
        if !joined_ok || !text.contains(&c.text) {
            v.push(format!("chunk {i} is not a contiguous run of the parent"));
        }
        if c.body_words > policy.chunk_size && !c.oversized && !c.merged_tail {
            v.push(format!("chunk {i} has {} body words", c.body_words));
        }
    }
    if expected_body != sentences.len() {
        v.push(format!("bodies end at {expected_body} of {}", sentences.len()));
    }
    if covered.iter().any(|c| !c) {
        v.push("uncovered sentence".into());
    }
    let total: usize = sentences.iter().map(|s| s.split_whitespace().count()).sum();
    if let Some(last) = chunks.last() {
        if chunks.len() > 1 && last.body_words < policy.min_tail_words {
            v.push(format!("dangling tail of {} words (paragraph {total})", last.body_words));
        }
    }
    v
}

pub fn check_chunker() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut violations = 0;
    for i in 0..500 {
        let text = generated_paragraph(&mut rng);
        let policy = policy_for(&mut rng);
        let found = chunk_violations(&text, &policy);
        if !found.is_empty() {
            violations += found.len();
            eprintln!("paragraph {i}: {found:?}");
        }
    }
    let mut packing_mismatch = 0;
    for _ in 0..50 {
        let text = generated_paragraph(&mut rng);
        let policy = policy_for(&mut rng);
        let p = Paragraph::new(text.clone(), None, "gen");
        let got: Vec<_> = chunk_paragraph(&p, &policy)
            .iter()
            .map(|c| (c.body_start, c.sentences.end, c.body_words, c.word_count))
            .collect();
        let sentences_agree = split_sentences(&text) == regex_sentences(&text);
        if got != greedy_chunks(&text, &policy) || !sentences_agree {
            packing_mismatch += 1;
        }
    }
    let msg = format!("500 paragraphs, {violations} violations; packing oracle mismatches {packing_mismatch}/50");
    if violations == 0 && packing_mismatch == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub const INSTRUCT_SEED: u64 = 7;

pub fn instruct_records() -> (Corpus, Vec<QaRecord>) {
    let ingested = ingest_fixture("instruct_20.jsonl");
    (ingested.corpus, ingested.records)
}

pub fn instruct_builder_run(corpus: &Corpus, records: &[QaRecord], teacher: Teacher) -> InstructRun {
    let gateway = Gateway::new(Arc::new(teacher));
    let mut policy = BuildPolicy::default();
    policy.preprocess.rng_seed = INSTRUCT_SEED;
    InstructBuilder::new(corpus, &gateway, &gateway, &ApproxTokenCounter).with_policy(policy).run(records).unwrap()
}

/// `(instruct.jsonl, dropped.jsonl, report.json)` of the seeded fixture run.
pub fn instruct_outputs(run: &InstructRun) -> [String; 3] {
    let mut records = Vec::new();
    write_instruct_jsonl(&run.records, &mut records).unwrap();
    let dropped: String = run.dropped.iter().map(|d| serde_json::to_string(d).unwrap() + "\n").collect();
    let report = serde_json::to_string_pretty(&run.report).unwrap() + "\n";
    [String::from_utf8(records).unwrap(), dropped, report]
}

pub const INSTRUCT_REFERENCES: [&str; 3] =
    ["instruct_20.expected.jsonl", "instruct_20.expected.dropped.jsonl", "instruct_20.expected.report.json"];

fn dropped_reason(run: &InstructRun, qid: &str) -> Vec<String> {
    run.dropped
        .iter()
        .filter(|d| d.qid == qid)
        .map(|d| serde_json::to_value(&d.reason).unwrap()["reason"].as_str().unwrap().to_string())
        .collect()
}

fn emitted(run: &InstructRun, qid: &str, kind: InstructKind) -> usize {
    run.records.iter().filter(|r| r.qid == qid && r.kind == kind).count()
}

pub fn check_instruct() -> Check {
    let (corpus, records) = instruct_records();
    let run = instruct_builder_run(&corpus, &records, Teacher::default());
    let outputs = instruct_outputs(&run);
    let mut problems = Vec::new();
    for (name, actual) in INSTRUCT_REFERENCES.iter().zip(&outputs) {
        if !matches_reference(&fixture(name), actual) {
            problems.push(format!("{name} differs from the committed reference"));
        }
    }
    let short_context = |qid: &str| dropped_reason(&run, qid).contains(&"short_context".to_string());
    // 1.5k: 1499 vs 1500 tokens; 2.5k: 2495 vs 2500 tokens, and 2000 tokens kept only under 1.5k.
    for (qid, dropped) in [("h02", true), ("h03", false), ("m03", true), ("m02", false), ("m01", true)] {
        if short_context(qid) != dropped {
            problems.push(format!("{qid}: short-context drop expected {dropped}"));
        }
    }
    // 20-token discard: 19 vs 20 tokens of extractor output.
    if !dropped_reason(&run, "h04").contains(&"short_output".to_string())
        || emitted(&run, "h04", InstructKind::Extractor) != 0
    {
        problems.push("h04: 19-token extraction not discarded".into());
    }
    if emitted(&run, "w02", InstructKind::Extractor) != 1 {
        problems.push("w02: 20-token extraction not kept".into());
    }
    // Label balance: candidate pools are skewed, emitted filtering records are not.
    let gateway = Gateway::new(Arc::new(Teacher::default()));
    let mut balance = Vec::new();
    let mut skewed = 0;
    let pre = ragkit::instruct::preprocess(&records, &corpus, &seeded_preprocess(), &ApproxTokenCounter)
        .map_err(|e| e.to_string())?;
    let builder = InstructBuilder::new(&corpus, &gateway, &gateway, &ApproxTokenCounter);
    for dataset in ["hotpotqa", "2wikimqa", "musique"] {
        let (mut pool_t, mut pool_f) = (0, 0);
        for r in pre.kept.iter().filter(|r| r.dataset == dataset) {
            if builder.build_cot_data(r).map_err(|e| e.to_string())?.cot.is_some() {
                let t = r.context.iter().filter(|c| c.supporting).count();
                pool_t += t;
                pool_f += r.context.len() - t;
            }
        }
        let out: Vec<_> =
            run.records.iter().filter(|r| r.dataset == dataset && r.kind == InstructKind::Filtering).collect();
        let t = out.iter().filter(|r| r.output.contains("True")).count();
        let f = out.len() - t;
        if t != f || t == 0 {
            problems.push(format!("{dataset}: pool {pool_t}/{pool_f}, emitted {t}/{f}"));
        }
        if pool_t != pool_f {
            skewed += 1;
        }
        balance.push(format!("{dataset} {pool_t}/{pool_f}->{t}/{f}"));
    }
    if skewed == 0 {
        problems.push("no dataset has a skewed filtering pool".into());
    }
    if problems.is_empty() {
        Ok(format!(
            "{} records, references byte-equal, thresholds flip, balance {}",
            run.records.len(),
            balance.join(" ")
        ))
    } else {
        Err(problems.join("; "))
    }
}

pub fn seeded_preprocess() -> ragkit::instruct::PreprocessPolicy {
    let mut p = BuildPolicy::default().preprocess;
    p.rng_seed = INSTRUCT_SEED;
    p
}

mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ragkit::chunker::{chunk_corpus, ChunkPolicy};
use ragkit::corpus::{
    ingest_dataset, parse_records, read_records_jsonl, write_records_jsonl, Corpus, IngestFormat, QaRecord,
};
use ragkit::evalkit::{build_indexes, format_table, format_token_table, results_csv, run_experiment, ExperimentDeps};
use ragkit::gateway::DryRunBackend;
use ragkit::instruct::{write_instruct_jsonl, InstructBuilder};
use ragkit::orchestrator::{
    meter_tokens, write_traces, Pipeline, PipelineOptions, Strategy, StrategyConfig, DEFAULT_GRID,
};
use ragkit::retriever::{build_index, BuildOptions};

use config::{parse_grid_point, require_file, AppConfig, MissingFile};

#[derive(Debug, Parser)]
#[command(name = "ragkit", version, about = "Long-context retrieval-augmented QA toolkit")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads and concurrent model calls.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scripted responses (JSONL of {"key", "response"}) instead of a live model.
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,
    /// Render prompts without contacting any model.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a deduplicated corpus and QA records from a JSONL dataset.
    Ingest {
        /// JSONL with question, answer, dataset and paragraphs[{title, text, is_supporting}].
        input: PathBuf,
    },
    /// Answer one question end to end.
    Ask {
        question: String,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Score strategies over a chunk-size/top-k grid.
    Eval {
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Grid points like 200*7; repeat or comma-separate.
        #[arg(long, value_delimiter = ',')]
        grid_point: Vec<String>,
        /// Only evaluate questions from this dataset.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Construct instruction data with teacher and evaluator calls.
    BuildInstruct {
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Debug, Args)]
struct GridArgs {
    /// RB, RL, EXT, FIL or EF; eval accepts a comma-separated list.
    #[arg(long, value_delimiter = ',', value_parser = strategy_name)]
    strategy: Vec<String>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
}

fn strategy_name(s: &str) -> Result<String, String> {
    s.parse::<Strategy>().map(|_| s.to_string()).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Corpus JSONL written by `ingest`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// QA records JSONL written by `ingest`.
    #[arg(long)]
    records: Option<PathBuf>,
}

struct Ctx {
    cfg: AppConfig,
    jobs: usize,
    seed: u64,
    mock_script: Option<PathBuf>,
    dry_run: Option<Arc<DryRunBackend>>,
    out: PathBuf,
}

impl Ctx {
    fn corpus_path(&self, data: &DataArgs) -> PathBuf {
        data.corpus.clone().or_else(|| self.cfg.data.corpus.clone()).unwrap_or_else(|| self.out.join("corpus.jsonl"))
    }

    fn records_path(&self, data: &DataArgs) -> PathBuf {
        data.records.clone().or_else(|| self.cfg.data.records.clone()).unwrap_or_else(|| self.out.join("records.jsonl"))
    }

    fn load_corpus(&self, data: &DataArgs) -> Result<Corpus> {
        let path = self.corpus_path(data);
        require_file(&path)?;
        Corpus::read_jsonl(BufReader::new(File::open(&path)?)).with_context(|| format!("reading {}", path.display()))
    }

    fn load_records(&self, data: &DataArgs) -> Result<Vec<QaRecord>> {
        let path = self.records_path(data);
        require_file(&path)?;
        read_records_jsonl(BufReader::new(File::open(&path)?)).with_context(|| format!("reading {}", path.display()))
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }

    fn write_prompts(&self) -> Result<()> {
        if let Some(dry) = &self.dry_run {
            let mut w = self.create("prompts.txt")?;
            for (template, prompt) in dry.prompts() {
                writeln!(w, "===== {template} =====\n{prompt}")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    fn pipeline_options(&self) -> PipelineOptions {
        let p = &self.cfg.pipeline;
        PipelineOptions {
            layout: p.context_layout,
            mapping: p.mapping,
            no_fallback: p.no_fallback,
            ..Default::default()
        }
    }

    fn build_options(&self) -> BuildOptions {
        BuildOptions { max_in_flight: self.jobs, ..Default::default() }
    }
}

fn cmd_ingest(ctx: &Ctx, input: &Path) -> Result<()> {
    require_file(input)?;
    let raw = parse_records(BufReader::new(File::open(input)?), IngestFormat::Jsonl)
        .with_context(|| format!("reading {}", input.display()))?;
    let ingested = ingest_dataset(&raw)?;
    let mut w = ctx.create("corpus.jsonl")?;
    ingested.corpus.write_jsonl(&mut w)?;
    w.flush()?;
    let mut w = ctx.create("records.jsonl")?;
    write_records_jsonl(&ingested.records, &mut w)?;
    w.flush()?;
    let mut w = ctx.create("ingest_report.json")?;
    serde_json::to_writer_pretty(&mut w, &ingested.report)?;
    w.flush()?;
    let r = &ingested.report;
    println!(
        "records: {}  paragraphs: {}  corpus: {}  duplicates merged: {}  rejected empty: {}",
        r.records,
        r.paragraphs_seen,
        r.corpus_size,
        r.duplicates_merged,
        r.rejected_empty.len()
    );
    Ok(())
}

fn cmd_ask(ctx: &Ctx, question: &str, grid: &GridArgs, data: &DataArgs) -> Result<()> {
    if grid.strategy.len() > 1 {
        bail!("ask takes a single --strategy");
    }
    let scfg = ctx.cfg.strategy_config(grid.strategy.first().map(String::as_str), grid.chunk_size, grid.top_k)?;
    let corpus = ctx.load_corpus(data)?;
    let gateway = ctx.cfg.gateway(None, ctx.mock_script.as_deref(), ctx.dry_run.clone(), ctx.jobs)?;
    let embedder = ctx.cfg.embedder()?;
    let chunks = chunk_corpus(&corpus, &ChunkPolicy::with_size(scfg.chunk_size));
    let index = build_index(chunks, Arc::clone(&embedder), ctx.build_options())?;
    let pipeline = Pipeline::new(&corpus, &index, scfg.chunk_size, ctx.cfg.pair_scorer(&embedder), &gateway)
        .with_options(ctx.pipeline_options());
    let trace = pipeline.run_question(question, &scfg)?;
    let mut w = ctx.create("trace.jsonl")?;
    write_traces(std::slice::from_ref(&trace), &mut w)?;
    w.flush()?;
    ctx.write_prompts()?;
    let report = meter_tokens(&trace, gateway.counter());
    println!("{}", trace.answer);
    eprintln!(
        "strategy {} at {}: {} calls, {} generator-input tokens; trace: {}",
        scfg.strategy,
        scfg.grid_label(),
        trace.call_count(),
        report.generator_input_tokens,
        ctx.out.join("trace.jsonl").display()
    );
    Ok(())
}

fn eval_grid(ctx: &Ctx, grid: &GridArgs, points: &[String]) -> Result<Vec<StrategyConfig>> {
    let names: Vec<String> = if !grid.strategy.is_empty() {
        grid.strategy.clone()
    } else if !ctx.cfg.eval.strategies.is_empty() {
        ctx.cfg.eval.strategies.clone()
    } else {
        Strategy::ALL.iter().map(|s| s.as_str().to_string()).collect()
    };
    let points: Vec<(usize, usize)> = if !points.is_empty() {
        points.iter().map(|p| parse_grid_point(p)).collect::<Result<_>>()?
    } else if grid.chunk_size.is_some() || grid.top_k.is_some() {
        vec![(grid.chunk_size.unwrap_or(ctx.cfg.pipeline.chunk_size), grid.top_k.unwrap_or(ctx.cfg.pipeline.top_k))]
    } else if !ctx.cfg.eval.grid.is_empty() {
        ctx.cfg.eval.grid.iter().map(|p| parse_grid_point(p)).collect::<Result<_>>()?
    } else {
        DEFAULT_GRID.to_vec()
    };
    let mut out = Vec::new();
    for (chunk_size, top_k) in points {
        for name in &names {
            out.push(ctx.cfg.strategy_config(Some(name), Some(chunk_size), Some(top_k))?);
        }
    }
    Ok(out)
}

fn cmd_eval(ctx: &Ctx, grid: &GridArgs, data: &DataArgs, points: &[String], dataset: Option<&str>) -> Result<()> {
    let configs = eval_grid(ctx, grid, points)?;
    let corpus = ctx.load_corpus(data)?;
    let mut records = ctx.load_records(data)?;
    if let Some(d) = dataset.or(ctx.cfg.eval.dataset.as_deref()) {
        records.retain(|r| r.dataset == d);
        if records.is_empty() {
            bail!("no records for dataset `{d}`");
        }
    }
    let gateway = ctx.cfg.gateway(None, ctx.mock_script.as_deref(), ctx.dry_run.clone(), ctx.jobs)?;
    let embedder = ctx.cfg.embedder()?;
    let indexes =
        build_indexes(&corpus, configs.iter().map(|c| c.chunk_size), Arc::clone(&embedder), ctx.build_options())?;
    let deps = ExperimentDeps {
        corpus: &corpus,
        indexes: &indexes,
        pair: ctx.cfg.pair_scorer(&embedder),
        gateway: &gateway,
        options: ctx.pipeline_options(),
        exclude_failures: ctx.cfg.eval.exclude_failures,
    };
    let exp = run_experiment(&records, &configs, &deps)?;

    let csv = results_csv(&exp.results);
    let table = format_table(&exp.results);
    let tokens = format_token_table(&exp.results);
    ctx.create("results.csv")?.write_all(csv.as_bytes())?;
    ctx.create("table.txt")?.write_all(table.as_bytes())?;
    ctx.create("tokens.txt")?.write_all(tokens.as_bytes())?;
    let mut w = ctx.create("traces.jsonl")?;
    write_traces(&exp.traces, &mut w)?;
    w.flush()?;
    ctx.write_prompts()?;
    print!("{table}");
    let failed: usize = exp.results.iter().map(|r| r.per_question.iter().filter(|q| q.error.is_some()).count()).sum();
    if failed > 0 {
        eprintln!("{failed} question runs failed; see the log for stage errors");
    }
    Ok(())
}

fn cmd_build_instruct(ctx: &Ctx, data: &DataArgs) -> Result<()> {
    let corpus = ctx.load_corpus(data)?;
    let records = ctx.load_records(data)?;
    let teacher = ctx.cfg.gateway(None, ctx.mock_script.as_deref(), ctx.dry_run.clone(), ctx.jobs)?;
    let evaluator = match &ctx.cfg.backends.evaluator {
        Some(role) if ctx.mock_script.is_none() => ctx.cfg.gateway(Some(role), None, ctx.dry_run.clone(), ctx.jobs)?,
        _ => teacher.clone(),
    };
    let mut policy = ctx.cfg.instruct.clone().unwrap_or_default();
    policy.preprocess.rng_seed = ctx.seed;
    let counter = ctx.cfg.counter();
    let builder = InstructBuilder::new(&corpus, &teacher, &evaluator, counter.as_ref()).with_policy(policy);
    let run = builder.run(&records)?;

    let mut w = ctx.create("instruct.jsonl")?;
    write_instruct_jsonl(&run.records, &mut w)?;
    w.flush()?;
    let mut w = ctx.create("dropped.jsonl")?;
    for d in &run.dropped {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let mut w = ctx.create("instruct_report.json")?;
    serde_json::to_writer_pretty(&mut w, &run.report)?;
    w.flush()?;
    let table = run.report.render_table();
    ctx.create("instruct_stats.txt")?.write_all(table.as_bytes())?;
    ctx.write_prompts()?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = AppConfig::load(cli.config.as_deref())?;
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(4, |n| n.get()));
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok();
    let ctx = Ctx {
        jobs,
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        mock_script: cli.mock_script,
        dry_run: cli.dry_run.then(|| Arc::new(DryRunBackend::default())),
        out: cli.out.or_else(|| cfg.data.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out")),
        cfg,
    };
    match &cli.command {
        Command::Ingest { input } => cmd_ingest(&ctx, input),
        Command::Ask { question, grid, data } => cmd_ask(&ctx, question, grid, data),
        Command::Eval { grid, data, grid_point, dataset } => cmd_eval(&ctx, grid, data, grid_point, dataset.as_deref()),
        Command::BuildInstruct { data } => cmd_build_instruct(&ctx, data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingFile>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

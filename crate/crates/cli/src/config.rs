//! TOML configuration. Every section and key is optional.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! corpus = "out/corpus.jsonl"
//! records = "out/records.jsonl"
//! out_dir = "out"
//!
//! [pipeline]
//! strategy = "EF"
//! chunk_size = 200
//! top_k = 7
//! coarse_n = 50
//! context_layout = { passage_headers = true }
//!
//! [eval]
//! strategies = ["RB", "RL", "EXT", "FIL", "EF"]
//! grid = ["200*7", "200*12", "500*3", "500*5"]
//!
//! [backends.chat]
//! mock_script = "mock.jsonl"
//! # or
//! # remote = { base_url = "https://api.openai.com/v1", model = "gpt-4o-mini", api_key_env = "OPENAI_API_KEY" }
//!
//! [backends.embeddings]
//! kind = "bag_of_words"
//! dim = 256
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use ragkit::extractor::MappingOptions;
use ragkit::gateway::{
    ApproxTokenCounter, ChatBackend, DryRunBackend, Gateway, MockBackend, MockScript, OpenAiChat, RetryPolicy,
    TokenCounter, WhitespaceTokenCounter,
};
use ragkit::instruct::BuildPolicy;
use ragkit::orchestrator::{ContextLayout, Strategy, StrategyConfig};
use ragkit::retriever::remote::OpenAiEmbeddings;
use ragkit::retriever::{
    default_coarse_n, BagOfWordsEmbedder, EmbeddingPairScorer, EmbeddingScorer, HashEmbedder, LexicalOverlapScorer,
    PairScorer,
};
use ragkit::Score;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
    pub backends: BackendsConfig,
    pub tokens: TokensConfig,
    pub instruct: Option<BuildPolicy>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub strategy: String,
    pub chunk_size: usize,
    pub top_k: usize,
    pub coarse_n: Option<usize>,
    pub context_layout: ContextLayout,
    pub mapping: MappingOptions,
    pub no_fallback: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            strategy: "EF".into(),
            chunk_size: 200,
            top_k: 7,
            coarse_n: None,
            context_layout: ContextLayout::default(),
            mapping: MappingOptions::default(),
            no_fallback: false,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub strategies: Vec<String>,
    pub grid: Vec<String>,
    pub dataset: Option<String>,
    pub exclude_failures: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub chat: ChatRole,
    /// Self-evaluator for instruction data; falls back to `chat`.
    pub evaluator: Option<ChatRole>,
    pub embeddings: EmbeddingsConfig,
    pub reranker: RerankerKind,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatRole {
    pub mock_script: Option<PathBuf>,
    pub remote: Option<RemoteChat>,
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteChat {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    pub max_tokens: Option<u32>,
}

fn default_timeout() -> u64 {
    120
}

fn default_attempts() -> u32 {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingsConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub remote: Option<RemoteChat>,
}

impl Default for EmbeddingsConfig {
    fn default() -> Self {
        EmbeddingsConfig { kind: EmbeddingKind::BagOfWords, dim: 256, remote: None }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Hash,
    #[default]
    BagOfWords,
    Remote,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerKind {
    #[default]
    Lexical,
    Embedding,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokensConfig {
    pub counter: CounterKind,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterKind {
    #[default]
    Approx,
    Whitespace,
}

/// Raised for input paths that do not exist; mapped to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("no such file: {0}")]
pub struct MissingFile(pub PathBuf);

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(MissingFile(path.to_path_buf()).into())
    }
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        require_file(path)?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: AppConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, role) in [("chat", Some(&self.backends.chat)), ("evaluator", self.backends.evaluator.as_ref())] {
            if let Some(r) = role {
                if r.mock_script.is_some() && r.remote.is_some() {
                    bail!("backends.{name}: mock_script and remote are mutually exclusive");
                }
            }
        }
        if matches!(self.backends.embeddings.kind, EmbeddingKind::Remote) && self.backends.embeddings.remote.is_none() {
            bail!("backends.embeddings: kind = \"remote\" needs a remote table");
        }
        Ok(())
    }

    pub fn counter(&self) -> Arc<dyn TokenCounter> {
        match self.tokens.counter {
            CounterKind::Approx => Arc::new(ApproxTokenCounter),
            CounterKind::Whitespace => Arc::new(WhitespaceTokenCounter),
        }
    }

    pub fn embedder(&self) -> Result<Arc<dyn EmbeddingScorer<Score>>> {
        let e = &self.backends.embeddings;
        Ok(match e.kind {
            EmbeddingKind::Hash => Arc::new(HashEmbedder::new(e.dim)),
            EmbeddingKind::BagOfWords => Arc::new(BagOfWordsEmbedder::new(e.dim)),
            EmbeddingKind::Remote => {
                let r = e.remote.as_ref().expect("validated");
                Arc::new(OpenAiEmbeddings::new(
                    &r.base_url,
                    &r.model,
                    api_key(r)?,
                    e.dim,
                    Duration::from_secs(r.timeout_secs),
                ))
            }
        })
    }

    pub fn pair_scorer(&self, embedder: &Arc<dyn EmbeddingScorer<Score>>) -> Arc<dyn PairScorer<Score>> {
        match self.backends.reranker {
            RerankerKind::Lexical => Arc::new(LexicalOverlapScorer),
            RerankerKind::Embedding => Arc::new(EmbeddingPairScorer::new(Arc::clone(embedder))),
        }
    }

    /// Gateway for a role. `mock_override` (from `--mock-script`) replaces
    /// whatever the role configures; `dry_run` replaces everything.
    pub fn gateway(
        &self,
        role: Option<&ChatRole>,
        mock_override: Option<&Path>,
        dry_run: Option<Arc<DryRunBackend>>,
        jobs: usize,
    ) -> Result<Gateway> {
        let role = role.unwrap_or(&self.backends.chat);
        let cap = role.max_in_flight.unwrap_or(jobs.max(1));
        let counter = self.counter();
        if let Some(dry) = dry_run {
            return Ok(Gateway::new(dry).with_counter(counter).with_max_in_flight(cap));
        }
        if let Some(path) = mock_override.or(role.mock_script.as_deref()) {
            require_file(path)?;
            let file = std::fs::File::open(path)?;
            let script = MockScript::read_jsonl(std::io::BufReader::new(file))
                .with_context(|| format!("reading mock script {}", path.display()))?;
            let backend: Arc<dyn ChatBackend> = Arc::new(MockBackend::new(script));
            return Ok(Gateway::new(backend)
                .with_counter(counter)
                .with_retry(RetryPolicy::no_backoff(1))
                .with_max_in_flight(cap));
        }
        let Some(r) = &role.remote else {
            bail!("no chat backend configured: pass --mock-script, --dry-run, or set backends.chat in the config");
        };
        let backend = OpenAiChat::new(&r.base_url, &r.model, api_key(r)?, Duration::from_secs(r.timeout_secs));
        let retry = RetryPolicy {
            max_attempts: r.max_attempts,
            timeout: Duration::from_secs(r.timeout_secs),
            ..RetryPolicy::default()
        };
        let params = ragkit::gateway::GenerationParams { max_tokens: r.max_tokens, ..Default::default() };
        Ok(Gateway::new(Arc::new(backend))
            .with_counter(counter)
            .with_retry(retry)
            .with_params(params)
            .with_max_in_flight(cap))
    }

    pub fn strategy_config(
        &self,
        strategy: Option<&str>,
        chunk_size: Option<usize>,
        top_k: Option<usize>,
    ) -> Result<StrategyConfig> {
        let p = &self.pipeline;
        let strategy: Strategy = strategy.unwrap_or(&p.strategy).parse()?;
        let chunk_size = chunk_size.unwrap_or(p.chunk_size);
        let top_k = top_k.unwrap_or(p.top_k);
        if chunk_size == 0 || top_k == 0 {
            bail!("chunk size and top-k must be positive");
        }
        let coarse_n = p.coarse_n.unwrap_or_else(|| default_coarse_n(top_k));
        Ok(StrategyConfig { strategy, chunk_size, top_k, coarse_n })
    }
}

fn api_key(r: &RemoteChat) -> Result<Option<String>> {
    match &r.api_key_env {
        None => Ok(None),
        Some(var) => std::env::var(var).map(Some).with_context(|| format!("environment variable {var} is not set")),
    }
}

/// Parses `"200*7"` into `(200, 7)`.
pub fn parse_grid_point(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(['*', 'x']).with_context(|| format!("grid point `{s}` is not chunk*k"))?;
    let a: usize = a.trim().parse().with_context(|| format!("bad chunk size in `{s}`"))?;
    let b: usize = b.trim().parse().with_context(|| format!("bad top-k in `{s}`"))?;
    if a == 0 || b == 0 {
        bail!("grid point `{s}` must be positive");
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_points() {
        assert_eq!(parse_grid_point("200*7").unwrap(), (200, 7));
        assert_eq!(parse_grid_point("500x3").unwrap(), (500, 3));
        assert!(parse_grid_point("200").is_err());
        assert!(parse_grid_point("0*3").is_err());
    }

    #[test]
    fn mock_and_remote_are_exclusive() {
        let cfg: AppConfig = toml::from_str(
            r#"
            [backends.chat]
            mock_script = "m.jsonl"
            remote = { base_url = "http://x", model = "m" }
            "#,
        )
        .unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("mutually exclusive"));
    }

    #[test]
    fn pipeline_keys() {
        let cfg: AppConfig = toml::from_str(
            r#"
            [pipeline]
            strategy = "RB"
            chunk_size = 500
            top_k = 3
            coarse_n = 20
            context_layout = { passage_headers = true }
            "#,
        )
        .unwrap();
        let s = cfg.strategy_config(None, None, None).unwrap();
        assert_eq!(s, StrategyConfig { strategy: Strategy::RB, chunk_size: 500, top_k: 3, coarse_n: 20 });
        assert!(cfg.pipeline.context_layout.passage_headers);
    }
}

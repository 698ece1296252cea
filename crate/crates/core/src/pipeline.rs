//! End-to-end experiment runs: retrieve, optionally select + rewrite,
//! retrieve again, write the run, and evaluate.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Bm25Params, InvertedIndex, Query, Searcher, WeightedTerms};
use crate::eval::{evaluate_run, EvalOptions, MetricsReport, Qrels, Run};
use crate::feedback::{rm3_expand, rocchio_expand, Rm3Params, RocchioParams};
use crate::generator::{compose_hybrid, generate_reformulation, write_records, ReformulationRecord, MAX_REPETITION};
use crate::induction::PatternLibrary;
use crate::llm::{GatewayConfig, LlmGateway};
use crate::selector::{LlmSelector, PatternSelector, SelectionMode, SelectorModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "bm25")]
    Bm25,
    #[serde(rename = "rm3")]
    Rm3,
    #[serde(rename = "rocchio")]
    Rocchio,
    #[serde(rename = "reformer")]
    Reformer,
    #[serde(rename = "reformer+hook")]
    ReformerHook,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Bm25 => "bm25",
            Mode::Rm3 => "rm3",
            Mode::Rocchio => "rocchio",
            Mode::Reformer => "reformer",
            Mode::ReformerHook => "reformer+hook",
        }
    }

    pub fn uses_llm(self) -> bool {
        matches!(self, Mode::Reformer | Mode::ReformerHook)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Mode::Bm25, Mode::Rm3, Mode::Rocchio, Mode::Reformer, Mode::ReformerHook]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (bm25, rm3, rocchio, reformer, reformer+hook)"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectorKind {
    /// A trained linear model loaded from `selector_model`.
    #[default]
    Model,
    /// Ask the gateway to pick a pattern name.
    Llm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Argmax,
    /// Seeded draw per query, derived from the run seed and the query id.
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// TSV corpus or a saved `.json` index.
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: Option<PathBuf>,
    /// Falls back to the bundled reference library.
    pub library: Option<PathBuf>,
    pub selector: SelectorKind,
    pub selector_model: Option<PathBuf>,
    pub selection: Selection,
    pub gateway: Option<GatewayConfig>,
    /// `query_id<TAB>passage` lines prepended to the generation context.
    pub hook_passages: Option<PathBuf>,
    pub k_context: usize,
    pub k_eval: usize,
    pub repetition: usize,
    pub seed: u64,
    pub bm25: Bm25Params<f64>,
    pub snippet_tokens: usize,
    pub rm3: Rm3Params<f64>,
    pub rocchio: RocchioParams<f64>,
    pub eval: EvalOptions,
    /// Not part of the config hash.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Bm25,
            corpus: PathBuf::new(),
            queries: PathBuf::new(),
            qrels: None,
            library: None,
            selector: SelectorKind::Model,
            selector_model: None,
            selection: Selection::Argmax,
            gateway: None,
            hook_passages: None,
            k_context: 3,
            k_eval: 1000,
            repetition: 1,
            seed: 0,
            bm25: Bm25Params::default(),
            snippet_tokens: corpus::DEFAULT_SNIPPET_TOKENS,
            rm3: Rm3Params::default(),
            rocchio: RocchioParams::default(),
            eval: EvalOptions::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// First 12 hex digits of the SHA-256 of `value`'s JSON. Object keys come
/// out sorted, so the digest does not depend on field order.
pub fn config_hash<C: Serialize>(value: &C) -> String {
    let canonical = serde_json::to_value(value).expect("config serializes").to_string();
    hex::encode(Sha256::digest(canonical.as_bytes()))[..12].to_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Gateway,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Gateway => 4,
        }
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{stage}{}", query_suffix(.query_id))]
    Stage {
        stage: &'static str,
        kind: ErrorKind,
        query_id: Option<String>,
        #[source]
        source: BoxError,
    },
}

fn query_suffix(query_id: &Option<String>) -> String {
    query_id.as_ref().map(|q| format!(" (query {q})")).unwrap_or_default()
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Config(_) => ErrorKind::Config,
            PipelineError::Stage { kind, .. } => *kind,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }

    fn data(stage: &'static str, source: impl Into<BoxError>) -> Self {
        PipelineError::Stage {
            stage,
            kind: ErrorKind::Data,
            query_id: None,
            source: source.into(),
        }
    }
}

fn config_err(message: impl Into<String>) -> PipelineError {
    PipelineError::Config(message.into())
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// `{mode}-{hash}`, used as run tag and file stem.
    pub fn run_tag(&self) -> String {
        format!("{}-{}", self.mode, self.hash())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.repetition == 0 || self.repetition > MAX_REPETITION {
            return Err(config_err(format!("repetition must be between 1 and {MAX_REPETITION}")));
        }
        if self.k_eval == 0 {
            return Err(config_err("k_eval must be at least 1"));
        }
        let mut required: Vec<(&str, &Path)> = vec![("corpus", &self.corpus), ("queries", &self.queries)];
        if let Some(q) = &self.qrels {
            required.push(("qrels", q));
        }
        if self.mode.uses_llm() {
            if let Some(l) = &self.library {
                required.push(("library", l));
            }
            if self.gateway.is_none() {
                return Err(config_err(format!("mode {} needs a gateway", self.mode)));
            }
            if self.selector == SelectorKind::Model {
                let model = self
                    .selector_model
                    .as_deref()
                    .ok_or_else(|| config_err("selector = model needs selector_model"))?;
                required.push(("selector_model", model));
            }
        }
        if self.mode == Mode::ReformerHook {
            let hook = self
                .hook_passages
                .as_deref()
                .ok_or_else(|| config_err("mode reformer+hook needs hook_passages"))?;
            required.push(("hook_passages", hook));
        }
        for (name, path) in required {
            if path.as_os_str().is_empty() {
                return Err(config_err(format!("{name} path is not set")));
            }
            if !path.exists() {
                return Err(config_err(format!("{name} file {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub run_tag: String,
    pub run_path: PathBuf,
    pub log_path: Option<PathBuf>,
    pub report_paths: Vec<PathBuf>,
    pub report: Option<MetricsReport>,
}

struct Rewrite {
    record: ReformulationRecord,
    ranking: Vec<(String, f64)>,
}

/// Everything the reformer path needs, loaded once.
struct Reformer {
    library: PatternLibrary,
    selector: Box<dyn PatternSelector>,
    gateway: LlmGateway,
    hooks: std::collections::HashMap<String, String>,
}

fn load_reformer(config: &PipelineConfig) -> Result<Reformer, PipelineError> {
    let library = match &config.library {
        Some(path) => PatternLibrary::load(path).map_err(|e| PipelineError::data("loading library", e))?,
        None => PatternLibrary::reference(),
    };
    library
        .validate(usize::MAX)
        .map_err(|e| PipelineError::data("loading library", e))?;
    let gateway = config
        .gateway
        .as_ref()
        .expect("validated")
        .connect()
        .map_err(|e| config_err(format!("gateway: {e}")))?;
    let selector: Box<dyn PatternSelector> = match config.selector {
        SelectorKind::Model => {
            let path = config.selector_model.as_ref().expect("validated");
            let model =
                SelectorModel::<f64>::load(path).map_err(|e| PipelineError::data("loading selector", e))?;
            model
                .check_library(&library)
                .map_err(|e| PipelineError::data("loading selector", e))?;
            Box::new(model)
        }
        SelectorKind::Llm => Box::new(LlmSelector::new(gateway.clone(), library.clone())),
    };
    let hooks = match (&config.hook_passages, config.mode) {
        (Some(path), Mode::ReformerHook) => corpus::read_queries(path)
            .map_err(|e| PipelineError::data("reading hook passages", e))?
            .into_iter()
            .map(|q| (q.query_id, q.text))
            .collect(),
        _ => Default::default(),
    };
    Ok(Reformer {
        library,
        selector,
        gateway,
        hooks,
    })
}

fn sample_seed(run_seed: u64, query_id: &str) -> u64 {
    let digest = Sha256::digest(format!("{run_seed}\u{0}{query_id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn rewrite_query(
    config: &PipelineConfig,
    hash: &str,
    searcher: &Searcher<'_>,
    reformer: &Reformer,
    query: &Query,
) -> Result<Rewrite, PipelineError> {
    let stage_err = |stage: &'static str, kind: ErrorKind, source: BoxError| PipelineError::Stage {
        stage,
        kind,
        query_id: Some(query.query_id.clone()),
        source,
    };
    let context = if config.k_context == 0 {
        corpus::RetrievalContext::empty(query.query_id.clone())
    } else {
        searcher
            .retrieve_text(&query.query_id, &query.text, config.k_context)
            .map_err(|e| stage_err("context retrieval", ErrorKind::Data, e.into()))?
    };
    let mode = match config.selection {
        Selection::Argmax => SelectionMode::Argmax,
        Selection::Sample => SelectionMode::Sample {
            seed: sample_seed(config.seed, &query.query_id),
        },
    };
    let pattern_id = reformer.selector.select(&query.text, &context, mode).map_err(|e| {
        let kind = match e {
            crate::selector::SelectorError::Gateway { .. } => ErrorKind::Gateway,
            _ => ErrorKind::Data,
        };
        stage_err("pattern selection", kind, e.into())
    })?;
    let pattern = reformer.library.get(pattern_id).expect("selector bound to library");
    let hook = reformer.hooks.get(&query.query_id).map(String::as_str);
    let reformulation =
        generate_reformulation(&reformer.gateway, &query.query_id, &query.text, &context, pattern, hook)
            .map_err(|e| stage_err("reformulation", ErrorKind::Gateway, e.into()))?;
    let hybrid = compose_hybrid(&query.text, &reformulation.text, config.repetition)
        .map_err(|e| stage_err("hybrid composition", ErrorKind::Config, e.into()))?;
    let ranking = searcher
        .top_k(&WeightedTerms::from_text(&hybrid.text), config.k_eval)
        .map_err(|e| stage_err("final retrieval", ErrorKind::Data, e.into()))?
        .into_iter()
        .map(|d| (d.doc_id, d.score))
        .collect();
    Ok(Rewrite {
        record: ReformulationRecord {
            query_id: query.query_id.clone(),
            pattern_id,
            pattern_name: pattern.name.clone(),
            reformulation: reformulation.text,
            hybrid_query: hybrid.text,
            fallback: reformulation.fallback,
            config_hash: Some(hash.to_owned()),
        },
        ranking,
    })
}

fn baseline_ranking(
    config: &PipelineConfig,
    searcher: &Searcher<'_>,
    query: &Query,
) -> Result<Vec<(String, f64)>, PipelineError> {
    let stage_err = |stage: &'static str, source: BoxError| PipelineError::Stage {
        stage,
        kind: ErrorKind::Data,
        query_id: Some(query.query_id.clone()),
        source,
    };
    let terms = match config.mode {
        Mode::Rm3 => rm3_expand(searcher, &query.text, &config.rm3)
            .map_err(|e| stage_err("rm3 expansion", e.into()))?
            .to_weighted_terms(),
        Mode::Rocchio => rocchio_expand(searcher, &query.text, &config.rocchio)
            .map_err(|e| stage_err("rocchio expansion", e.into()))?
            .to_weighted_terms(),
        _ => WeightedTerms::from_text(&query.text),
    };
    Ok(searcher
        .top_k(&terms, config.k_eval)
        .map_err(|e| stage_err("retrieval", e.into()))?
        .into_iter()
        .map(|d| (d.doc_id, d.score))
        .collect())
}

/// The reformer front half on its own: one log record per query, in query
/// order, without writing anything.
pub fn reformulate(config: &PipelineConfig) -> Result<Vec<ReformulationRecord>, PipelineError> {
    config.validate()?;
    if !config.mode.uses_llm() {
        return Err(config_err(format!("mode {} does not reformulate", config.mode)));
    }
    let hash = config.hash();
    let index = corpus::load_index(&config.corpus).map_err(|e| PipelineError::data("loading corpus", e))?;
    let queries = corpus::read_queries(&config.queries).map_err(|e| PipelineError::data("reading queries", e))?;
    let searcher = Searcher::with_params(&index, config.bm25).snippet_tokens(config.snippet_tokens);
    let reformer = load_reformer(config)?;
    queries
        .par_iter()
        .map(|q| rewrite_query(config, &hash, &searcher, &reformer, q).map(|r| r.record))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Removes every listed file unless disarmed.
struct Cleanup(Vec<PathBuf>);

impl Drop for Cleanup {
    fn drop(&mut self) {
        for path in &self.0 {
            let _ = std::fs::remove_file(path);
        }
    }
}

fn write_artifact(
    path: &Path,
    cleanup: &mut Cleanup,
    body: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
) -> Result<(), PipelineError> {
    use std::io::Write;
    cleanup.0.push(path.to_owned());
    let file = std::fs::File::create(path).map_err(|e| PipelineError::data("writing outputs", e))?;
    let mut out = std::io::BufWriter::new(file);
    body(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| PipelineError::data("writing outputs", e))
}

/// Runs one configured experiment and writes `{tag}.run`, the reformulation
/// log for reformer modes, and the metrics report when qrels are given.
/// On failure no partial output is left behind.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    config.validate()?;
    let hash = config.hash();
    let tag = config.run_tag();
    log::info!("run {tag}");

    let index: InvertedIndex =
        corpus::load_index(&config.corpus).map_err(|e| PipelineError::data("loading corpus", e))?;
    let queries = corpus::read_queries(&config.queries).map_err(|e| PipelineError::data("reading queries", e))?;
    let qrels = match &config.qrels {
        Some(path) => Some(Qrels::load(path).map_err(|e| PipelineError::data("reading qrels", e))?),
        None => None,
    };
    let searcher = Searcher::with_params(&index, config.bm25).snippet_tokens(config.snippet_tokens);

    let mut run = Run::<f64>::new(tag.clone());
    let mut records = Vec::new();
    if config.mode.uses_llm() {
        let reformer = load_reformer(config)?;
        let results: Vec<Result<Rewrite, PipelineError>> = queries
            .par_iter()
            .map(|q| rewrite_query(config, &hash, &searcher, &reformer, q))
            .collect();
        for (query, result) in queries.iter().zip(results) {
            let rewrite = result?;
            run.insert_ranking(query.query_id.clone(), rewrite.ranking);
            records.push(rewrite.record);
        }
    } else {
        let results: Vec<Result<Vec<(String, f64)>, PipelineError>> =
            queries.par_iter().map(|q| baseline_ranking(config, &searcher, q)).collect();
        for (query, result) in queries.iter().zip(results) {
            run.insert_ranking(query.query_id.clone(), result?);
        }
    }

    let report = match &qrels {
        Some(qrels) => Some(evaluate_run(&run, qrels, &config.eval).map_err(|e| PipelineError::data("evaluation", e))?),
        None => None,
    };

    std::fs::create_dir_all(&config.output_dir).map_err(|e| PipelineError::data("writing outputs", e))?;
    let dir = &config.output_dir;
    let mut cleanup = Cleanup(Vec::new());
    let run_path = dir.join(format!("{tag}.run"));
    write_artifact(&run_path, &mut cleanup, |out| run.write_to(out))?;
    let log_path = if config.mode.uses_llm() {
        let path = dir.join(format!("{tag}.reformulations.jsonl"));
        write_artifact(&path, &mut cleanup, |out| write_records(&records, out))?;
        Some(path)
    } else {
        None
    };
    let mut report_paths = Vec::new();
    if let Some(report) = &report {
        let csv = dir.join(format!("{tag}.metrics.csv"));
        write_artifact(&csv, &mut cleanup, |out| report.write_csv(out))?;
        let table = dir.join(format!("{tag}.metrics.txt"));
        write_artifact(&table, &mut cleanup, |out| {
            use std::io::Write;
            out.write_all(report.to_table().as_bytes())
        })?;
        report_paths = vec![csv, table];
    }
    cleanup.0.clear();

    Ok(PipelineOutput {
        run_tag: tag,
        run_path,
        log_path,
        report_paths,
        report,
    })
}

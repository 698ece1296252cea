use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use qreform::corpus::{self, InvertedIndex, Searcher, WeightedTerms};
use qreform::eval::{evaluate_run, EvalOptions, Qrels, Run};
use qreform::feedback::{rm3_expand, rocchio_expand, Rm3Params, RocchioParams};
use qreform::generator::write_records;
use qreform::induction::{
    self, induce_patterns, ingest_pairs, label_pairs, read_labels, sample_pairs, write_labels, InductionOptions,
    PatternLibrary, Transcript,
};
use qreform::llm::{BackendConfig, GatewayConfig, GatewayError, LlmGateway};
use qreform::pipeline::{self, config_hash, Mode, PipelineConfig, PipelineError, Selection, SelectorKind};
use qreform::selector::{save_loss_csv, train_selector, FeatureConfig, SelectorHyper, TrainingExample};

#[derive(Parser)]
#[command(name = "qreform", version, about = "Pattern-guided query reformulation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an inverted index from a `doc_id<TAB>text` corpus
    Index(IndexArgs),
    /// BM25 top-k for a query file or a single query
    Retrieve(RetrieveArgs),
    /// RM3 or Rocchio expanded retrieval
    Baseline(BaselineArgs),
    /// Consolidate a pattern library from reformulation pairs
    Induce(InduceArgs),
    /// Assign each training pair to a library pattern
    Label(LabelArgs),
    /// Train the linear pattern selector
    TrainSelector(TrainArgs),
    /// Select a pattern and rewrite each query, writing the JSONL log
    Reformulate(RunArgs),
    /// Full experiment: run file, reformulation log and metrics
    Run(RunArgs),
    /// Score a TREC run against qrels
    Evaluate(EvaluateArgs),
}

/// Error marker for bad invocations, reported with exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

#[derive(Args, Clone, Default)]
struct GatewayArgs {
    /// JSON gateway config (`{"backend": {"kind": "mock", "script": ...}, "model": ...}`)
    #[arg(long)]
    gateway_config: Option<PathBuf>,
    /// Serve completions from a scripted mock
    #[arg(long, conflicts_with = "llm_url")]
    mock_script: Option<PathBuf>,
    /// OpenAI-compatible endpoint
    #[arg(long)]
    llm_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    max_in_flight: Option<usize>,
}

impl GatewayArgs {
    /// Flags over `--gateway-config` over environment.
    fn resolve(&self, base: Option<GatewayConfig>) -> Result<Option<GatewayConfig>> {
        let mut config = match &self.gateway_config {
            Some(path) => Some(read_json::<GatewayConfig>(path)?),
            None => base.or_else(GatewayConfig::from_env),
        };
        if let Some(script) = &self.mock_script {
            config = Some(with_backend(config, BackendConfig::Mock { script: script.clone() }));
        }
        if let Some(url) = &self.llm_url {
            config = Some(with_backend(config, BackendConfig::Http { url: url.clone(), api_key: None }));
        }
        if let Some(c) = config.as_mut() {
            if let Some(m) = &self.model {
                c.model = m.clone();
            }
            if let Some(r) = self.max_retries {
                c.max_retries = r;
            }
            if let Some(n) = self.max_in_flight {
                c.max_in_flight = n;
            }
        }
        Ok(config)
    }

    fn connect(&self) -> Result<LlmGateway> {
        let config = self
            .resolve(None)?
            .ok_or_else(|| usage("no gateway: pass --mock-script, --llm-url or --gateway-config"))?;
        Ok(config.connect()?)
    }
}

fn with_backend(config: Option<GatewayConfig>, backend: BackendConfig) -> GatewayConfig {
    match config {
        Some(c) => GatewayConfig { backend, ..c },
        None => GatewayConfig {
            backend,
            ..GatewayConfig::mock("")
        },
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(std::io::BufWriter::new(file))
}

fn load_index(path: &Path) -> Result<InvertedIndex> {
    corpus::load_index(path).with_context(|| format!("loading corpus {}", path.display()))
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_index(args: IndexArgs) -> Result<()> {
    let docs = corpus::read_documents(&args.corpus)?;
    let index = InvertedIndex::build(docs)?;
    let mut out = create(&args.out)?;
    out.write_all(index.to_json().as_bytes())?;
    out.flush()?;
    eprintln!(
        "indexed {} documents, {} terms -> {}",
        index.num_docs(),
        index.num_terms(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct RetrieveArgs {
    /// TSV corpus or saved `.json` index
    #[arg(long)]
    index: PathBuf,
    #[arg(long, required_unless_present = "query", conflicts_with = "query")]
    queries: Option<PathBuf>,
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long, default_value_t = corpus::DEFAULT_K1)]
    k1: f64,
    #[arg(long, default_value_t = corpus::DEFAULT_B)]
    b: f64,
    /// Run file; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "bm25")]
    tag: String,
}

fn queries_from(file: &Option<PathBuf>, single: &Option<String>) -> Result<Vec<corpus::Query>> {
    match (file, single) {
        (Some(path), _) => Ok(corpus::read_queries(path)?),
        (None, Some(text)) => Ok(vec![corpus::Query::new("q", text.clone())]),
        (None, None) => Err(usage("pass --queries or --query")),
    }
}

fn emit_run(run: &Run<f64>, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            run.write_to(&mut w)?;
            w.flush()?;
        }
        None => run.write_to(std::io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    let searcher = Searcher::with_params(&index, corpus::Bm25Params { k1: args.k1, b: args.b });
    let mut run = Run::new(args.tag.clone());
    for q in queries_from(&args.queries, &args.query)? {
        let hits = searcher.top_k(&WeightedTerms::from_text(&q.text), args.k)?;
        run.insert_ranking(q.query_id, hits.into_iter().map(|h| (h.doc_id, h.score)));
    }
    emit_run(&run, &args.out)
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Rm3,
    Rocchio,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long)]
    index: PathBuf,
    #[arg(long, required_unless_present = "query", conflicts_with = "query")]
    queries: Option<PathBuf>,
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 1000)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    fb_docs: usize,
    #[arg(long, default_value_t = 10)]
    fb_terms: usize,
    /// RM3 interpolation weight of the original query
    #[arg(long, default_value_t = 0.5)]
    orig_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.75)]
    beta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the expanded queries as JSON lines
    #[arg(long)]
    expansions: Option<PathBuf>,
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let index = load_index(&args.index)?;
    let searcher = Searcher::new(&index);
    let tag = match args.method {
        Method::Rm3 => "rm3",
        Method::Rocchio => "rocchio",
    };
    let mut run = Run::new(tag);
    let mut expansions = Vec::new();
    for q in queries_from(&args.queries, &args.query)? {
        let expanded = match args.method {
            Method::Rm3 => rm3_expand(
                &searcher,
                &q.text,
                &Rm3Params {
                    fb_docs: args.fb_docs,
                    fb_terms: args.fb_terms,
                    orig_weight: args.orig_weight,
                },
            )?,
            Method::Rocchio => rocchio_expand(
                &searcher,
                &q.text,
                &RocchioParams {
                    fb_docs: args.fb_docs,
                    fb_terms: args.fb_terms,
                    alpha: args.alpha,
                    beta: args.beta,
                },
            )?,
        };
        let hits = searcher.top_k(&expanded.to_weighted_terms(), args.k)?;
        run.insert_ranking(q.query_id.clone(), hits.into_iter().map(|h| (h.doc_id, h.score)));
        expansions.push(serde_json::json!({"query_id": q.query_id, "terms": expanded.terms}));
    }
    if let Some(path) = &args.expansions {
        let mut w = create(path)?;
        for e in &expansions {
            writeln!(w, "{e}")?;
        }
        w.flush()?;
    }
    emit_run(&run, &args.out)
}

#[derive(Args)]
struct InduceArgs {
    /// `pair_id<TAB>query<TAB>reformulation`
    #[arg(long)]
    pairs: PathBuf,
    #[command(flatten)]
    gateway: GatewayArgs,
    #[arg(long, default_value_t = induction::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = induction::DEFAULT_MAX_PATTERNS)]
    max_patterns: usize,
    /// Use a seeded random subset of this many pairs
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue consolidating from an existing library
    #[arg(long)]
    existing: Option<PathBuf>,
    #[arg(long, default_value = "")]
    source_dataset: String,
    #[arg(long)]
    out: PathBuf,
    /// Every request/response exchange as JSON lines
    #[arg(long)]
    transcript: Option<PathBuf>,
}

fn cmd_induce(args: InduceArgs) -> Result<()> {
    let mut pairs = ingest_pairs(&args.pairs)?;
    if let Some(n) = args.sample {
        pairs = sample_pairs(&pairs, n, args.seed);
    }
    let existing = args.existing.as_deref().map(PatternLibrary::load).transpose()?;
    let gateway = args.gateway.connect()?;
    let options = InductionOptions {
        batch_size: args.batch_size,
        max_patterns: args.max_patterns,
        source_dataset: args.source_dataset.clone(),
    };
    let hash = config_hash(&serde_json::json!({
        "command": "induce",
        "pairs": args.pairs,
        "batch_size": args.batch_size,
        "max_patterns": args.max_patterns,
        "sample": args.sample,
        "seed": args.seed,
        "existing": existing.as_ref().map(|l| &l.version),
        "model": gateway.model(),
    }));
    let mut transcript = Transcript::default();
    let result = induce_patterns(&pairs, &gateway, &options, existing.as_ref(), &mut transcript);
    if let Some(path) = &args.transcript {
        transcript.write_jsonl(path)?;
    }
    let mut library = result?;
    library.provenance.config_hash = Some(hash);
    library.save(&args.out)?;
    eprintln!("{} patterns ({}) -> {}", library.len(), library.version, args.out.display());
    for p in &library.patterns {
        println!("{}\t{}", p.pattern_id, p.name);
    }
    Ok(())
}

#[derive(Args)]
struct LabelArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Bundled reference library when absent
    #[arg(long)]
    library: Option<PathBuf>,
    #[command(flatten)]
    gateway: GatewayArgs,
    #[arg(long)]
    out: PathBuf,
}

fn load_library(path: &Option<PathBuf>) -> Result<PatternLibrary> {
    Ok(match path {
        Some(p) => PatternLibrary::load(p)?,
        None => PatternLibrary::reference(),
    })
}

fn cmd_label(args: LabelArgs) -> Result<()> {
    let pairs = ingest_pairs(&args.pairs)?;
    let library = load_library(&args.library)?;
    let gateway = args.gateway.connect()?;
    let labels = label_pairs(&pairs, &library, &gateway)?;
    write_labels(&args.out, &labels)?;
    let mut counts = vec![0usize; library.len()];
    for l in &labels {
        counts[l.pattern_id] += 1;
    }
    for (p, c) in library.patterns.iter().zip(counts) {
        println!("{c:>6}  {}", p.name);
    }
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    library: Option<PathBuf>,
    /// Corpus the contexts are retrieved from
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 3)]
    k_context: usize,
    #[arg(long, default_value_t = qreform::selector::DEFAULT_FEATURE_DIM)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
    #[arg(long, default_value_t = 64)]
    snippet_tokens: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-3)]
    decay: f64,
    #[arg(long, default_value_t = 1e-5)]
    l2: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// `epoch,loss` CSV
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let library = load_library(&args.library)?;
    let pairs = ingest_pairs(&args.pairs)?;
    let labels: HashMap<String, usize> = read_labels(&args.labels, library.len())?
        .into_iter()
        .map(|l| (l.pair_id, l.pattern_id))
        .collect();
    let index = load_index(&args.index)?;
    let searcher = Searcher::new(&index);
    let mut examples = Vec::new();
    for pair in &pairs {
        let Some(&label) = labels.get(&pair.pair_id) else {
            log::warn!("pair {} has no label; skipped", pair.pair_id);
            continue;
        };
        let context = if args.k_context == 0 {
            corpus::RetrievalContext::empty(pair.pair_id.clone())
        } else {
            searcher.retrieve_text(&pair.pair_id, &pair.query, args.k_context)?
        };
        examples.push(TrainingExample {
            query: pair.query.clone(),
            context,
            label,
        });
    }
    let features = FeatureConfig {
        dim: args.dim,
        snippet_tokens: args.snippet_tokens,
        hash_seed: args.hash_seed,
        ..Default::default()
    };
    let hyper = SelectorHyper {
        epochs: args.epochs,
        learning_rate: args.learning_rate,
        decay: args.decay,
        l2: args.l2,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    let hash = config_hash(&serde_json::json!({
        "command": "train-selector",
        "pairs": args.pairs,
        "labels": args.labels,
        "library": library.version,
        "index": args.index,
        "k_context": args.k_context,
        "features": features,
        "hyper": hyper,
    }));
    let mut trained = train_selector::<f64, f64>(&examples, &library, &features, &hyper)?;
    trained.model.set_config_hash(hash);
    trained.model.save(&args.out)?;
    if let Some(path) = &args.loss_csv {
        save_loss_csv(&trained.epoch_losses, path)?;
    }
    let last = trained.epoch_losses.last().copied().unwrap_or(f64::NAN);
    eprintln!(
        "trained on {} examples, final loss {last:.6} -> {}",
        examples.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct RunArgs {
    /// JSON pipeline config; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long)]
    selector_model: Option<PathBuf>,
    /// Let the LLM choose the pattern instead of a trained model
    #[arg(long)]
    llm_selector: bool,
    /// Draw the pattern from the selector distribution instead of argmax
    #[arg(long)]
    sample: bool,
    #[arg(long)]
    hook_passages: Option<PathBuf>,
    #[arg(long)]
    k_context: Option<usize>,
    #[arg(long)]
    k_eval: Option<usize>,
    #[arg(long)]
    repetition: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Reformulation log for `reformulate`; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    gateway: GatewayArgs,
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults, then environment, then the config file, then flags.
fn pipeline_config(args: &RunArgs) -> Result<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default())?;
    if let Some(gateway) = GatewayConfig::from_env() {
        merge(&mut value, serde_json::json!({ "gateway": gateway }));
    }
    let mut output_dir = None;
    if let Some(path) = &args.config {
        let file: Value = read_json(path)?;
        if let Some(dir) = file.get("output_dir").and_then(Value::as_str) {
            output_dir = Some(PathBuf::from(dir));
        }
        merge(&mut value, file);
    }
    let mut config: PipelineConfig = serde_json::from_value(value).map_err(|e| usage(format!("config: {e}")))?;
    if let Some(dir) = output_dir {
        config.output_dir = dir;
    }
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = args.$field.clone() {
                config.$field = v.into();
            }
        };
    }
    flag!(mode);
    flag!(corpus);
    flag!(queries);
    flag!(k_context);
    flag!(k_eval);
    flag!(repetition);
    flag!(seed);
    flag!(output_dir);
    if let Some(v) = &args.qrels {
        config.qrels = Some(v.clone());
    }
    if let Some(v) = &args.library {
        config.library = Some(v.clone());
    }
    if let Some(v) = &args.selector_model {
        config.selector_model = Some(v.clone());
    }
    if let Some(v) = &args.hook_passages {
        config.hook_passages = Some(v.clone());
    }
    if args.llm_selector {
        config.selector = SelectorKind::Llm;
    }
    if args.sample {
        config.selection = Selection::Sample;
    }
    let gateway_base = config.gateway.take();
    config.gateway = args.gateway.resolve(gateway_base)?;
    Ok(config)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = pipeline_config(&args)?;
    let output = pipeline::run_pipeline(&config)?;
    eprintln!("run {}", output.run_path.display());
    if let Some(log) = &output.log_path {
        eprintln!("log {}", log.display());
    }
    if let Some(report) = &output.report {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_reformulate(args: RunArgs) -> Result<()> {
    let mut config = pipeline_config(&args)?;
    if !config.mode.uses_llm() {
        config.mode = Mode::Reformer;
    }
    let records = pipeline::reformulate(&config)?;
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            write_records(&records, &mut w)?;
            w.flush()?;
        }
        None => write_records(&records, std::io::stdout().lock())?,
    }
    Ok(())
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value_t = 10)]
    ndcg_k: usize,
    #[arg(long, default_value_t = 1000)]
    map_k: usize,
    #[arg(long, default_value_t = 1000)]
    recall_k: usize,
    /// Minimum grade counted relevant for mAP and recall
    #[arg(long, default_value_t = qreform::eval::DEFAULT_BINARIZE_AT)]
    binarize_at: u32,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if args.binarize_at == 0 || args.ndcg_k == 0 || args.map_k == 0 || args.recall_k == 0 {
        bail!(usage("cutoffs and --binarize-at must be at least 1"));
    }
    let run = Run::<f64>::load(&args.run)?;
    let qrels = Qrels::load(&args.qrels)?;
    let options = EvalOptions {
        ndcg_k: args.ndcg_k,
        map_k: args.map_k,
        recall_k: args.recall_k,
        binarize_at: args.binarize_at,
    };
    let report = evaluate_run(&run, &qrels, &options)?;
    if let Some(path) = &args.csv {
        report.save_csv(path)?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return e.exit_code() as u8;
        }
        if cause.is::<UsageError>() {
            return 2;
        }
        if cause.is::<GatewayError>() {
            return 4;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Index(a) => cmd_index(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Induce(a) => cmd_induce(a),
        Command::Label(a) => cmd_label(a),
        Command::TrainSelector(a) => cmd_train(a),
        Command::Reformulate(a) => cmd_reformulate(a),
        Command::Run(a) => cmd_run(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

//! Command-line entry points: synthetic data, oracle simulation, evaluation,
//! serving, and one-off prediction.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 runtime error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use namestruct::activeloop::{LoopError, LoopParams};
use namestruct::corpus::synth::{gen_synthetic, SyntheticKind};
use namestruct::corpus::{infer_schema, load_corpus, tokenize, CorpusError, DEFAULT_SEPARATOR};
use namestruct::embed::{EmbeddingProvider, ProviderConfig, DEFAULT_HASHED_DIM};
use namestruct::metrics::{evaluate, EvalOptions, MetricsError};
use namestruct::seqmodel::ModelError;
use namestruct::simulate::simulate;
use namestruct::{LabelSchema, SequenceModel};
use namestruct_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "namestruct", version, about = "Learn structured representations of entity names")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic gold corpus as JSONL.
    Gen(GenArgs),
    /// Run an oracle-driven session on a gold corpus and report F1 per iteration.
    Simulate(SimulateArgs),
    /// Score a model (or a predictions file) on a labeled corpus.
    Eval(EvalArgs),
    /// Serve the REST API.
    Serve(ServeArgs),
    /// Label one mention with a trained model.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenArgs {
    /// person, org, or date.
    #[arg(long, value_parser = parse_kind)]
    kind: SyntheticKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Hashed,
    Remote,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long, value_enum, default_value_t = ProviderKind::Hashed)]
    provider: ProviderKind,
    #[arg(long)]
    embed_url: Option<String>,
    #[arg(long, default_value_t = DEFAULT_HASHED_DIM)]
    dim: usize,
    /// On-disk cache for remote embeddings.
    #[arg(long)]
    embed_cache: Option<PathBuf>,
}

impl ProviderArgs {
    fn config(&self) -> Result<ProviderConfig, CliError> {
        match self.provider {
            ProviderKind::Hashed => Ok(ProviderConfig::HashedNgram { dimension: self.dim }),
            ProviderKind::Remote => {
                let url = self
                    .embed_url
                    .clone()
                    .ok_or_else(|| CliError::Usage("--provider remote needs --embed-url".into()))?;
                Ok(ProviderConfig::Remote {
                    url,
                    dimension: self.dim,
                    cache_path: self.embed_cache.clone(),
                })
            }
        }
    }
}

#[derive(Args)]
struct SchemaArgs {
    /// Comma-separated component names; inferred from the corpus labels when omitted.
    #[arg(long)]
    schema: Option<String>,
    #[arg(long, default_value = DEFAULT_SEPARATOR)]
    separator: String,
}

impl SchemaArgs {
    fn resolve(&self, corpus: &Path) -> Result<LabelSchema, CliError> {
        match &self.schema {
            Some(list) => LabelSchema::parse_list(list, &self.separator).map_err(|e| CliError::Usage(e.to_string())),
            None => infer_schema(corpus, &self.separator).map_err(CliError::from),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    /// Seeds the split, the model, and training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 15)]
    p: usize,
    #[arg(long, default_value_t = 15)]
    q: usize,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    model_out: Option<PathBuf>,
    #[arg(long)]
    audit_log: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled test corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Model checkpoint to score.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    model: Option<PathBuf>,
    /// Labeled JSONL whose labels are taken as predictions, matched by id.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
    /// Leave separator tokens out of every score.
    #[arg(long)]
    exclude_separator: bool,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Default corpus for new sessions.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Session checkpoint directory.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mention: String,
}

fn parse_kind(s: &str) -> Result<SyntheticKind, String> {
    s.parse().map_err(|e: CorpusError| e.to_string())
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::EmptyRequest | CorpusError::UnknownKind(_) | CorpusError::EmptyMention => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Version { .. } | ModelError::Corrupt(_) | ModelError::Unlabeled(_) => {
                CliError::Data(e.to_string())
            }
            ModelError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Data(io.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> Self {
        match e {
            LoopError::Corpus(c) => c.into(),
            LoopError::Model(m) => m.into(),
            LoopError::Metrics(_) => CliError::Data(e.to_string()),
            LoopError::InvalidParams(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn write_output(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let corpus = gen_synthetic(args.kind, args.n, args.seed)?;
    corpus
        .write_jsonl(&args.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    eprintln!("wrote {} mentions to {}", corpus.len(), args.out.display());
    Ok(())
}

fn provider(args: &ProviderArgs) -> Result<Arc<EmbeddingProvider>, CliError> {
    let config = args.config()?;
    EmbeddingProvider::from_config(&config)
        .map(Arc::new)
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let schema = args.schema.resolve(&args.corpus)?;
    let corpus = load_corpus(&args.corpus, &schema)?;
    if corpus.is_empty() {
        return Err(CliError::Usage(format!("{} has no mentions", args.corpus.display())));
    }
    let params = LoopParams {
        k: args.k,
        p: args.p,
        q: args.q,
        budget: args.budget,
        seed: args.seed,
        ..LoopParams::default()
    };
    let (report, model) = simulate(&corpus, provider(&args.provider)?, params, args.audit_log.clone())?;
    for it in &report.iterations {
        let f1 = it
            .held_out
            .map_or("-".to_string(), |h| format!("entity {:.3} token {:.3}", h.entity_f1, h.token_f1));
        eprintln!(
            "iteration {:>2}: labels {:>2}/{} weak +{:<2} unlabeled {:>4} {f1}",
            it.iteration, it.budget_used, it.budget_max, it.weak_labeled, it.pool.unlabeled
        );
    }
    eprintln!("stopped: {} after {} labels", report.stop_reason, report.budget_used);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(path) => write_output(path, &json)?,
        None => println!("{json}"),
    }
    if let Some(path) = &args.model_out {
        model
            .save(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let (schema, predicted) = match (&args.model, &args.predictions) {
        (Some(model_path), _) => {
            let model = SequenceModel::load(model_path)?;
            let gold = load_corpus(&args.corpus, model.schema())?;
            let mut predicted = HashMap::new();
            for m in &gold.mentions {
                predicted.insert(m.id.clone(), model.predict(&m.tokens)?.labels);
            }
            (model.schema().clone(), predicted)
        }
        (None, Some(pred_path)) => {
            let schema = args.schema.resolve(&args.corpus)?;
            let preds = load_corpus(pred_path, &schema)?;
            let predicted = preds
                .mentions
                .into_iter()
                .filter_map(|m| Some((m.id, m.labels?)))
                .collect();
            (schema, predicted)
        }
        (None, None) => unreachable!("clap requires --model or --predictions"),
    };
    let gold = load_corpus(&args.corpus, &schema)?;
    if gold.is_empty() {
        return Err(CliError::Usage(format!("{} has no mentions", args.corpus.display())));
    }
    let options = EvalOptions {
        include_separator: !args.exclude_separator,
    };
    let report = evaluate(&schema, &gold.mentions, &predicted, options)?;
    println!("{report}");
    if let Some(path) = &args.out {
        write_output(path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<(), CliError> {
    if let Some(c) = &args.corpus {
        if !c.exists() {
            return Err(CliError::Data(format!("corpus {} not found", c.display())));
        }
    }
    let default_schema = match (&args.corpus, &args.schema.schema) {
        (Some(c), _) => Some(args.schema.resolve(c)?),
        (None, Some(list)) => {
            Some(LabelSchema::parse_list(list, &args.schema.separator).map_err(|e| CliError::Usage(e.to_string()))?)
        }
        (None, None) => None,
    };
    let config = ServiceConfig {
        default_corpus: args.corpus.clone(),
        default_schema,
        provider: args.provider.config()?,
        state_dir: args.state_dir.clone(),
    };
    let state = AppState::new(config).map_err(CliError::Runtime)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        eprintln!("listening on http://{local}");
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        let saved = namestruct_service::serve(state, listener, shutdown)
            .await
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        eprintln!("shut down; checkpointed {saved} sessions");
        Ok(())
    })
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let tokens = tokenize(&args.mention).map_err(|e| CliError::Usage(e.to_string()))?;
    let model = SequenceModel::load(&args.model)?;
    let pred = model.predict(&tokens)?;
    let names = model.schema().names(&pred.labels);
    for (token, label) in tokens.iter().zip(&names) {
        println!("{token}\t{label}");
    }
    println!("confidence\t{:.6}", pred.probability());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

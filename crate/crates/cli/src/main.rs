use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mergescope_core::corpus::CorpusFormat;
use mergescope_core::dataset::{Variant, PULL_REQUEST_CSV};
use mergescope_core::git::Git;
use mergescope_core::metadata::{HttpTransport, MetadataClient, RetryPolicy, SystemClock, DEFAULT_ENDPOINT};
use mergescope_core::pipeline::{self, default_worker_count, PipelineConfig, StageSummary};
use tracing_subscriber::EnvFilter;

const EXIT_ERROR: u8 = 1;
const EXIT_NO_WORK: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

const EXIT_HELP: &str = "\
Exit status:
  0  success
  1  configuration or I/O error (nothing is processed after a configuration error)
  2  invalid command line
  3  no work: the corpus yielded no PR that reached a terminal state
  4  partial: fetch finished but some PRs failed (see run_log.jsonl)";

#[derive(Parser)]
#[command(name = "mergescope", version, about = "Replay pull-request merges locally and build a merge-conflict dataset", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and filter the PR corpus into candidates.jsonl
    Ingest(IngestArgs),
    /// Retrieve per-PR metadata from the GitHub GraphQL API into metadata.jsonl
    Fetch(FetchArgs),
    /// Replay merges from recorded metadata and emit the dataset tables
    Simulate(SimulateArgs),
    /// Compute rates, severity and churn tables from pull_request.csv
    Analyze(AnalyzeArgs),
    /// Run ingest, fetch, simulate and analyze in order
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Raw,
    Clean,
}

#[derive(Args)]
struct OutArgs {
    /// Directory holding stage files, tables and the run log
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: logical processors, at most 8)
    #[arg(long)]
    workers: Option<usize>,
    /// Skip PRs already finished in the run log instead of starting over
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct CorpusArgs {
    /// PR corpus file
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Args)]
struct ApiArgs {
    /// GraphQL endpoint
    #[arg(long, default_value = DEFAULT_ENDPOINT)]
    api_url: String,
    /// Comma-separated API tokens
    #[arg(long, env = "GITHUB_TOKENS", hide_env_values = true)]
    tokens: Option<String>,
    /// File with one token per line (added to GITHUB_TOKENS)
    #[arg(long)]
    tokens_file: Option<PathBuf>,
    /// Requests allowed per token per hour
    #[arg(long)]
    hourly_budget: Option<u32>,
    /// Attempts per PR before giving up
    #[arg(long, default_value_t = 5)]
    max_attempts: u32,
    /// First retry delay in milliseconds; doubles per attempt
    #[arg(long, default_value_t = 2000)]
    retry_base_ms: u64,
    /// Upper bound on a single retry delay in milliseconds
    #[arg(long, default_value_t = 60_000)]
    retry_max_ms: u64,
    /// HTTP request timeout in seconds
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

#[derive(Args)]
struct SimArgs {
    /// Clone cache shared across runs
    #[arg(long, default_value = ".mergescope-cache")]
    cache_dir: PathBuf,
    /// Never clone or fetch; use cached clones only
    #[arg(long)]
    offline: bool,
    /// Lines of each side kept in region previews
    #[arg(long, default_value_t = 5)]
    preview_lines: usize,
    /// Table variant: raw keeps pipeline-internal columns
    #[arg(long, value_enum, default_value = "clean")]
    variant: VariantArg,
    /// Prefix joined with owner/repository to form clone URLs
    #[arg(long, default_value = "https://github.com/")]
    remote_base: String,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct FetchArgs {
    #[command(flatten)]
    api: ApiArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// pull_request.csv to analyze (default: <out>/pull_request.csv)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory for the analysis tables
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    api: ApiArgs,
    #[command(flatten)]
    sim: SimArgs,
    #[command(flatten)]
    out: OutArgs,
}

fn base_config(out: &OutArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::new(&out.out, ".mergescope-cache");
    cfg.resume = out.resume;
    cfg.worker_count = out.workers.unwrap_or_else(default_worker_count);
    if cfg.worker_count == 0 {
        bail!("--workers must be at least 1");
    }
    Ok(cfg)
}

fn apply_corpus(cfg: &mut PipelineConfig, args: &CorpusArgs) {
    cfg.corpus_path = Some(args.corpus.clone());
    cfg.format = match args.format {
        FormatArg::Csv => CorpusFormat::Csv,
        FormatArg::Jsonl => CorpusFormat::Jsonl,
    };
}

fn read_tokens(args: &ApiArgs) -> Result<Vec<String>> {
    let mut tokens: Vec<String> = args.tokens.iter().flat_map(|t| t.split(',')).map(str::to_string).collect();
    if let Some(path) = &args.tokens_file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        tokens.extend(text.lines().flat_map(|l| l.split(',')).map(str::to_string));
    }
    tokens.retain(|t| !t.trim().is_empty());
    Ok(tokens.into_iter().map(|t| t.trim().to_string()).collect())
}

fn apply_api(cfg: &mut PipelineConfig, args: &ApiArgs) -> Result<()> {
    if args.max_attempts == 0 {
        bail!("--max-attempts must be at least 1");
    }
    cfg.tokens = read_tokens(args)?;
    cfg.api_url = args.api_url.clone();
    cfg.hourly_budget = args.hourly_budget;
    cfg.retry_policy = RetryPolicy {
        max_attempts: args.max_attempts,
        base_delay: Duration::from_millis(args.retry_base_ms),
        max_delay: Duration::from_millis(args.retry_max_ms.max(args.retry_base_ms)),
        ..RetryPolicy::default()
    };
    Ok(())
}

fn apply_sim(cfg: &mut PipelineConfig, args: &SimArgs) -> Result<()> {
    if args.preview_lines == 0 {
        bail!("--preview-lines must be at least 1");
    }
    cfg.cache_dir = args.cache_dir.clone();
    cfg.offline = args.offline;
    cfg.preview_lines = args.preview_lines;
    cfg.remote_base = args.remote_base.clone();
    cfg.variant = match args.variant {
        VariantArg::Raw => Variant::Raw,
        VariantArg::Clean => Variant::Clean,
    };
    Ok(())
}

fn client(cfg: &PipelineConfig, args: &ApiArgs) -> Result<MetadataClient> {
    let transport = HttpTransport::new(Duration::from_secs(args.timeout_secs)).context("building HTTP client")?;
    Ok(pipeline::metadata_client(cfg, Arc::new(transport), Arc::new(SystemClock))?)
}

fn git() -> Result<Git> {
    let git = Git::default();
    let (major, minor, patch) = git.check_version()?;
    tracing::debug!("using git {major}.{minor}.{patch}");
    Ok(git)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summaries serialize"));
}

fn stage_exit(summary: &StageSummary) -> u8 {
    if summary.processed == 0 && summary.skipped == 0 {
        eprintln!("no work: nothing to process");
        EXIT_NO_WORK
    } else if summary.failures() > 0 {
        EXIT_PARTIAL
    } else {
        0
    }
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Ingest(args) => {
            let mut cfg = base_config(&args.out)?;
            apply_corpus(&mut cfg, &args.corpus);
            let summary = pipeline::run_ingest(&cfg)?;
            print_json(&summary);
            Ok(if summary.retained == 0 {
                eprintln!("no work: no candidate PRs in the corpus");
                EXIT_NO_WORK
            } else {
                0
            })
        }
        Command::Fetch(args) => {
            let mut cfg = base_config(&args.out)?;
            apply_api(&mut cfg, &args.api)?;
            let client = client(&cfg, &args.api)?;
            let summary = pipeline::run_fetch(&cfg, &client)?;
            print_json(&summary);
            Ok(stage_exit(&summary))
        }
        Command::Simulate(args) => {
            let mut cfg = base_config(&args.out)?;
            apply_sim(&mut cfg, &args.sim)?;
            let git = git()?;
            let (summary, _manifest) = pipeline::run_simulate(&cfg, &git)?;
            print_json(&summary);
            Ok(if summary.processed == 0 && summary.skipped == 0 {
                eprintln!("no work: nothing to simulate");
                EXIT_NO_WORK
            } else {
                0
            })
        }
        Command::Analyze(args) => {
            let input = args.input.unwrap_or_else(|| args.out.join(PULL_REQUEST_CSV));
            let output = pipeline::run_analyze(&input, &args.out)?;
            print_json(&output.summary);
            Ok(if output.agent_rows == 0 {
                eprintln!("no work: no simulated PRs in {}", input.display());
                EXIT_NO_WORK
            } else {
                0
            })
        }
        Command::Run(args) => {
            let mut cfg = base_config(&args.out)?;
            apply_corpus(&mut cfg, &args.corpus);
            apply_api(&mut cfg, &args.api)?;
            apply_sim(&mut cfg, &args.sim)?;
            cfg.validate()?;
            let git = git()?;
            // offline runs without tokens replay recorded metadata
            let client = if cfg.tokens.is_empty() && cfg.offline { None } else { Some(client(&cfg, &args.api)?) };
            let summary = pipeline::run_pipeline(&cfg, client.as_ref(), &git)?;
            print_json(&summary.terminal);
            if summary.terminal_count() == 0 {
                eprintln!("no work: no PR reached a terminal state");
                return Ok(EXIT_NO_WORK);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("MERGESCOPE_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}


mod commands;
mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rarrg::losses::Reduction;
use rarrg::Error;

use config::PipelineConfig;

/// Retrieval-augmented radiology report generation.
///
/// Settings come from built-in defaults, then `--config`, then `RA_RRG_*`
/// environment variables, then flags.
#[derive(Parser)]
#[command(name = "rarrg", version)]
struct Cli {
    /// Flat JSON config with `section.field` keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Hash,
    File,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReductionArg {
    Sum,
    Mean,
}

#[derive(Args)]
struct ProviderArgs {
    /// Phrase embedding provider [default: hash].
    #[arg(long, value_enum)]
    provider: Option<ProviderKind>,
    /// Embedding dimension [default: decoder.d_embed].
    #[arg(long)]
    dim: Option<usize>,
    /// Phrase table for the file provider.
    #[arg(long)]
    provider_path: Option<PathBuf>,
    /// Embedding endpoint for the remote provider.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    timeout_ms: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Turn RadGraph-style annotations (JSON lines) into key phrases.
    ExtractPhrases {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed a phrase list and write a key-phrase index.
    BuildIndex {
        /// JSON lines: strings or objects with phrase lists.
        #[arg(long)]
        phrases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Train the phrase decoder and write a checkpoint.
    Train {
        /// `synthetic`, or a directory holding train.jsonl and val.jsonl.
        #[arg(long, default_value = "synthetic")]
        corpus: String,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV [default: <out>.history.csv].
        #[arg(long)]
        history: Option<PathBuf>,
        /// How per-example losses combine over a batch [default: mean].
        #[arg(long, value_enum)]
        loss_reduction: Option<ReductionArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Peak learning rate [default: 2e-4].
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Weight of the selection term [default: 0.5].
        #[arg(long)]
        mu: Option<f64>,
        /// Weight of the contrastive term [default: 0.1].
        #[arg(long)]
        lambda_sc: Option<f64>,
        /// Number of decoder queries [default: 50].
        #[arg(long)]
        num_queries: Option<usize>,
        /// Number of decoder layers [default: 6].
        #[arg(long)]
        num_layers: Option<usize>,
        /// Disable the training-time embedding noise.
        #[arg(long)]
        no_noise: bool,
        #[command(flatten)]
        provider: ProviderArgs,
    },
    /// Retrieve key phrases for the views of one or more studies.
    Retrieve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        /// A JSON study or JSON lines of studies.
        #[arg(long)]
        study: PathBuf,
        /// Selection probability threshold [default: 0.4].
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Retrieve key phrases and generate a report per study.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        study: PathBuf,
        /// Selection probability threshold [default: 0.4].
        #[arg(long)]
        threshold: Option<f64>,
        /// Text generation backend [default: mock].
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        /// Chat completions URL for the remote backend; the key is read from RA_RRG_API_KEY.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        model: Option<String>,
        /// In-context examples per prompt, 0 to 3 [default: 1].
        #[arg(long)]
        examples: Option<usize>,
        /// Concurrent backend requests [default: 4].
        #[arg(long)]
        max_in_flight: Option<usize>,
    },
    /// Score generated reports against references.
    Evaluate {
        /// JSON lines with id, candidate, reference and optional labels.
        #[arg(long)]
        pairs: PathBuf,
        /// JSON report path [default: stdout].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a metric,value CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Restrict label metrics to the five common observations.
        #[arg(long)]
        subset: bool,
    },
    /// Write a synthetic corpus (train, val, test, vocabulary) to a directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

fn apply_provider(cfg: &mut PipelineConfig, p: ProviderArgs) {
    if let Some(kind) = p.provider {
        cfg.index.provider = match kind {
            ProviderKind::Hash => "hash",
            ProviderKind::File => "file",
            ProviderKind::Remote => "remote",
        }
        .into();
    }
    if p.dim.is_some() {
        cfg.index.dim = p.dim;
    }
    if p.provider_path.is_some() {
        cfg.index.path = p.provider_path;
    }
    if p.endpoint.is_some() {
        cfg.index.endpoint = p.endpoint;
    }
    if let Some(t) = p.timeout_ms {
        cfg.index.timeout_ms = t;
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), |k| std::env::var(k).ok())?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::ExtractPhrases { input, out: path } => {
            let n = commands::extract_phrases(&input, &path)?;
            log::info!("extracted phrases from {n} documents");
        }
        Command::BuildIndex { phrases, out: path, provider } => {
            apply_provider(&mut cfg, provider);
            let index = commands::build_index_cmd(&phrases, &path, &cfg)?;
            log::info!("indexed {} phrases of dimension {}", index.len(), index.dim());
        }
        Command::Train {
            corpus,
            out: path,
            history,
            loss_reduction,
            epochs,
            batch_size,
            lr,
            seed,
            mu,
            lambda_sc,
            num_queries,
            num_layers,
            no_noise,
            provider,
        } => {
            apply_provider(&mut cfg, provider);
            if let Some(r) = loss_reduction {
                cfg.loss.reduction = match r {
                    ReductionArg::Sum => Reduction::Sum,
                    ReductionArg::Mean => Reduction::Mean,
                };
            }
            set(&mut cfg.train.max_epochs, epochs);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.learning_rate, lr);
            set(&mut cfg.train.seed, seed);
            set(&mut cfg.loss.mu, mu);
            set(&mut cfg.loss.lambda_sc, lambda_sc);
            set(&mut cfg.decoder.num_queries, num_queries);
            set(&mut cfg.decoder.num_layers, num_layers);
            if no_noise {
                cfg.train.noise = false;
            }
            commands::train_cmd(&corpus, &path, history.as_deref(), &cfg)?;
        }
        Command::Retrieve {
            ckpt,
            index,
            study,
            threshold,
        } => {
            let t = threshold.unwrap_or(cfg.index.threshold);
            commands::retrieve_cmd(&ckpt, &index, &study, t, &mut out)?;
        }
        Command::Generate {
            ckpt,
            index,
            study,
            threshold,
            backend,
            endpoint,
            model,
            examples,
            max_in_flight,
        } => {
            set(&mut cfg.index.threshold, threshold);
            if let Some(b) = backend {
                cfg.client.backend = match b {
                    BackendKind::Mock => "mock",
                    BackendKind::Remote => "remote",
                }
                .into();
            }
            if endpoint.is_some() {
                cfg.client.endpoint = endpoint;
            }
            set(&mut cfg.client.model, model);
            set(&mut cfg.templates.examples, examples);
            set(&mut cfg.client.max_in_flight, max_in_flight);
            commands::generate_cmd(&ckpt, &index, &study, &cfg, &mut out)?;
        }
        Command::Evaluate { pairs, out: path, csv, subset } => {
            commands::evaluate_cmd(&pairs, path.as_deref(), csv.as_deref(), subset, &mut out)?;
        }
        Command::Synth { out: path } => {
            commands::synth_cmd(&path, &cfg)?;
            log::info!("wrote corpus to {}", Path::new(&path).display());
        }
    }
    out.flush()?;
    Ok(())
}

/// 2 for bad input, 3 for external services, 4 for numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::External(_)) => 3,
        Some(Error::NonFinite(_) | Error::Degenerate(_)) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

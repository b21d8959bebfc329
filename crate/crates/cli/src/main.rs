use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use slotintent::corpus::{Language, DEFAULT_MAX_WORDS};
use slotintent::models::ModelKind;
use slotintent_cli::commands::{data_stats_command, evaluate_command, gradcheck_command, predict_command, train_command};
use slotintent_cli::config::{parse_config_str, Overrides, RunConfig};
use slotintent_cli::{exit_code, UsageError, EXIT_FAILURE};

#[derive(Parser)]
#[command(name = "slotintent", version, about = "Slot filling and intent classification for spoken-language understanding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, run manifest, epoch log and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled corpus.
    Evaluate(EvaluateArgs),
    /// Tag sentences (one per line) and print them in corpus format.
    Predict(PredictArgs),
    /// Finite-difference gradient check on tiny instances of a model kind.
    Gradcheck(GradcheckArgs),
    /// Print corpus statistics.
    DataStats(DataStatsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (`key = value`, optional `[kind]` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model kind: ner, svm, unified, joint-bert or co-interactive.
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Pretrained word vectors.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Extra `key=value` setting, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Per-token vectors for models trained on external vectors.
    #[arg(long)]
    vectors: Option<PathBuf>,
    /// Also write metrics.txt and metrics.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of `key: value` lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A single sentence.
    #[arg(long, conflicts_with = "input")]
    text: Option<String>,
    /// File with one sentence per line; `-` reads standard input.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    model: ModelKind,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Added to every analytic gradient; a nonzero value must make the check fail.
    #[arg(long, default_value_t = 0.0, hide = true)]
    perturb: f64,
}

#[derive(Args)]
struct DataStatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Token normalization: en or el.
    #[arg(long, default_value = "en")]
    language: Language,
    #[arg(long, default_value_t = DEFAULT_MAX_WORDS)]
    max_words: usize,
}

fn resolve_train(args: &TrainArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| UsageError(format!("config: cannot read {}: {e}", p.display())))?;
            Some(parse_config_str(&text)?)
        }
        None => None,
    };
    let base = args
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let ov = Overrides {
        kind: args.model,
        seed: args.seed,
        out: args.out.clone(),
        corpus: args.corpus.clone(),
        embeddings: args.embeddings.clone(),
        set: args.set.clone(),
    };
    Ok(RunConfig::resolve(file.as_ref(), &base, &ov)?)
}

fn read_lines(args: &PredictArgs) -> Result<Vec<String>> {
    match (&args.text, &args.input) {
        (Some(t), _) => Ok(vec![t.clone()]),
        (None, Some(p)) if p.as_os_str() == "-" => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s.lines().map(str::to_string).collect())
        }
        (None, Some(p)) => {
            if !p.is_file() {
                return Err(UsageError(format!("input: {} does not exist", p.display())).into());
            }
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(s.lines().map(str::to_string).collect())
        }
        (None, None) => Err(UsageError("predict needs --text or --input".into()).into()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let run = resolve_train(&args)?;
            let outcome = train_command(&run)?;
            println!("checkpoint: {}", run.out.display());
            println!("epochs: {}", outcome.epochs.len());
            if let Some(last) = outcome.epochs.last() {
                println!("final_train_loss: {}", last.train_loss);
            }
            print!("{}", outcome.train_metrics.to_text());
            if let Some(t) = &outcome.test_metrics {
                println!("# test");
                print!("{}", t.to_text());
            }
        }
        Command::Evaluate(args) => {
            let report = evaluate_command(&args.checkpoint, &args.corpus, args.vectors.as_deref(), args.out.as_deref())?;
            if args.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Predict(args) => {
            let lines = read_lines(&args)?;
            print!("{}", predict_command(&args.checkpoint, &lines, args.vectors.as_deref())?);
        }
        Command::Gradcheck(args) => {
            let outcome = gradcheck_command(args.model, args.seed, args.perturb)?;
            print!("{}", outcome.text);
            if !outcome.passed {
                return Ok(ExitCode::from(EXIT_FAILURE as u8));
            }
        }
        Command::DataStats(args) => {
            print!("{}", data_stats_command(&args.corpus, args.language, args.max_words)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tbve_core::editing::{FadeShape, Fusion, DEFAULT_CROSSFADE_MS};
use tbve_core::error::Error as CoreError;

/// Exit status 1 is an internal failure, 2 a problem with the input.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match e.root() {
            CoreError::Io(io) => match io.kind() {
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied | std::io::ErrorKind::InvalidData => 2,
                _ => 1,
            },
            CoreError::NonFiniteLoss { .. } | CoreError::Provider(_) => 1,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tbve", version, about = "Text-based voice editing: prepare data, train, edit, evaluate, serve")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract features, validate alignments and cache embeddings.
    PrepareData {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a small synthetic corpus (manifest, lexicon, WAVs).
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        speakers: usize,
        #[arg(long, default_value_t = 4)]
        utterances: usize,
    },
    /// Train an acoustic model on a prepared data directory.
    Train(TrainArgs),
    /// Replace words in a prepared recording.
    Edit(EditArgs),
    /// Collect metrics from edit sidecars into JSONL and a summary table.
    Eval {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to `<results>/metrics.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write utterance embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service. Flags override the TBVE_* environment.
    Serve {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dotted override, e.g. `train.steps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue from a checkpoint; the model section is taken from it.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train on these utterances only. Repeatable.
    #[arg(long = "utterance")]
    utterances: Vec<String>,
    /// Print a progress line every N steps.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Vocoded,
    Raw,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ShapeArg {
    Linear,
    RaisedCosine,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    utterance: String,
    /// Word span `i:j`, half-open.
    #[arg(long, value_parser = parse_span)]
    span: [usize; 2],
    #[arg(long)]
    text: String,
    /// Output WAV; the sidecar goes next to it with a `.json` extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "vocoded")]
    fusion: FusionArg,
    #[arg(long, default_value_t = DEFAULT_CROSSFADE_MS)]
    crossfade_ms: f64,
    #[arg(long, value_enum, default_value = "raised-cosine")]
    crossfade_shape: ShapeArg,
    #[arg(long)]
    force_durations: bool,
    #[arg(long)]
    tts_baseline: bool,
    #[arg(long)]
    no_metrics: bool,
}

fn parse_span(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s
        .split_once(':')
        .or_else(|| s.split_once(','))
        .ok_or_else(|| format!("span '{s}' must look like i:j"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("'{v}' is not a word index"));
    Ok([parse(a)?, parse(b)?])
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Vocoded => Fusion::Vocoded,
            FusionArg::Raw => Fusion::Raw,
        }
    }
}

impl From<ShapeArg> for FadeShape {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Linear => FadeShape::Linear,
            ShapeArg::RaisedCosine => FadeShape::RaisedCosine,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::PrepareData { manifest, lexicon, out } => commands::prepare_data(&manifest, &lexicon, &out),
        Command::ToyCorpus { out, speakers, utterances } => commands::toy_corpus(&out, speakers, utterances, seed.unwrap_or(0)),
        Command::Train(args) => commands::train(args, seed),
        Command::Edit(args) => commands::edit(args, seed.unwrap_or(0)),
        Command::Eval { results, out } => commands::eval(&results, out.as_deref()),
        Command::ExportEmbeddings { data_dir, out } => commands::export_embeddings(&data_dir, &out),
        Command::Serve {
            data_dir,
            port,
            workers,
            lexicon,
        } => commands::serve(data_dir, port, workers, lexicon),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

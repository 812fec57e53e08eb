//! `wmrobust`: train, evaluate and apply robust watermarking models.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode as ProcessExit;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CliError, ExitCode};

#[derive(Parser, Debug)]
#[command(name = "wmrobust", version, about = "Robust CNN watermarking with worst-case attack training")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train encoder, decoder and discriminator.
    Train(TrainArgs),
    /// No-attack bit accuracy and PSNR of a checkpoint.
    Evaluate(EvalArgs),
    /// Bit accuracy over attack severity grids.
    Sweep(SweepArgs),
    /// Compare sweep tables of several models.
    Compare(CompareArgs),
    /// Embed a message into one image.
    Embed(EmbedArgs),
    /// Decode the message from one image.
    Extract(ExtractArgs),
    /// Print checkpoint metadata.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    WorstCase,
    FixedSeverity,
}

#[derive(Args, Debug)]
struct OutRoot {
    /// Output location; defaults to $WMROBUST_OUT.
    #[arg(long, env = "WMROBUST_OUT", default_value = "wmrobust-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training images (directory or manifest file).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Attack list, e.g. `crop=0.1:0.8:0.1,dropout@0.3,gaussian_blur`.
    #[arg(long)]
    attacks: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Use at most this many training images.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    out: OutRoot,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Attack grids to sweep; defaults to the checkpoint's training grids
    /// extended by one step at each end.
    #[arg(long)]
    attacks: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
    /// Add JPEG rows through a real encode/decode round trip.
    #[arg(long)]
    true_jpeg: bool,
    /// Label for the model in the table; defaults to the checkpoint name.
    #[arg(long)]
    model_id: Option<String>,
    /// Also write one SVG plot per attack into this directory.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// CSV to write; defaults to `$WMROBUST_OUT/sweep-<model>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Sweep CSV files, one per model.
    #[arg(required = true, num_args = 2..)]
    tables: Vec<PathBuf>,
    #[command(flatten)]
    out: OutRoot,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    image: PathBuf,
    /// Message as a string of `0`/`1` of the model's length.
    #[arg(long, conflicts_with = "seed")]
    message: Option<String>,
    /// Draw a random message from this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output image (PNG recommended).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    image: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(commands::TrainRequest {
            config: a.config,
            data: a.data,
            seed: a.seed,
            attacks: a.attacks,
            mode: a.mode.map(|m| match m {
                Mode::WorstCase => wmrobust_core::TrainMode::WorstCase,
                Mode::FixedSeverity => wmrobust_core::TrainMode::FixedSeverity,
            }),
            epochs: a.epochs,
            limit: a.limit,
            out: a.out.out,
        }),
        Command::Evaluate(a) => commands::evaluate(&a.checkpoint, &a.data, a.seed, a.limit),
        Command::Sweep(a) => commands::sweep(commands::SweepRequest {
            checkpoint: a.checkpoint,
            data: a.data,
            attacks: a.attacks,
            seed: a.seed,
            limit: a.limit,
            true_jpeg: a.true_jpeg,
            model_id: a.model_id,
            plots: a.plots,
            out: a.out,
        }),
        Command::Compare(a) => commands::compare(&a.tables, &a.out.out),
        Command::Embed(a) => commands::embed(&a.checkpoint, &a.image, a.message.as_deref(), a.seed, &a.out),
        Command::Extract(a) => commands::extract(&a.checkpoint, &a.image),
        Command::Inspect(a) => commands::inspect(&a.checkpoint),
    }
}

fn main() -> ProcessExit {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ProcessExit::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).record());
            return ProcessExit::from(ExitCode::Usage as u8);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ProcessExit::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.record());
            ProcessExit::from(e.code as u8)
        }
    }
}

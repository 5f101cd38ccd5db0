use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use ibpica::inference::UpdateMode;
use ibpica::pipeline::{run_command, Command, Overrides, RunConfig};
use ibpica::Error;

#[derive(Parser)]
#[command(name = "ibpica", version, about = "Nonparametric sparse ICA feature learning for video")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic ground-truth bundle.
    Synth(Args),
    /// Fit a model to a matrix or a stacked network to videos.
    Train(Args),
    /// Compute dense features of videos with a trained network.
    Extract(Args),
    /// Fit or apply a codebook and write bag-of-features histograms.
    Quantize(Args),
}

#[derive(clap::Args)]
struct Args {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Update equations: exact or as-printed.
    #[arg(long)]
    updates: Option<UpdateMode>,
    /// Number of network layers (1 or 2).
    #[arg(long)]
    layers: Option<usize>,
}

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn fail(code: u8, kind: &str, message: String, field: Option<String>) -> ExitCode {
    let mut err = json!({ "error": kind, "message": message });
    if let Some(field) = field {
        err["field"] = json!(field);
    }
    eprintln!("{err}");
    ExitCode::from(code)
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("IBPICA_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("IBPICA_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Synth(a) => (Command::Synth, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Extract(a) => (Command::Extract, a),
        Cmd::Quantize(a) => (Command::Quantize, a),
    };
    if let Err(message) = configure_threads() {
        return fail(EXIT_CONFIG, "config", message, Some("IBPICA_THREADS".into()));
    }
    let text = match std::fs::read_to_string(&args.config) {
        Ok(text) => text,
        Err(e) => return fail(EXIT_CONFIG, "config", format!("{}: {e}", args.config.display()), None),
    };
    let mut config = match RunConfig::parse(&text) {
        Ok(config) => config,
        Err(d) => return fail(EXIT_CONFIG, "config", d.message, Some(d.path)),
    };
    let overrides = Overrides { seed: args.seed, updates: args.updates, layers: args.layers };
    if let Err(e) = config.apply(&overrides) {
        return fail(EXIT_CONFIG, "config", e.to_string(), None);
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    match run_command(command, &config, base) {
        Ok(report) => {
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => fail(EXIT_CONFIG, "config", e.to_string(), None),
        Err(e) => fail(EXIT_RUNTIME, error_kind(&e), e.to_string(), None),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Domain { .. } => "domain",
        Error::Numerical(_) | Error::AtIteration { .. } => "numerical",
        Error::DimensionMismatch { .. } => "dimension_mismatch",
        Error::PruneAll { .. } => "prune_all",
        Error::InsufficientPatches { .. } => "insufficient_patches",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

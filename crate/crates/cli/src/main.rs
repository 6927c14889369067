use std::path::PathBuf;
use std::process::ExitCode;

use chanquant::pipeline::{self, Command, Format, PipelineConfig};
use clap::{Parser, Subcommand, ValueEnum};

/// Per-channel static quantization pipeline for a toy transformer block.
#[derive(Debug, Parser)]
#[command(name = "chanquant", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Pipeline config (JSON). Defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Collect per-layer activation statistics.
    Calibrate,
    /// Plan, fold, clip, quantize and compensate; writes the artifact.
    Quantize,
    /// Compare the artifact's variants with the fp block.
    Eval,
    /// Time gather against per-token quantize+dequantize.
    Bench,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

fn run(cli: &Cli) -> chanquant::Result<PathBuf> {
    let (mut cfg, raw) = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::from_json("{}")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let command = match cli.command {
        Cmd::Calibrate => Command::Calibrate,
        Cmd::Quantize => Command::Quantize,
        Cmd::Eval => Command::Eval,
        Cmd::Bench => Command::Bench,
    };
    let format = match cli.format {
        OutputFormat::Json => Format::Json,
        OutputFormat::Csv => Format::Csv,
    };
    let (_, path) = pipeline::run(command, &cfg, &raw, &cli.out, format)?;
    Ok(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

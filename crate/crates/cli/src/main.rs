use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use t2d::commands;
use t2d::config::Config;
use t2d::error::Result;

/// Thickened-2D volumetric segmentation: synthetic data, training,
/// sliding-window inference, evaluation, and cost accounting.
///
/// Any `--section.key=value` argument overrides the matching config file
/// entry; unknown keys are rejected.
#[derive(Parser)]
#[command(name = "t2d", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file (`# comments` and blank lines allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Top-level seed; wins over the config file. Everything random in a
    /// run derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    Generate(CommonArgs),
    /// Train a segmentation network on a generated dataset.
    Train(CommonArgs),
    /// Run sliding-window inference over one volume.
    Predict(CommonArgs),
    /// Score prediction volumes against ground-truth masks.
    Evaluate(CommonArgs),
    /// Sweep fusion modes and slice thicknesses on a shared dataset.
    Ablate(CommonArgs),
    /// Report analytic window counts and MAC costs per windowing scheme.
    Bench(CommonArgs),
}

/// Splits argv into clap arguments and `--section.key=value` overrides.
/// Only dotted keys are treated as overrides, so `--out=dir` still reaches
/// clap.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(body) = a.strip_prefix("--") {
            if let Some((key, value)) = body.split_once('=') {
                if key.contains('.') {
                    overrides.push((key.to_string(), value.to_string()));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn run() -> Result<u8> {
    let (argv, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    Ok(0)
                }
                _ => {
                    eprint!("{e}");
                    Ok(1)
                }
            };
        }
    };
    let (common, run_cmd): (&CommonArgs, fn(Config, &std::path::Path) -> Result<()>) =
        match &cli.command {
            Command::Generate(c) => (c, commands::cmd_generate),
            Command::Train(c) => (c, commands::cmd_train),
            Command::Predict(c) => (c, commands::cmd_predict),
            Command::Evaluate(c) => (c, commands::cmd_evaluate),
            Command::Ablate(c) => (c, commands::cmd_ablate),
            Command::Bench(c) => (c, commands::cmd_bench),
        };
    let cfg = Config::from_sources(common.config.as_deref(), &overrides, common.seed)?;
    run_cmd(cfg, &common.out)?;
    Ok(0)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use posthoc_core::runtime::ExitMode;

#[derive(Debug, Parser)]
#[command(
    name = "posthoc",
    version,
    about = "Router calibration and post-hoc early-exit generation"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one router per checkpoint layer and write a router bank.
    Calibrate(CalibrateArgs),
    /// Generate from a prompt with post-hoc exits.
    Generate(GenerateArgs),
    /// Prefill exit rates over a list of thresholds.
    Sweep(SweepArgs),
    /// Resolve model components from a structure manifest.
    Probe(ProbeArgs),
    /// Print a router bank's metadata and training statistics.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model config file (`key = value` lines). Defaults to the built-in tiny model.
    #[arg(long)]
    model_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Corpus file (one document per line) or directory (one per file).
    #[arg(long)]
    corpus: PathBuf,
    /// Output router bank.
    #[arg(long)]
    out: PathBuf,
    /// Statistics sidecar (default: `<out>.summary.json`).
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long, default_value_t = 0.98)]
    tau: f32,
    #[arg(long, default_value_t = 4)]
    interval: usize,
    /// Router bottleneck (default: min(128, d/2)).
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    /// Leave the last layer without a router.
    #[arg(long)]
    exclude_final_layer: bool,
    #[arg(long, env = "POSTHOC_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExitArgs {
    /// Exit threshold θ in (0, 1]; 1.0 disables exits.
    #[arg(long, default_value_t = 0.85)]
    theta: f32,
    #[arg(long, default_value_t = 0)]
    k_min: usize,
    /// per-token or batch-unanimous.
    #[arg(long, default_value = "per-token")]
    mode: ExitMode,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Router bank; without it the baseline model runs.
    #[arg(long)]
    routers: Option<PathBuf>,
    /// Prompt text, or a path to a file holding it.
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    exit: ExitArgs,
    #[arg(long, default_value_t = 256)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0.0)]
    temperature: f32,
    #[arg(long, env = "POSTHOC_SEED", default_value_t = 0)]
    seed: u64,
    /// JSON report output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    routers: PathBuf,
    /// File with one prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, default_value_t = 16)]
    max_prompts: usize,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.85,0.7,0.5")]
    thetas: Vec<f32>,
    #[arg(long, default_value_t = 0)]
    k_min: usize,
    #[arg(long, default_value = "per-token")]
    mode: ExitMode,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    routers: PathBuf,
    /// Statistics sidecar (default: `<routers>.summary.json` when present).
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Generate(a) => commands::generate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Probe(a) => commands::probe(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

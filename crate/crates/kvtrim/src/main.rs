use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kvtrim::commands::{self, threads_from_env};
use kvtrim::{CliError, Options};

#[derive(Parser)]
#[command(name = "kvtrim", version, about = "KV-cache channel pruning, eviction and quantization workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Workload seed (overrides `workload.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Prefill + decode every head, verify against references, write report and snapshot.
    Run(Common),
    /// Attention energy spectrum and cache magnitude maps as CSV.
    Analyze(Common),
    /// Analytic memory report for each key pruning ratio in the sweep.
    Report(Common),
}

fn execute(cli: Cli) -> Result<String, CliError> {
    let threads = threads_from_env()?;
    let opts = |a: &Common| Options { out: a.out.clone(), seed: a.seed, threads };
    match &cli.command {
        Command::Run(a) => {
            let r = commands::run(&a.config, &opts(a))?;
            Ok(format!("run ok: {} bytes ({:.4} reduction)", r.measured_bytes, r.memory.reduction_fraction))
        }
        Command::Analyze(a) => {
            let r = commands::analyze(&a.config, &opts(a))?;
            Ok(format!("analyze ok: {} singular values", r.spectrum.len()))
        }
        Command::Report(a) => {
            let r = commands::report(&a.config, &opts(a))?;
            Ok(format!("report ok: {} sweep entries", r.entries.len()))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("kvtrim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

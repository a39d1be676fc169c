//! Command-line front end: verification sweeps, latency benchmarks, toy
//! training runs, and cost-model tables, all with machine-readable output.

mod analyze;
mod args;
mod bench;
mod report;
mod train_cmd;
mod verify;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mglu",
    version,
    about = "Masked gated linear units: fused-kernel verification, benchmarks, training, cost analysis"
)]
struct Cli {
    /// Worker threads for kernel and batch parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle equivalence, complementarity, split-K, packing,
    /// gradient, and routing checks.
    Verify(verify::VerifyArgs),
    /// Measure naive, fused, and gated-baseline forward latency.
    Bench(bench::BenchArgs),
    /// Train a toy model from a JSON config.
    Train(train_cmd::TrainArgs),
    /// Print cost-model rows for the layer family.
    Analyze(analyze::AnalyzeArgs),
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // Ignore failure: the global pool can only be set once.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    let result = match &cli.command {
        Command::Verify(args) => verify::run(args),
        Command::Bench(args) => bench::run(args),
        Command::Train(args) => train_cmd::run(args),
        Command::Analyze(args) => analyze::run(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

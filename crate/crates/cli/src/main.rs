use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedshrink_cli::{cmd_report, cmd_run, cmd_sweep, GlobalOpts};

/// Federated-learning simulator with adaptive layer-wise weight shrinking.
#[derive(Parser)]
#[command(name = "fedshrink", version, about)]
struct Cli {
    /// Override every run seed (model init, partition, FL loop); for sweeps,
    /// replaces the seed list.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    /// Override the output directory from the config/spec.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Worker threads (client training for `run`, concurrent cells for `sweep`).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment from a TOML config.
    Run { config: PathBuf },
    /// Run a one-axis sweep from a TOML sweep spec.
    Sweep { spec: PathBuf },
    /// Emit plot-ready TSV files from a run or sweep directory.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let opts = GlobalOpts {
        seed_override: cli.seed_override,
        output_dir: cli.output_dir,
        threads: cli.threads,
    };
    let result = match &cli.command {
        Command::Run { config } => cmd_run(config, &opts).map(|dir| {
            println!("run complete: {}", dir.display());
        }),
        Command::Sweep { spec } => cmd_sweep(spec, &opts).map(|dir| {
            println!("sweep complete: {}", dir.display());
        }),
        Command::Report { dir } => cmd_report(dir).map(|files| {
            for f in files {
                println!("wrote {}", f.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

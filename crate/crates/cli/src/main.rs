use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scout_cli::{cmd_calibrate, cmd_run, cmd_simulate, cmd_sweep, CliError, RunConfig};
use scout_core::cost_model::{Strategy, SweepAxis};

#[derive(Parser)]
#[command(name = "scout", about = "Layer-ahead sparse attention experiments on a toy decoder")]
struct Cli {
    /// TOML configuration; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Decoder seed, overriding `[decoder] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run the coprocessor inline instead of on a worker thread.
    #[arg(long, global = true)]
    serial: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prefill and decode the toy workload, verifying against the oracles.
    Run,
    /// Profile recall-free decoding and write a recall schedule.
    Calibrate,
    /// Simulate the timeline of each strategy.
    Simulate {
        /// Comma-separated subset of full_kv, recall_prefetch, co_attention, scout.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<Strategy>,
    },
    /// Sweep one cost-model axis.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.decoder.seed = seed;
    }
    if cli.serial {
        cfg.engine.deterministic_serial = true;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Run => cmd_run(&cfg),
        Command::Calibrate => cmd_calibrate(&cfg),
        Command::Simulate { strategies } => cmd_simulate(&cfg, strategies),
        Command::Sweep { axis, values } => cmd_sweep(&cfg, *axis, values),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            print!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protodet::cli;

#[derive(Parser)]
#[command(
    name = "protodet",
    about = "Prototype-pool open-vocabulary detection on synthetic scenes",
    version
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the hierarchical prototype pool from teacher data
    BuildPool {
        /// Run configuration (falls back to $PROTODET_CONFIG, then defaults)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output pool file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dual-stream detector against a pool file
    Train {
        /// Run configuration (falls back to $PROTODET_CONFIG, then defaults)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Pool file from `build-pool` (falls back to pool_path in config)
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Output checkpoint (falls back to out_path in config)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics stream, one JSON record per logging interval
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint over a scene file (no teacher required)
    Eval {
        /// Checkpoint from `train`
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene file (JSON lines; falls back to data_path in config)
        #[arg(long)]
        data: Option<PathBuf>,
        /// Which categories the headline metric covers: base|novel|all
        #[arg(long, default_value = "all")]
        split: String,
        /// Output report JSON (falls back to report_path in config)
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Summarize a pool file
    InspectPool {
        /// Pool file to inspect
        #[arg(long)]
        pool: PathBuf,
        /// Also write the pairwise coarse-prototype cosine matrix as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference and gradient-partition audit
    Gradcheck {
        /// Run configuration (falls back to $PROTODET_CONFIG, then defaults)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for the audit instance (falls back to the config seed)
        #[arg(long)]
        seed: Option<u64>,
        /// Testing hook: mislabel one parameter to prove the check can fail
        #[arg(long, hide = true)]
        inject_mislabel: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let outcome = match &args.command {
        Command::BuildPool { config, out } => cli::cmd_build_pool(config.as_deref(), out),
        Command::Train { config, pool, out, metrics } => cli::cmd_train(
            config.as_deref(),
            pool.as_deref(),
            out.as_deref(),
            metrics.as_deref(),
        ),
        Command::Eval { ckpt, data, split, report } => {
            cli::cmd_eval(ckpt, data.as_deref(), split, report.as_deref())
        }
        Command::InspectPool { pool, csv } => cli::cmd_inspect_pool(pool, csv.as_deref()),
        Command::Gradcheck { config, seed, inject_mislabel } => {
            return match cli::cmd_gradcheck(config.as_deref(), *seed, *inject_mislabel) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(1),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(cli::exit_code(&e) as u8)
                }
            };
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}

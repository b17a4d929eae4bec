//! `vqflow`: train, sample and evaluate codebook flow models from one JSON
//! run config.
//!
//! Exit codes: 0 success, 1 tolerance failure, 2 usage or config error,
//! 3 numerical abort.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "vqflow", version, about = "Codebook flow matching: train, sample, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Worker threads. 1 gives byte-reproducible outputs.
    #[arg(long, default_value_t = 1, global = true)]
    threads: usize,
    /// Override a config value: --set optim.lr=3e-4 (repeatable, applied in order).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed; wins over the config file and --set.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints plus metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate code grids from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the sampler section from this run config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Refuse checkpoints trained with a different method.
        #[arg(long)]
        method: Option<String>,
        /// Also write zT.csv with end-state norms and quantization distances.
        #[arg(long)]
        zt_csv: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Posterior fidelity and sample quality against the exact data distribution.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying data, codebook and sampler settings.
        #[arg(long, required_if_eq("oracle", "true"))]
        config: Option<PathBuf>,
        /// Score the Bayes oracle itself in place of a trained model.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Sample at several temperatures and write sweep.csv.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated temperatures.
        #[arg(long, default_value = "0.3,0.6,0.9,1.2,1.5")]
        taus: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train all three methods side by side and write compare.csv.
    Compare {
        /// One run config per method (repeat three times).
        #[arg(long, required = true)]
        config: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        eval_every: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Transport with the exact posterior velocity and check the result.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
        /// Euler steps (defaults to the sampler section).
        #[arg(long)]
        steps: Option<usize>,
        /// Samples (defaults to the sampler section).
        #[arg(long)]
        n: Option<usize>,
        /// Tolerance on the joint TV distance.
        #[arg(long, default_value_t = 0.02)]
        tol: f64,
        /// Write a JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::Eval { common, .. }
            | Command::Sweep { common, .. }
            | Command::Compare { common, .. }
            | Command::OracleCheck { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VQFLOW_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let threads = cli.command.common().threads.max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

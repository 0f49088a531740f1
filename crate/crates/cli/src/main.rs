use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use odebvm::Error;

mod commands;
mod data;

use commands::{cmd_asymptotics, cmd_fit, cmd_simulate, SimulateOverrides};

#[derive(Parser)]
#[command(name = "odebvm", version, about = "Bayesian two-step ODE parameter estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Credible and bootstrap intervals for one dataset.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte-Carlo coverage study.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Directory for resumable per-replication checkpoints.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write the datasets of the first N replications per n.
        #[arg(long, default_value_t = 0)]
        emit_data: usize,
    },
    /// Normal approximation ingredients and a TV diagnostic for one dataset.
    Asymptotics {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 3,
        Error::Parse { .. } => 4,
        Error::Config(_) => 5,
        Error::Domain(_) => 6,
        Error::IllPosedDesign(_) => 7,
        Error::Numeric(_) => 8,
        Error::OptimizationFailure { .. } => 9,
        Error::DegenerateModel(_) => 10,
        Error::Io(_) => 11,
    }
}

fn run(cli: Cli) -> odebvm::Result<()> {
    match cli.command {
        Command::Fit { config, data, out, seed } => {
            let r = cmd_fit(&config, &data, &out, seed)?;
            println!("theta_hat = {:?}", r.theta_hat);
            if let Some(b) = &r.bayes {
                println!("credible intervals = {:?}", b.intervals);
            }
            if let Some(b) = &r.bootstrap {
                println!("bootstrap intervals = {:?}", b.intervals);
            }
        }
        Command::Simulate { config, out, seed, jobs, replications, draws, bootstrap, checkpoint, emit_data } => {
            let ov = SimulateOverrides { seed, replications, draws, bootstrap, jobs, checkpoint_dir: checkpoint, emit_data };
            let m = cmd_simulate(&config, &out, &ov)?;
            println!("wrote {} (config {})", out.join("results.csv").display(), m.config_hash);
        }
        Command::Asymptotics { config, data, out, seed } => {
            let r = cmd_asymptotics(&config, &data, &out, seed)?;
            println!("mu_n = {:?}", r.mu_n);
            println!("tv = {:.4} ({:?})", r.tv.value, r.tv.method);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": { "category": e.category(), "message": e.to_string() } });
            eprintln!("{report}");
            ExitCode::from(exit_code(&e))
        }
    }
}

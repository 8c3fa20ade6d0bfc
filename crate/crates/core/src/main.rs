use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jointgp::cli::{self, Command, Overrides};

#[derive(Parser)]
#[command(name = "jointgp", version, about = "Joint space-height Gaussian process models for signals and outcomes")]
struct Args {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of chains; overrides `sampler.n_chains`.
    #[arg(long, global = true)]
    chains: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Simulate a joint dataset with a holdout split.
    Simulate,
    /// Choose height and spatial knots.
    SelectKnots,
    /// Run the MCMC sampler.
    Fit,
    /// Posterior predictive draws at holdout locations.
    Predict,
    /// Fit and holdout metrics.
    Score,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cmd = match args.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::SelectKnots => Command::SelectKnots,
        Cmd::Fit => Command::Fit,
        Cmd::Predict => Command::Predict,
        Cmd::Score => Command::Score,
    };
    let ov = Overrides {
        seed: args.seed,
        out: args.out,
        chains: args.chains,
    };
    match cli::run(cmd, args.config.as_deref(), &ov) {
        Ok(files) => {
            for f in files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `sda`: simulation runs, TDM tooling, IOD, ledger inspection, residual
//! model training and DIT scores from one binary.
//!
//! Exit status is 0 on success, 1 on domain errors and 2 on usage errors.
//! Every command reports the genesis or configuration digest it ran under on
//! stderr, so stdout stays machine-readable.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sda", version, about = "Decentralized space-domain-awareness ledger and simulator")]
pub struct Cli {
    /// Ledger directory holding genesis.json and chain.log.
    #[arg(long, global = true)]
    pub ledger: Option<PathBuf>,
    /// Seed for every random draw the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output format; each command has its own default.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Network simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Tracking data messages.
    #[command(subcommand)]
    Tdm(TdmCmd),
    /// Initial orbit determination from one or more TDMs.
    Iod {
        #[arg(long = "tdm", required = true)]
        tdms: Vec<PathBuf>,
        /// Site registry: a JSON map from site id to site, or a list of sites.
        #[arg(long)]
        sites: PathBuf,
    },
    /// Ledger inspection and verification.
    #[command(subcommand)]
    Ledger(LedgerCmd),
    /// Propagation-residual model.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Detectability, trackability and identifiability scores.
    #[command(subcommand)]
    Dit(DitCmd),
}

#[derive(Subcommand, Debug)]
pub enum SimCmd {
    /// Runs a scenario file and writes the chain, report and CSV timelines.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validation worker threads; the result does not depend on it.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Prints a built-in scenario as JSON.
    Example {
        #[arg(value_enum)]
        kind: ExampleKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExampleKind {
    Reference,
    Uct,
    Fedprop,
}

#[derive(Subcommand, Debug)]
pub enum TdmCmd {
    /// Parses a KVN TDM and prints it.
    Parse { file: PathBuf },
    /// Synthesizes a TDM of a cataloged object over its next pass.
    Gen {
        #[arg(long)]
        object: String,
        #[arg(long)]
        site: String,
        /// Search start, seconds since J2000; defaults to the ledger time.
        #[arg(long)]
        after: Option<f64>,
        #[arg(long, default_value_t = 1e-4)]
        noise: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validates a TDM against the ledger catalog.
    Validate {
        #[arg(long)]
        tdm: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
pub enum LedgerCmd {
    /// Summarizes the replayed ledger state.
    Inspect {
        /// List the task queue.
        #[arg(long)]
        tasks: bool,
    },
    /// Replays the chain and reports the first bad block.
    Verify,
}

#[derive(Subcommand, Debug)]
pub enum ModelCmd {
    /// Trains on the on-chain calibration samples and prints a proposal.
    Train {
        #[arg(long)]
        account: String,
    },
    /// Holdout RMS of the current global model.
    Eval,
}

#[derive(Subcommand, Debug)]
pub enum DitCmd {
    /// Scores one object over the trailing window
    Score {
        #[arg(long)]
        object: String,
    },
    /// Scores every cataloged object, best first
    Leaderboard,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) if e.is::<commands::Usage>() => {
            eprintln!("error: {e}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

//! `domalign`: batch domain alignment and the toy adaptation pipeline.

mod cmd;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmd::{align::AlignArgs, artifacts::ArtifactArgs, stats::StatsArgs, texture::TextureArgs, toy::ToyArgs};

#[derive(Parser, Debug)]
#[command(name = "domalign", version, about = "Image- and feature-level domain alignment")]
struct Cli {
    /// Worker threads (defaults to all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Photometric (and optionally texture) alignment of a source directory.
    Align(AlignArgs),
    /// Grid search for bilateral-filter parameters.
    TextureOpt(TextureArgs),
    /// PCA, atoms, category centers and thresholds from a feature dump.
    BuildArtifacts(ArtifactArgs),
    /// Runs the synthetic adaptation pipeline.
    ToyAdapt(ToyArgs),
    /// Per-image colour and texture statistics.
    Stats(StatsArgs),
}

/// Failure with its process exit code: 1 internal, 2 usage or configuration.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<domalign::Error> for CliError {
    fn from(e: domalign::Error) -> Self {
        use domalign::Error as E;
        let code = match e {
            E::InvalidConfig(_) | E::Serde(_) | E::EmptyDataset(_) | E::Format { .. } | E::InvalidLabel { .. } => 2,
            E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn run(cli: Cli) -> CliResult {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError { code: 1, message: e.to_string() })?;
    pool.install(|| match cli.command {
        Command::Align(a) => cmd::align::run(a),
        Command::TextureOpt(a) => cmd::texture::run(a),
        Command::BuildArtifacts(a) => cmd::artifacts::run(a),
        Command::ToyAdapt(a) => cmd::toy::run(a),
        Command::Stats(a) => cmd::stats::run(a),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.message, "exit_code": e.code });
            eprintln!("{msg}");
            ExitCode::from(e.code)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use padaforge_core::error::{Error, ErrorClass};
use padaforge_core::pipeline::{PipelineConfig, Stage, Workspace};

#[derive(Parser, Debug)]
#[command(name = "padaforge", version, about = "Principal adversarial domain identification and adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark pool and target
    Synth(Common),
    /// Train the contrastive feature encoder
    Acquire(Common),
    /// Embed every attack domain into a domain pool
    Embed(Common),
    /// Spectral clustering with automatic K
    Cluster(Common),
    /// Choose principal adversarial domains by CEFS
    Select(Common),
    /// Train the multi-source detector on the chosen domains
    Train(Common),
    /// Label every target sample
    Detect(Common),
    /// Write the text summary
    Report(Common),
    /// Run every stage in order
    Pipeline(Common),
}

#[derive(clap::Args, Debug)]
struct Common {
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl Command {
    fn parts(self) -> (Option<Stage>, Common) {
        match self {
            Command::Synth(c) => (Some(Stage::Synth), c),
            Command::Acquire(c) => (Some(Stage::Acquire), c),
            Command::Embed(c) => (Some(Stage::Embed), c),
            Command::Cluster(c) => (Some(Stage::Cluster), c),
            Command::Select(c) => (Some(Stage::Select), c),
            Command::Train(c) => (Some(Stage::Train), c),
            Command::Detect(c) => (Some(Stage::Detect), c),
            Command::Report(c) => (Some(Stage::Report), c),
            Command::Pipeline(c) => (None, c),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::MissingArtifact => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Other => 1,
    }
}

fn threads() -> Result<usize, Error> {
    match std::env::var("PADAFORGE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config("PADAFORGE_THREADS", format!("expected a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    let (stage, common) = cli.command.parts();
    threads()?;
    let mut cfg = match common.config {
        Some(p) => PipelineConfig::load(&p)?,
        None => PipelineConfig::default().with_seed(0)?,
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed)?;
    }
    let ws = Workspace::new(common.out.unwrap_or_else(|| PathBuf::from("padaforge-out")), cfg)?;
    match stage {
        Some(s) => ws.run(s),
        None => ws.pipeline(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("padaforge: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

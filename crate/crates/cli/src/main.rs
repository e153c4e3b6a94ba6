use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use timewarp_cli::config::{Overrides, RunConfig};
use timewarp_cli::{run_stages, CliError, Stage};

#[derive(Parser)]
#[command(
    name = "timewarp",
    version,
    about = "Temporal preference dataset factory and evaluation harness"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "timewarp.toml")]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Plan media commands without executing them.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Rerun stages even when they are up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Load and validate the corpus.
    Ingest,
    /// Trim videos to the clip budget.
    Trim,
    /// Assign shuffled or reversed scene orders.
    Permute,
    /// Plan and execute clip, frame and perturbation media commands.
    Render,
    /// Generate QA and explicit preference pairs.
    GenExplicit,
    /// Generate implicit preference pairs.
    GenImplicit,
    /// Convert explicit pairs to KTO records.
    ToKto,
    /// Merge preference sources into a training mixture.
    Merge,
    /// Build the multiple-choice benchmark.
    BenchMcqa,
    /// Build the temporal order probes.
    BenchProbes,
    /// Score multiple-choice predictions.
    ScoreMcqa,
    /// Score quadruple matching predictions.
    ScoreGroup,
    /// Grade order probe predictions.
    GradeProbes,
    /// Evaluate the preference loss and gradients on a batch.
    VerifyLoss,
    /// Corpus and dataset statistics.
    Stats,
    /// Run every stage in order.
    RunAll,
}

impl Command {
    fn stages(self) -> Vec<Stage> {
        let one = match self {
            Command::Ingest => Stage::Ingest,
            Command::Trim => Stage::Trim,
            Command::Permute => Stage::Permute,
            Command::Render => Stage::Render,
            Command::GenExplicit => Stage::GenExplicit,
            Command::GenImplicit => Stage::GenImplicit,
            Command::ToKto => Stage::ToKto,
            Command::Merge => Stage::Merge,
            Command::BenchMcqa => Stage::BenchMcqa,
            Command::BenchProbes => Stage::BenchProbes,
            Command::ScoreMcqa => Stage::ScoreMcqa,
            Command::ScoreGroup => Stage::ScoreGroup,
            Command::GradeProbes => Stage::GradeProbes,
            Command::VerifyLoss => Stage::VerifyLoss,
            Command::Stats => Stage::Stats,
            Command::RunAll => return Stage::ALL.to_vec(),
        };
        vec![one]
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        dry_run: cli.dry_run,
        output_dir: cli.output_dir.clone(),
    };
    let cfg = RunConfig::load(&cli.config, &overrides)?;
    for status in run_stages(&cfg, &cli.command.stages(), cli.force)? {
        println!("{status}");
    }
    if matches!(cli.command, Command::VerifyLoss) {
        let report = std::fs::read_to_string(cfg.output_dir.join("verify.json"))?;
        print!("{report}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `splitopf`: dataset generation, partitioning, two-stage training,
//! prediction, load-flow restoration and evaluation from one binary.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 solver failure,
//! 4 training abort.

mod commands;
mod config;

use clap::{Parser, Subcommand};

use commands::ModelArg;
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "splitopf", version, about = "Learn AC-OPF solutions with a two-stage spatial decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample load profiles, solve them and write the dataset
    GenData,
    /// Partition the case automatically, or validate --assignment
    Partition,
    /// Train the coupling-boundary model
    TrainStage1,
    /// Train every regional model on the worker pool
    TrainStage2,
    /// Train the monolithic baseline
    TrainDirect,
    /// Predict the test split
    Predict {
        #[arg(long, value_enum)]
        model: ModelArg,
    },
    /// Restore predictions with the load-flow projection and time it
    Loadflow {
        #[arg(long, value_enum)]
        model: ModelArg,
    },
    /// Error and violation reports for a prediction dump
    Evaluate {
        #[arg(long, value_enum)]
        model: ModelArg,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Partition => "partition",
            Command::TrainStage1 => "train-stage1",
            Command::TrainStage2 => "train-stage2",
            Command::TrainDirect => "train-direct",
            Command::Predict { .. } => "predict",
            Command::Loadflow { .. } => "loadflow",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: String) -> Self {
        Failure { code: 2, msg }
    }
}

impl From<splitopf::Error> for Failure {
    fn from(e: splitopf::Error) -> Self {
        let code = match e {
            splitopf::Error::Solver(_) => 3,
            splitopf::Error::Training(_) => 4,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(&cli.overrides)?;
    commands::echo(&cfg, cli.command.name())?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Partition => commands::partition(&cfg),
        Command::TrainStage1 => commands::train_stage1_cmd(&cfg),
        Command::TrainStage2 => commands::train_stage2_cmd(&cfg),
        Command::TrainDirect => commands::train_direct_cmd(&cfg),
        Command::Predict { model } => commands::predict(&cfg, model),
        Command::Loadflow { model } => commands::loadflow(&cfg, model),
        Command::Evaluate { model } => commands::evaluate_cmd(&cfg, model),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(f) = run(&cli) {
        eprintln!("error: {}", f.msg);
        std::process::exit(f.code);
    }
}

//! `eagle`: command-line entry points for the steering pipeline.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 service, 5 infeasible
//! design.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eagle_core::harness::{self, HarnessError, RunConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "eagle", version, about = "Embedding-guided text steering pipeline")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.pg.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit user and item embeddings from the ratings file.
    EmbedFit,
    /// Resolve action features and build the reference design tables.
    DesignBuild,
    /// Clone the training reference into policy parameters.
    RefFit,
    /// Train the policy by KL-regularized policy gradient.
    Train,
    /// Roll out the trained policy and write its trajectories.
    Rollout {
        /// Episodes to roll out; `eval.episodes` when omitted.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate the trained policy against the reference policies.
    Eval,
    /// Check that encoder error is below the catalog's nearest-neighbor gap.
    CheckEncoder,
    /// Print every configuration key with its default.
    ConfigDoc,
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    if let Command::ConfigDoc = cli.command {
        print!("{}", harness::config_doc());
        return Ok(());
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, |k| std::env::var(k).ok())?;
    match cli.command {
        Command::EmbedFit => print_json(&harness::embed_fit(&cfg)?),
        Command::DesignBuild => print_json(&harness::design_build(&cfg)?),
        Command::RefFit => print_json(&harness::ref_fit(&cfg)?),
        Command::Train => print_json(&harness::train_command(&cfg)?),
        Command::Rollout { episodes } => {
            print_json(&harness::rollout_command(&cfg, episodes.unwrap_or(cfg.eval.episodes))?)
        }
        Command::Eval => print_json(&harness::eval_command(&cfg)?),
        Command::CheckEncoder => {
            let check = harness::check_encoder(&cfg)?;
            print_json(&check);
            if !check.passed {
                eprintln!("encoder check failed: mean error is not below the nearest-neighbor gap");
            }
        }
        Command::ConfigDoc => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

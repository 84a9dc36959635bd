use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedfim::harness;

/// Federated edge-learning simulator.
#[derive(Debug, Parser)]
#[command(name = "fedfim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every seed of an experiment and write its metrics.
    Run {
        config: PathBuf,
        /// Override a config key, e.g. `--set round.learning_rate=0.1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; overrides the config and FEDFIM_OUTPUT_DIR.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run a comparison table.
    Compare {
        table: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Validate a config and print the effective configuration.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> fedfim::Result<()> {
    match command {
        Command::Run {
            config,
            overrides,
            output_dir,
        } => {
            let mut cfg = harness::parse_config(&config, &overrides)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            for s in harness::run(&cfg)? {
                println!("{}", s.line());
            }
            Ok(())
        }
        Command::Compare { table, output_dir } => {
            let mut spec = harness::parse_table(&table)?;
            if let Some(dir) = output_dir {
                spec.set_output_dir(dir);
            }
            let (_, text) = harness::compare_and_write(&spec)?;
            print!("{text}");
            Ok(())
        }
        Command::Validate { config, overrides } => {
            let cfg = harness::parse_config(&config, &overrides)?;
            print!("{}", cfg.effective_toml());
            Ok(())
        }
    }
}

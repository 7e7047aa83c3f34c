use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dispersim_cli::config::load;
use dispersim_cli::runner::{plan, run_experiment, RunError};
use dispersim_core::list_admissible_pairs;

#[derive(Parser)]
#[command(name = "dispersim", version, about = "Charge-transfer Schrödinger experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Propagate and evaluate the checks of an experiment config.
    Run {
        config: PathBuf,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; DISPERSIM_THREADS takes precedence.
        #[arg(long)]
        threads: Option<usize>,
        /// Validate and print the plan without propagating.
        #[arg(long)]
        dry_run: bool,
    },
    /// Check a config and print the model validation report.
    Validate { config: PathBuf },
    /// Print the tabulated admissible Strichartz pairs.
    Pairs {
        #[arg(long)]
        dim: usize,
    },
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, RunError> {
    match std::env::var("DISPERSIM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(k) if k > 0 => Ok(Some(k)),
            _ => Err(RunError::Schema(format!("DISPERSIM_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => match flag {
            Some(0) => Err(RunError::Schema("--threads must be positive".into())),
            k => Ok(k),
        },
    }
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn execute(cli: Cli) -> Result<i32, RunError> {
    match cli.command {
        Command::Run { config, out, threads: flag, dry_run } => {
            if let Some(k) = threads(flag)? {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global()
                    .map_err(|e| RunError::Failed(e.into()))?;
            }
            if dry_run {
                let p = plan(&load(&config)?)?;
                print_json(&p.summary());
                return Ok(0);
            }
            let outcome = run_experiment(&config, out.as_deref())?;
            for (name, rec) in &outcome.report {
                println!("{name:<24} {:?}  flags {:?}", rec.status, rec.flags);
            }
            println!("wrote {}", outcome.out_dir.display());
            Ok(outcome.exit_code)
        }
        Command::Validate { config } => {
            let p = plan(&load(&config)?)?;
            print_json(&serde_json::json!({
                "config_hash": p.config_hash,
                "adjustments": p.adjustments,
                "validation": p.validation,
            }));
            Ok(0)
        }
        Command::Pairs { dim } => {
            let count = if dim == 3 { 10 } else { 8 };
            let pairs = list_admissible_pairs(dim, count).map_err(RunError::from)?;
            println!("(p,q)");
            for pair in pairs {
                println!("{}", pair.label());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("dispersim: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code.clamp(0, 255) as u8)
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tracedyn_cli::{configure_threads, load, output_dir, run_and_write, Failure, EXIT_FAILED, EXIT_OK, EXPERIMENTS};

#[derive(Parser)]
#[command(name = "tracedyn", version, about = "Run trace-dynamics experiments from a config file")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute an experiment and write its artifacts.
    Run {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Overrides `seed` from the config.
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
        /// Overrides `out` from the config.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Replace results already present in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        #[arg(long, value_name = "U64")]
        seed: Option<u64>,
    },
    /// List the available experiments.
    List,
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match cli.command {
        Command::List => {
            for (name, about) in EXPERIMENTS {
                println!("{name:<20} {about}");
            }
            Ok(EXIT_OK)
        }
        Command::Validate { config, seed } => {
            let r = load(&config, seed)?;
            println!("{}: valid {} config, sha256 {}", config.display(), r.experiment(), r.hash());
            Ok(EXIT_OK)
        }
        Command::Run {
            config,
            seed,
            out,
            force,
        } => {
            configure_threads()?;
            let mut r = load(&config, seed)?;
            let dir = output_dir(&mut r, out)?;
            let (report, paths) = run_and_write(&r, &dir, force)?;
            for line in &report.lines {
                println!("{line}");
            }
            println!("wrote {} file(s) to {}", paths.len(), dir.display());
            if report.passed {
                println!("PASS {}", r.experiment());
                Ok(EXIT_OK)
            } else {
                println!("FAIL {}", r.experiment());
                Ok(EXIT_FAILED)
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

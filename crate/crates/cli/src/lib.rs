//! Declarative experiment runner for `tracedyn`.
//!
//! A run reads a TOML config, executes one named experiment and writes CSV
//! and JSON artifacts plus a `manifest.json` into the output directory.
//! Exit status: 0 when every embedded check passes, 1 when a check fails or
//! the numerics break down, 2 for configuration and usage errors.

pub mod config;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};

pub use config::{parse_config, ConfigError, ExperimentConfig, Resolved, EXPERIMENTS};
pub use experiments::{run_experiment, Report, RunError};
pub use output::{write_results, Artifact, Manifest};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

pub const THREADS_VAR: &str = "TRACEDYN_THREADS";

/// An error together with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }
}

/// Reads and validates a config file, applying a seed override.
pub fn load(path: &Path, seed: Option<u64>) -> Result<Resolved, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let mut r = parse_config(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        r.config.seed = s;
    }
    Ok(r)
}

/// Caps the worker pool at `TRACEDYN_THREADS` when set.
pub fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::config(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("{THREADS_VAR}: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

pub fn manifest(r: &Resolved, report: &Report) -> Manifest {
    Manifest {
        tool: "tracedyn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        experiment: r.experiment().to_string(),
        seed: r.config.seed,
        config_sha256: r.hash(),
        passed: report.passed,
        artifacts: output::manifest_entries(&report.artifacts),
        config: r.to_json(),
    }
}

/// Output directory from the flag or, failing that, the config. A flag is
/// recorded in the config so the manifest echoes where results went.
pub fn output_dir(r: &mut Resolved, flag: Option<PathBuf>) -> Result<PathBuf, Failure> {
    if let Some(dir) = flag {
        r.config.out = Some(dir.display().to_string());
        return Ok(dir);
    }
    r.config
        .out
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| Failure::config("no output directory: pass --out or set `out` in the config"))
}

/// Runs the experiment and persists its results. Returns the report and the
/// written paths; the caller maps `report.passed` to the exit status.
pub fn run_and_write(r: &Resolved, dir: &Path, force: bool) -> Result<(Report, Vec<PathBuf>), Failure> {
    output::check_target(dir, force).map_err(|e| Failure::config(e.to_string()))?;
    let report = run_experiment(r).map_err(|e| match e {
        RunError::Config(e) => Failure::config(e.to_string()),
        RunError::Numeric(e) => Failure {
            code: EXIT_FAILED,
            message: e.to_string(),
        },
    })?;
    let paths = write_results(dir, &report.artifacts, &manifest(r, &report), force).map_err(|e| match e {
        output::OutputError::Exists(_) => Failure::config(e.to_string()),
        _ => Failure::config(format!("cannot write results: {e}")),
    })?;
    Ok((report, paths))
}

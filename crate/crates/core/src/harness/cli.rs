use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::{default_config, ExperimentConfig, ExperimentKind};
use super::experiments::{run_experiment, simulate_data};
use super::output::write_record;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "assimilate", version, about = "Filtering experiments: Kalman, grid, particle and ensemble Kalman filters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: the config's, else the current directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "FILTERS_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Simulate truth and observations, written as data.json.
    Simulate,
    /// Run the experiment described by --config.
    Run,
    /// Run a pf-rate or enkf-rate sweep over J and fit the rate.
    Sweep,
    /// Epsilon against the mean-field error over a theta sweep.
    Epsilon,
    /// Particle-filter weight collapse against dimension.
    Collapse,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

fn load_config(cli: &Cli, fallback: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(kind)) => default_config(kind),
        (None, None) => return Err(Error::Config("--config is required".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

fn expect_kind(cfg: &ExperimentConfig, allowed: &[ExperimentKind], command: &str) -> Result<()> {
    if allowed.contains(&cfg.experiment) {
        Ok(())
    } else {
        Err(Error::Config(format!("`{command}` cannot run a {} config", cfg.experiment.as_str())))
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = match cli.command {
        Command::Simulate => {
            let cfg = load_config(cli, Some(ExperimentKind::SingleRun))?;
            let data = simulate_data(&cfg)?;
            let dir = cfg.output_dir();
            std::fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.display().to_string(), source })?;
            let path = dir.join("data.json");
            std::fs::write(&path, serde_json::to_string_pretty(&data)?)
                .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
            let _ = writeln!(std::io::stdout(), "{}", path.display());
            return Ok(());
        }
        Command::Run => load_config(cli, None)?,
        Command::Sweep => {
            let cfg = load_config(cli, None)?;
            expect_kind(&cfg, &[ExperimentKind::PfRate, ExperimentKind::EnkfRate], "sweep")?;
            cfg
        }
        Command::Epsilon => {
            let cfg = load_config(cli, Some(ExperimentKind::EpsilonTrend))?;
            expect_kind(&cfg, &[ExperimentKind::EpsilonTrend], "epsilon")?;
            cfg
        }
        Command::Collapse => {
            let cfg = load_config(cli, Some(ExperimentKind::Collapse))?;
            expect_kind(&cfg, &[ExperimentKind::Collapse], "collapse")?;
            cfg
        }
    };
    let record = run_experiment(&cfg)?;
    let files = write_record(&record, &cfg.output_dir())?;
    let mut stdout = std::io::stdout().lock();
    for fit in &record.fits {
        let _ = writeln!(stdout, "{}: slope {:.4}, r^2 {:.4}", fit.metric_name, fit.slope, fit.r_squared);
    }
    if !record.failures.is_empty() {
        eprintln!("warning: {} replicate(s) failed; see error rows", record.failures.len());
    }
    let _ = writeln!(stdout, "{}", files.csv.display());
    let _ = writeln!(stdout, "{}", files.json.display());
    Ok(())
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    if e.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_NUMERIC
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let threads = match cli.threads {
        Some(0) => return report(&Error::Config("--threads must be positive".into())),
        Some(n) => n,
        None => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => return report(&Error::Config(format!("thread pool: {e}"))),
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => report(&e),
    }
}

/// Convenience for tests and scripts: runs `command` on a config file.
pub fn run_config_file(command: &str, config: &Path, out: &Path, threads: usize) -> i32 {
    cli_main([
        OsString::from("assimilate"),
        OsString::from(command),
        OsString::from("--config"),
        config.as_os_str().to_owned(),
        OsString::from("--out"),
        out.as_os_str().to_owned(),
        OsString::from("--threads"),
        OsString::from(threads.to_string()),
    ])
}

//! `dice-sim` command line.
//!
//! Exit codes: 0 success, 1 I/O or other failure (and failed validation),
//! 2 configuration error, 3 numerical divergence. Diagnostics go to
//! stderr; stdout only carries the summary table.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Result, SimError};
use crate::experiment::{execute_all, load_config, ExperimentConfig, RunSpec, SEED_ENV};
use crate::metrics::{emit, MetricsReport, ReportFormat};
use crate::oracle::{run_validation, OracleOptions};

#[derive(Debug, Parser)]
#[command(name = "dice-sim", version, about = "Simulate stale-activation expert parallelism for MoE diffusion sampling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One run against its synchronous baseline.
    Run(ExperimentArgs),
    /// Synchronous, displaced, interweaved and the DICE preset side by side.
    Compare(ExperimentArgs),
    /// Every point of the config's sweep axes.
    Sweep(ExperimentArgs),
    /// Check the simulator against the reference oracle on a random grid.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set policy.warmup=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (default: the config's output.dir).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Also write each run's timeline as JSON.
    #[arg(long)]
    pub timeline: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Number of grid configurations.
    #[arg(long, default_value_t = 256)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Consume routed outputs this many extra steps late in the oracle.
    #[arg(long, default_value_t = 0, hide = true)]
    pub inject_staleness: usize,
}

fn exit_code(err: &SimError) -> u8 {
    match err {
        SimError::Config(_) => 2,
        SimError::NumericalDivergence { .. } => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(2),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn main() -> ExitCode {
    run_from(std::env::args_os())
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run(a) => experiment(a, "report", |c, seed| Ok(vec![c.run_spec(seed)?])),
        Command::Compare(a) => experiment(a, "compare", ExperimentConfig::compare_specs),
        Command::Sweep(a) => experiment(a, "sweep", ExperimentConfig::sweep_specs),
        Command::Validate(a) => validate(a),
    }
}

fn experiment(args: ExperimentArgs, stem: &str, specs_of: impl Fn(&ExperimentConfig, u64) -> Result<Vec<RunSpec>>) -> Result<ExitCode> {
    let config = match &args.config {
        Some(path) => load_config(path, &args.overrides)?,
        None => crate::experiment::parse_config("schema_version = 1\n", &args.overrides)?,
    };
    config.validate()?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let seed = config.resolve_seed(env_seed.as_deref())?;
    let specs = specs_of(&config, seed)?;
    let out_dir = args.out.clone().unwrap_or_else(|| config.output.dir.clone());
    let format: ReportFormat = args.format.map(Into::into).unwrap_or(config.output.format);
    let timeline = args.timeline || config.output.timeline;

    let results = execute_all(&specs, args.jobs, timeline)?;
    create_dir(&out_dir)?;
    let mut reports = Vec::with_capacity(results.len());
    for (i, (mut report, tl)) in results.into_iter().enumerate() {
        if let Some(json) = tl {
            let rel = PathBuf::from("timelines").join(format!("{i:03}-{}.json", slug(&report.label)));
            let path = out_dir.join(&rel);
            create_dir(path.parent().expect("has parent"))?;
            fs::write(&path, json).map_err(|e| SimError::io(&path, e))?;
            report.timeline_path = Some(rel.to_string_lossy().replace('\\', "/"));
        }
        reports.push(report);
    }
    let path = out_dir.join(format!("{stem}.{}", format.extension()));
    emit(&reports, format, &path)?;
    print_summary(&reports);
    eprintln!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn validate(args: ValidateArgs) -> Result<ExitCode> {
    let options = OracleOptions {
        extra_staleness: args.inject_staleness,
    };
    let outcome = run_validation(args.grid, args.seed, options)?;
    println!(
        "validated {} configurations: {} mismatches",
        outcome.cases,
        outcome.failures.len()
    );
    if let Some(f) = outcome.failures.first() {
        let at = f.comparison.first_divergence.expect("failure has a coordinate");
        let place = match (at.step, at.layer) {
            (Some(s), Some(l)) => format!("step {s} layer {l} MoE input"),
            _ => "final sample".to_string(),
        };
        eprintln!(
            "first divergence: case {} ({} {}), {place} row {} col {}, max abs diff {:e}",
            f.case.index, f.case.strategy, f.case.policy, at.row, at.col, f.comparison.max_abs_diff
        );
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SimError::io(dir, e))
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

fn print_summary(reports: &[MetricsReport]) {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let _ = writeln!(
        out,
        "{:<36} {:>12} {:>12} {:>10} {:>8} {:>14}",
        "label", "divergence", "makespan_s", "speedup", "comm%", "peak_buf_B"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<36} {:>12.4e} {:>12.6} {:>10.3} {:>8.1} {:>14}",
            r.label,
            r.divergence,
            r.makespan_seconds,
            r.speedup_vs_sync,
            100.0 * r.comm_share,
            r.peak_buffer_bytes
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from([
            "dice-sim", "sweep", "--config", "c.toml", "--set", "seed=1", "--set", "policy.warmup=2", "--jobs", "4",
            "--format", "json", "--timeline",
        ])
        .unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(a.overrides, ["seed=1", "policy.warmup=2"]);
        assert_eq!((a.jobs, a.format, a.timeline), (4, Some(FormatArg::Json), true));
        assert!(Cli::try_parse_from(["dice-sim", "bogus"]).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&SimError::Config("x".into())), 2);
        assert_eq!(exit_code(&SimError::NumericalDivergence { step: 0, layer: 0 }), 3);
        assert_eq!(exit_code(&SimError::Contract("x".into())), 1);
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("batch=4 R=5"), "batch-4-r-5");
    }
}

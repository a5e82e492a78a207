//! The `epic` command-line tool.
//!
//! Exit codes: 0 on success, 1 when a well-formed command fails while
//! running, 2 for usage errors and unreadable or malformed inputs.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::dump::GradDump;
use crate::epic_defense::{eliminate, ClassRound, DefenseConfig, RoundInput, SkipReason};
use crate::error::{Error, Result};
use crate::facility_location::GreedyMode;
use crate::labels::LabelTable;
use crate::report::{run_simulation, RunReport};
use crate::scenario::SimConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "epic", version, about = "Gradient-medoid poisoning defense experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one selection round on a gradient dump and list would-be drops.
    Select(SelectArgs),
    /// Run a configured simulation and write its JSON report.
    DefendSim(DefendSimArgs),
    /// Print one series of a report as CSV.
    Export(ExportArgs),
}

#[derive(Debug, clap::Args)]
pub struct SelectArgs {
    /// Gradient dump (`.epgd`).
    #[arg(long)]
    pub input: PathBuf,
    /// Labels file, one `<index>,<class>[,poison]` line per row.
    #[arg(long)]
    pub labels: PathBuf,
    /// Medoid budget as a fraction of each class.
    #[arg(long, default_value_t = 0.1)]
    pub fraction: f64,
    /// naive, lazy or stochastic.
    #[arg(long, default_value = "lazy")]
    pub mode: GreedyMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Classes with at most this many rows are left untouched.
    #[arg(long, default_value_t = 0)]
    pub min_class_size: usize,
    /// Also write the selection as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct DefendSimArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ExportArgs {
    /// A report written by `defend-sim`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub series: String,
}

/// JSON written by `select --out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectReport {
    pub schema_version: u32,
    pub rows: usize,
    pub dim: usize,
    pub fraction: f64,
    pub mode: GreedyMode,
    pub seed: u64,
    pub min_class_size: usize,
    pub classes: Vec<ClassRound>,
    pub would_drop: Vec<usize>,
}

enum Failure {
    Usage(Error),
    Runtime(Error),
}

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Select(a) => select(&a, stdout),
        Command::DefendSim(a) => defend_sim(&a),
        Command::Export(a) => export(&a, stdout),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn select(args: &SelectArgs, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    if !(args.fraction > 0.0 && args.fraction <= 1.0) {
        return Err(Failure::Usage(Error::Config { key: "fraction".into(), message: "must lie in (0, 1]".into() }));
    }
    let dump = usage(GradDump::read_from(&args.input))?;
    let proxies = usage(dump.to_proxies())?;
    let labels = usage(LabelTable::read_from(&args.labels))?;
    if labels.len() != proxies.rows() {
        return Err(Failure::Usage(Error::invalid(format!(
            "labels cover {} examples but the dump has {} rows",
            labels.len(),
            proxies.rows()
        ))));
    }
    let config = DefenseConfig {
        medoid_fraction: args.fraction,
        greedy_mode: args.mode,
        seed: args.seed,
        min_class_size_guard: args.min_class_size,
        ..DefenseConfig::default()
    };
    let ids: Vec<usize> = (0..proxies.rows()).collect();
    let input = RoundInput {
        ids: &ids,
        labels: &labels.labels,
        classes: labels.classes(),
        poison: labels.poison.as_deref(),
        proxies: &proxies,
    };
    let round = runtime(eliminate(&input, &config, 0))?;
    let report = SelectReport {
        schema_version: crate::report::SCHEMA_VERSION,
        rows: proxies.rows(),
        dim: proxies.dim(),
        fraction: args.fraction,
        mode: args.mode,
        seed: args.seed,
        min_class_size: args.min_class_size,
        would_drop: round.dropped_indices(),
        classes: round.classes,
    };
    let mut text = String::new();
    for class in &report.classes {
        let _ = write!(text, "class {}: {} rows, budget {}", class.class, class.size, class.budget);
        let _ = match class.skipped {
            Some(SkipReason::SizeGuard) => writeln!(text, ", skipped (class size guard)"),
            Some(SkipReason::BudgetCoversClass) => writeln!(text, ", skipped (budget covers class)"),
            None => writeln!(text),
        };
        for c in &class.clusters {
            let mark = if c.gamma == 1 { "  isolated" } else { "" };
            let _ = writeln!(text, "  medoid {} rank {} gamma {}{mark}", c.medoid, c.rank, c.gamma);
        }
    }
    let drops: Vec<String> = report.would_drop.iter().map(usize::to_string).collect();
    let _ = writeln!(text, "would drop: {}", if drops.is_empty() { "none".to_string() } else { drops.join(" ") });
    runtime(stdout.write_all(text.as_bytes()).map_err(Error::from))?;
    if let Some(out) = &args.out {
        let mut json = runtime(serde_json::to_string_pretty(&report).map_err(Error::from))?;
        json.push('\n');
        runtime(std::fs::write(out, json).map_err(Error::from))?;
    }
    Ok(())
}

fn defend_sim(args: &DefendSimArgs) -> std::result::Result<(), Failure> {
    let config: SimConfig = usage(read_json(&args.config))?;
    usage(config.validate())?;
    let report = runtime(run_simulation(&config))?;
    let json = runtime(report.to_json())?;
    runtime(std::fs::write(&args.out, json).map_err(Error::from))
}

fn export(args: &ExportArgs, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    let text = usage(std::fs::read_to_string(&args.input).map_err(Error::from))?;
    let report = usage(RunReport::from_json(&text))?;
    let series = usage(report.series(&args.series))?;
    let csv = runtime(series.to_csv())?;
    runtime(stdout.write_all(csv.as_bytes()).map_err(Error::from))
}

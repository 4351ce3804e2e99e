//! The `margin-select` command line: `run`, `select` and `report`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::dump::{self, SelectOptions};
use crate::error::{Error, Result};
use crate::experiment::run_experiment;
use crate::plan;
use crate::report;
use crate::rng;
use crate::select::{CorpusBudget, Normalization, SelectKind};

#[derive(Debug, Parser)]
#[command(
    name = "margin-select",
    version,
    about = "Margin-based preference-pair selection and its tabular simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation plan and write results.csv and summary.txt.
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds overriding the plan's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Select pairs to annotate from a log-probability dump.
    Select {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        instance: SelectKind,
        #[arg(long)]
        corpus: SelectKind,
        /// Absolute count, or a percentage such as `50%`.
        #[arg(long)]
        budget: CorpusBudget,
        #[arg(long)]
        beta: f64,
        /// Rank by length-normalised margins.
        #[arg(long)]
        normalized: bool,
        /// Seed for the random strategies.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Iteration index mixed into the selection stream.
        #[arg(long, default_value_t = 1)]
        iteration: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a results CSV into per-arm curves and a calibration table.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn open_input(path: &Path, flag: &str) -> Result<File> {
    File::open(path).map_err(|e| Error::config(flag, format!("cannot open {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn cmd_run(plan_path: &Path, out_dir: &Path, seeds: Option<Vec<u64>>) -> Result<()> {
    let mut plan = plan::load(plan_path)?;
    if let Some(seeds) = seeds {
        if seeds.is_empty() {
            return Err(Error::config("--seeds", "at least one seed is required"));
        }
        plan.seeds = seeds;
    }
    plan.validate()?;
    let results = run_experiment(&plan)?;
    let rows = report::result_rows(&results);
    fs::create_dir_all(out_dir)?;
    let mut csv = Vec::new();
    report::write_results(&rows, &mut csv)?;
    write_file(&out_dir.join("results.csv"), &csv)?;
    write_file(&out_dir.join("summary.txt"), report::summary(&rows).as_bytes())?;
    log::info!("wrote {} rows to {}", rows.len(), out_dir.display());
    Ok(())
}

/// Selects from a dump file. Random strategies draw from the `selection`
/// stream of `seed` at `iteration`, as the simulator does.
pub fn cmd_select(dump_path: &Path, options: &SelectOptions, seed: u64, iteration: u64, out_path: &Path) -> Result<()> {
    let records = dump::read_dump(BufReader::new(open_input(dump_path, "--dump")?))?;
    let rows = dump::select_dump(&records, options, &mut rng::substream(seed, "selection", iteration))?;
    let mut buf = Vec::new();
    dump::write_worklist(&rows, &mut buf)?;
    write_file(out_path, &buf)?;
    log::info!("selected {} pairs into {}", rows.len(), out_path.display());
    Ok(())
}

pub fn cmd_report(results_path: &Path, out_dir: &Path) -> Result<()> {
    let rows = report::read_results(BufReader::new(open_input(results_path, "--results")?))?;
    fs::create_dir_all(out_dir)?;
    for (name, bytes) in report::report_files(&rows)? {
        write_file(&out_dir.join(name), &bytes)?;
    }
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { plan, out, seeds } => cmd_run(&plan, &out, seeds),
        Command::Select {
            dump,
            instance,
            corpus,
            budget,
            beta,
            normalized,
            seed,
            iteration,
            out,
        } => {
            let normalization = if normalized {
                Normalization::LengthNormalized
            } else {
                Normalization::Raw
            };
            let options = SelectOptions {
                instance,
                corpus,
                budget,
                beta,
                normalization,
            };
            cmd_select(&dump, &options, seed, iteration, &out)
        }
        Command::Report { results, out } => cmd_report(&results, &out),
    }
}

/// Process exit code for a command outcome.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_input_error() => 2,
        Err(_) => 1,
    }
}

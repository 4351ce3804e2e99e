//! Runs a small allocation experiment and writes the files `report` would:
//! results.csv, one curve per arm and calibration.csv.
//!
//! cargo run --release --example report_curves -- [out_dir]

use std::path::PathBuf;

use margin_select::experiment::run_experiment;
use margin_select::{plan, report};

fn main() -> margin_select::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "report_out".to_string()));
    let mut plan = plan::preset("allocation")?;
    plan.seeds = vec![0, 1, 2];
    let rows = report::result_rows(&run_experiment(&plan)?);

    std::fs::create_dir_all(&out)?;
    report::write_results(&rows, std::fs::File::create(out.join("results.csv"))?)?;
    for (name, bytes) in report::report_files(&rows)? {
        std::fs::write(out.join(&name), bytes)?;
        println!("wrote {}", out.join(name).display());
    }
    print!("{}", report::summary(&rows));
    Ok(())
}

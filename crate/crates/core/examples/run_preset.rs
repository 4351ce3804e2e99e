//! Runs a shipped preset in-process and prints per-arm learning curves.
//!
//! cargo run --release --example run_preset -- [preset] [seeds]

use margin_select::experiment::run_experiment;
use margin_select::{plan, stats};

fn main() -> margin_select::Result<()> {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "always_smallest_vs_random".to_string());
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(5);
    let mut plan = plan::preset(&name)?;
    plan.seeds = (0..seeds).collect();
    let results = run_experiment(&plan)?;

    for arm in results.arm_names() {
        let runs: Vec<_> = results.runs_of(&arm).collect();
        let initial: Vec<f64> = runs.iter().map(|r| r.initial_win_rate).collect();
        let mut line = format!("{arm:<16} start {:.4}", stats::mean(&initial).unwrap_or(0.0));
        for i in 0..runs[0].iterations.len() {
            let w: Vec<f64> = runs.iter().map(|r| r.iterations[i].win_rate).collect();
            line.push_str(&format!(
                "  it{} {:.4}±{:.4}",
                i + 1,
                stats::mean(&w).unwrap_or(0.0),
                stats::std_error(&w).unwrap_or(0.0)
            ));
        }
        println!("{line}");
    }
    for (name, _) in plan::PRESETS {
        println!("available preset: {name}");
    }
    Ok(())
}

//! Margin calibration of the starting policy: empirical pairwise accuracy
//! per equal-count margin bin against the logistic prediction.

use margin_select::experiment::calibration_run;
use margin_select::plan;

fn main() -> margin_select::Result<()> {
    let plan = plan::preset("always_smallest_vs_random")?;
    let table = calibration_run(&plan, 0, 2000)?;
    println!(
        "{:>10} {:>10} {:>6} {:>9} {:>9}",
        "margin_lo", "margin_hi", "count", "accuracy", "logistic"
    );
    for b in &table.bins {
        println!(
            "{:>10.4} {:>10.4} {:>6} {:>9.3} {:>9.3}",
            b.margin_lo, b.margin_hi, b.count, b.empirical_accuracy, b.logistic_prediction
        );
    }
    println!("Spearman(margin, accuracy) = {:?}", table.trend());
    Ok(())
}

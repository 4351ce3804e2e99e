//! Result files: `results.csv` and `summary.txt` from a run, and the
//! per-arm curve and calibration files derived from a results CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::dpo::csv_err;
use crate::error::{Error, Result};
use crate::experiment::ExperimentResults;
use crate::{fmt_real, sigmoid, stats};

pub const RESULTS_HEADER: [&str; 8] = [
    "seed",
    "arm",
    "iteration",
    "trained_instances",
    "win_rate",
    "ranking_accuracy",
    "mean_kl",
    "mean_margin",
];

pub const CURVE_HEADER: [&str; 5] = ["iteration", "cumulative_instances", "mean_win_rate", "stderr", "seeds"];

pub const CALIBRATION_HEADER: [&str; 5] = ["arm", "iteration", "mean_margin", "ranking_accuracy", "logistic_prediction"];

/// One row of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub arm: String,
    pub iteration: usize,
    pub trained_instances: usize,
    pub win_rate: f64,
    pub ranking_accuracy: f64,
    pub mean_kl: f64,
    pub mean_margin: f64,
}

/// Flattens results in `(seed, arm, iteration)` order as produced by the run.
pub fn result_rows(results: &ExperimentResults) -> Vec<ResultRow> {
    results
        .runs
        .iter()
        .flat_map(|run| {
            run.iterations.iter().map(move |it| ResultRow {
                seed: run.seed,
                arm: run.arm.clone(),
                iteration: it.iteration,
                trained_instances: it.trained_instances,
                win_rate: it.win_rate,
                ranking_accuracy: it.ranking_accuracy,
                mean_kl: it.mean_kl,
                mean_margin: it.mean_selected_margin,
            })
        })
        .collect()
}

pub fn write_results<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.arm.clone(),
            r.iteration.to_string(),
            r.trained_instances.to_string(),
            fmt_real(r.win_rate),
            fmt_real(r.ranking_accuracy),
            fmt_real(r.mean_kl),
            fmt_real(r.mean_margin),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    let raw = record.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::parse(line, format!("column {}: cannot parse {raw:?}", RESULTS_HEADER[i])))
}

/// Reads a results CSV, checking the header exactly.
pub fn read_results<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| Error::parse(1, e.to_string()))?,
        None => return Err(Error::parse(1, "no rows")),
    };
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::parse(1, format!("expected header {}", RESULTS_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
        if rec.len() != RESULTS_HEADER.len() {
            return Err(Error::parse(
                line,
                format!("expected {} fields, found {}", RESULTS_HEADER.len(), rec.len()),
            ));
        }
        let row = ResultRow {
            seed: field(&rec, 0, line)?,
            arm: rec[1].to_string(),
            iteration: field(&rec, 2, line)?,
            trained_instances: field(&rec, 3, line)?,
            win_rate: field(&rec, 4, line)?,
            ranking_accuracy: field(&rec, 5, line)?,
            mean_kl: field(&rec, 6, line)?,
            mean_margin: field(&rec, 7, line)?,
        };
        if row.arm.is_empty() {
            return Err(Error::parse(line, "empty arm name"));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(2, "no rows"));
    }
    Ok(rows)
}

/// Arms in order of first appearance.
fn arms(rows: &[ResultRow]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for r in rows {
        if !out.contains(&r.arm.as_str()) {
            out.push(&r.arm);
        }
    }
    out
}

/// One point of an arm's learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    /// Mean over seeds of the trained instances up to and including this iteration.
    pub cumulative_instances: f64,
    pub mean_win_rate: f64,
    /// Sample standard deviation over seeds divided by the square root of the seed count.
    pub stderr: f64,
    pub seeds: usize,
}

pub fn curve(rows: &[ResultRow], arm: &str) -> Vec<CurvePoint> {
    let mut by_iter: BTreeMap<usize, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.arm == arm) {
        by_iter.entry(r.iteration).or_default().push(r);
    }
    let mut cumulative: BTreeMap<u64, usize> = BTreeMap::new();
    by_iter
        .into_iter()
        .map(|(iteration, rs)| {
            for r in &rs {
                *cumulative.entry(r.seed).or_default() += r.trained_instances;
            }
            let wins: Vec<f64> = rs.iter().map(|r| r.win_rate).collect();
            let seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
            let total: usize = seeds.iter().map(|s| cumulative[s]).sum();
            CurvePoint {
                iteration,
                cumulative_instances: total as f64 / seeds.len() as f64,
                mean_win_rate: stats::mean(&wins).unwrap_or(0.0),
                stderr: stats::std_error(&wins).unwrap_or(0.0),
                seeds: wins.len(),
            }
        })
        .collect()
}

pub fn write_curve<W: Write>(points: &[CurvePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.iteration.to_string(),
            fmt_real(p.cumulative_instances),
            fmt_real(p.mean_win_rate),
            fmt_real(p.stderr),
            p.seeds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Per arm and iteration: mean selected margin, mean ranking accuracy, and
/// the logistic prediction at the mean margin.
pub fn write_calibration<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CALIBRATION_HEADER).map_err(csv_err)?;
    for arm in arms(rows) {
        let mut by_iter: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.arm == arm) {
            let e = by_iter.entry(r.iteration).or_default();
            e.0.push(r.mean_margin);
            e.1.push(r.ranking_accuracy);
        }
        for (iteration, (margins, accs)) in by_iter {
            let m = stats::mean(&margins).unwrap_or(0.0);
            w.write_record([
                arm.to_string(),
                iteration.to_string(),
                fmt_real(m),
                fmt_real(stats::mean(&accs).unwrap_or(0.0)),
                fmt_real(sigmoid(m)),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-arm mean and standard error of the final-iteration win rate, plus the
/// mean annotated instances.
pub fn summary(rows: &[ResultRow]) -> String {
    let mut s = String::from("arm\tseeds\tfinal_win_rate\tstderr\tannotations\n");
    for arm in arms(rows) {
        let mut last: BTreeMap<u64, &ResultRow> = BTreeMap::new();
        let mut ann: BTreeMap<u64, usize> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.arm == arm) {
            *ann.entry(r.seed).or_default() += r.trained_instances;
            let e = last.entry(r.seed).or_insert(r);
            if r.iteration > e.iteration {
                *e = r;
            }
        }
        let finals: Vec<f64> = last.values().map(|r| r.win_rate).collect();
        let mean_ann = ann.values().sum::<usize>() as f64 / ann.len() as f64;
        s.push_str(&format!(
            "{arm}\t{}\t{:.6}\t{:.6}\t{mean_ann:.1}\n",
            finals.len(),
            stats::mean(&finals).unwrap_or(0.0),
            stats::std_error(&finals).unwrap_or(0.0),
        ));
    }
    s
}

/// File-name-safe form of an arm name.
pub fn sanitize(arm: &str) -> String {
    arm.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Curve files keyed by file name, in arm order, followed by `calibration.csv`.
pub fn report_files(rows: &[ResultRow]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();
    for arm in arms(rows) {
        let name = format!("curve_{}.csv", sanitize(arm));
        if files.iter().any(|(n, _)| *n == name) {
            return Err(Error::Structure(format!("arm names collide in file name {name}")));
        }
        let mut buf = Vec::new();
        write_curve(&curve(rows, arm), &mut buf)?;
        files.push((name, buf));
    }
    let mut buf = Vec::new();
    write_calibration(rows, &mut buf)?;
    files.push(("calibration.csv".to_string(), buf));
    Ok(files)
}

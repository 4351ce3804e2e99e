//! External log-probability dumps and annotation worklists.
//!
//! A dump is tab-separated, one response per line, after a `#dump v1` header:
//!
//! ```text
//! #dump v1
//! instruction_key<TAB>response_key<TAB>logp_policy<TAB>logp_ref<TAB>length
//! ```
//!
//! Rows of one instruction list its distinct sampled responses in the order
//! they were drawn; that order drives the instance-level `random` pick.
//! Instructions are pooled in order of first appearance. Ties in the margin
//! ranking fall back to the natural order of keys (numeric when both keys are
//! integers), which matches response and instruction ids for dumps exported
//! from the simulator.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::fmt_real;
use crate::margin::{self, MarginRecord};
use crate::policy::TabularPolicy;
use crate::select::{self, CorpusBudget, Normalization, SampledInstruction, SelectKind, Strategy};

pub const HEADER: &str = "#dump v1";
pub const WORKLIST_HEADER: [&str; 6] = [
    "instruction_key",
    "response_a",
    "response_b",
    "rho",
    "rho_hat",
    "provisional_winner",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRecord {
    pub instruction_key: String,
    pub response_key: String,
    pub logp_policy: f64,
    pub logp_ref: f64,
    pub length: u32,
}

pub fn write_dump<W: Write>(records: &[DumpRecord], mut out: W) -> Result<()> {
    writeln!(out, "{HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.instruction_key,
            r.response_key,
            fmt_real(r.logp_policy),
            fmt_real(r.logp_ref),
            r.length
        )?;
    }
    Ok(())
}

fn real(field: &str, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("{name}: {field:?} is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("{name} must be finite")));
    }
    Ok(v)
}

/// Reads a dump. Errors carry the 1-based line number.
pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<DumpRecord>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != HEADER {
        return Err(Error::parse(1, format!("expected header {HEADER:?}")));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::parse(n, format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::parse(n, "empty key"));
        }
        let length: u32 = fields[4]
            .trim()
            .parse()
            .map_err(|_| Error::parse(n, format!("length: {:?} is not a positive integer", fields[4])))?;
        if length == 0 {
            return Err(Error::parse(n, "length must be at least 1"));
        }
        records.push(DumpRecord {
            instruction_key: fields[0].to_string(),
            response_key: fields[1].to_string(),
            logp_policy: real(fields[2], "logp_policy", n)?,
            logp_ref: real(fields[3], "logp_ref", n)?,
            length,
        });
    }
    Ok(records)
}

/// Key order: integers numerically and before any other key, the rest as
/// strings.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Dumps the distinct sampled responses of each instruction, in draw order.
pub fn export(policy: &TabularPolicy, reference: &TabularPolicy, sample: &[SampledInstruction]) -> Result<Vec<DumpRecord>> {
    let mut out = Vec::new();
    for s in sample {
        let lp = policy.log_probs(s.instruction_id)?;
        let lr = reference.log_probs(s.instruction_id)?;
        for y in margin::distinct_in_order(&s.sampled) {
            out.push(DumpRecord {
                instruction_key: s.instruction_id.to_string(),
                response_key: y.to_string(),
                logp_policy: lp[y],
                logp_ref: lr[y],
                length: *s.lengths.get(y).ok_or(Error::Lookup { what: "response", id: y })?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectOptions {
    pub instance: SelectKind,
    pub corpus: SelectKind,
    pub budget: CorpusBudget,
    pub beta: f64,
    pub normalization: Normalization,
}

/// One row of the annotation worklist.
#[derive(Debug, Clone, PartialEq)]
pub struct WorklistRow {
    pub instruction_key: String,
    pub response_a: String,
    pub response_b: String,
    pub rho: f64,
    pub rho_hat: f64,
    pub provisional_winner: String,
}

struct Group {
    key: String,
    responses: Vec<DumpRecord>,
}

/// Runs instance then corpus selection over a dump. Instructions with fewer
/// than two distinct responses are skipped with a warning; repeated
/// `(instruction, response)` keys keep their first row.
pub fn select_dump<R: Rng + ?Sized>(records: &[DumpRecord], options: &SelectOptions, rng: &mut R) -> Result<Vec<WorklistRow>> {
    let mut groups: Vec<Group> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for r in records {
        let g = *index.entry(r.instruction_key.as_str()).or_insert_with(|| {
            groups.push(Group {
                key: r.instruction_key.clone(),
                responses: Vec::new(),
            });
            groups.len() - 1
        });
        let group = &mut groups[g];
        if group.responses.iter().any(|o| o.response_key == r.response_key) {
            log::warn!(
                "dump: duplicate response {:?} for instruction {:?}, keeping the first",
                r.response_key,
                r.instruction_key
            );
            continue;
        }
        group.responses.push(r.clone());
    }
    groups.retain(|g| {
        if g.responses.len() < 2 {
            log::warn!("dump: instruction {:?} has fewer than two responses, skipped", g.key);
        }
        g.responses.len() >= 2
    });

    let mut by_key: Vec<usize> = (0..groups.len()).collect();
    by_key.sort_by(|&a, &b| natural_cmp(&groups[a].key, &groups[b].key));
    let mut rank = vec![0; groups.len()];
    for (r, &g) in by_key.iter().enumerate() {
        rank[g] = r;
    }

    // Local response ids follow key order; `keys[x][id]` maps them back.
    let mut keys: Vec<Vec<String>> = vec![Vec::new(); groups.len()];
    let mut candidates = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        let mut order: Vec<usize> = (0..group.responses.len()).collect();
        order.sort_by(|&a, &b| natural_cmp(&group.responses[a].response_key, &group.responses[b].response_key));
        let mut local = vec![0; order.len()];
        for (id, &row) in order.iter().enumerate() {
            local[row] = id;
        }
        let mut implicit = vec![0.0; order.len()];
        let mut lengths = vec![0; order.len()];
        for (row, r) in group.responses.iter().enumerate() {
            implicit[local[row]] = r.logp_policy - r.logp_ref;
            lengths[local[row]] = r.length;
        }
        keys[rank[g]] = order.iter().map(|&row| group.responses[row].response_key.clone()).collect();
        candidates.push(margin::candidates_from_implicit(
            rank[g],
            &local,
            &implicit,
            &lengths,
            options.beta,
        )?);
    }

    let instance = Strategy::instance(options.instance, options.normalization);
    let corpus = Strategy::corpus(options.corpus, options.normalization);
    let selected = select::select_from_candidates(&candidates, &instance, &corpus, options.budget, rng)?;
    let instruction_keys: Vec<&str> = by_key.iter().map(|&g| groups[g].key.as_str()).collect();
    Ok(selected
        .iter()
        .map(|r| {
            let k = &keys[r.instruction_id];
            WorklistRow {
                instruction_key: instruction_keys[r.instruction_id].to_string(),
                response_a: k[r.a].clone(),
                response_b: k[r.b].clone(),
                rho: r.rho,
                rho_hat: r.rho_hat,
                provisional_winner: k[r.provisional_winner].clone(),
            }
        })
        .collect())
}

/// Worklist rows for records selected in-process, keyed by ids.
pub fn worklist_rows(records: &[MarginRecord]) -> Vec<WorklistRow> {
    records
        .iter()
        .map(|r| WorklistRow {
            instruction_key: r.instruction_id.to_string(),
            response_a: r.a.to_string(),
            response_b: r.b.to_string(),
            rho: r.rho,
            rho_hat: r.rho_hat,
            provisional_winner: r.provisional_winner.to_string(),
        })
        .collect()
}

pub fn write_worklist<W: Write>(rows: &[WorklistRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(WORKLIST_HEADER).map_err(crate::dpo::csv_err)?;
    for r in rows {
        w.write_record([
            r.instruction_key.as_str(),
            &r.response_a,
            &r.response_b,
            &fmt_real(r.rho),
            &fmt_real(r.rho_hat),
            &r.provisional_winner,
        ])
        .map_err(crate::dpo::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

//! Instance-level and corpus-level selection over margin records, and
//! per-iteration budget schedules.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::{self, Candidates, MarginRecord};
use crate::policy::TabularPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Instance,
    Corpus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectKind {
    Smallest,
    Largest,
    Random,
}

impl SelectKind {
    pub const ALL: [SelectKind; 3] = [SelectKind::Smallest, SelectKind::Largest, SelectKind::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectKind::Smallest => "smallest",
            SelectKind::Largest => "largest",
            SelectKind::Random => "random",
        }
    }
}

impl fmt::Display for SelectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smallest" => Ok(SelectKind::Smallest),
            "largest" => Ok(SelectKind::Largest),
            "random" => Ok(SelectKind::Random),
            other => Err(Error::config("strategy", format!("unknown selection kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Rank by `rho`.
    #[default]
    Raw,
    /// Rank by `rho_hat`.
    LengthNormalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Strategy {
    pub level: Level,
    pub kind: SelectKind,
    pub normalization: Normalization,
}

impl Strategy {
    pub fn instance(kind: SelectKind, normalization: Normalization) -> Self {
        Strategy {
            level: Level::Instance,
            kind,
            normalization,
        }
    }

    pub fn corpus(kind: SelectKind, normalization: Normalization) -> Self {
        Strategy {
            level: Level::Corpus,
            kind,
            normalization,
        }
    }

    pub fn key(&self, record: &MarginRecord) -> f64 {
        match self.normalization {
            Normalization::Raw => record.rho,
            Normalization::LengthNormalized => record.rho_hat,
        }
    }

    /// Ranking order: extremal key first, then `(instruction_id, a, b)` ascending.
    pub fn compare(&self, x: &MarginRecord, y: &MarginRecord) -> Ordering {
        let by_key = self.key(x).total_cmp(&self.key(y));
        let by_key = match self.kind {
            SelectKind::Largest => by_key.reverse(),
            _ => by_key,
        };
        by_key.then_with(|| (x.instruction_id, x.a, x.b).cmp(&(y.instruction_id, y.a, y.b)))
    }

    fn expect_level(&self, level: Level) -> Result<()> {
        if self.level == level {
            Ok(())
        } else {
            Err(Error::config("strategy.level", format!("expected a {level:?} strategy")))
        }
    }
}

/// Picks one pair for an instruction. `Ok(None)` means there is nothing to
/// choose from and the instruction should be dropped.
pub fn instance_select(records: &[MarginRecord], strategy: &Strategy, sampled_order: &[usize]) -> Result<Option<MarginRecord>> {
    strategy.expect_level(Level::Instance)?;
    let Some(first) = records.first() else {
        return Ok(None);
    };
    if records.iter().any(|r| r.instruction_id != first.instruction_id) {
        return Err(Error::Structure("instance selection over records of several instructions".into()));
    }
    match strategy.kind {
        SelectKind::Smallest | SelectKind::Largest => Ok(records.iter().min_by(|x, y| strategy.compare(x, y)).copied()),
        SelectKind::Random => {
            let order = margin::distinct_in_order(sampled_order);
            if order.len() < 2 {
                return Err(Error::Structure(format!(
                    "instruction {} has records but fewer than two sampled responses",
                    first.instruction_id
                )));
            }
            let (a, b) = (order[0].min(order[1]), order[0].max(order[1]));
            records
                .iter()
                .find(|r| r.a == a && r.b == b)
                .copied()
                .map(Some)
                .ok_or_else(|| Error::Structure(format!("no record for pair ({a}, {b})")))
        }
    }
}

/// Keeps `budget` records. Smallest/largest return them in ranking order;
/// random draws without replacement and returns them in draw order.
pub fn corpus_select<R: Rng + ?Sized>(
    records: &[MarginRecord],
    strategy: &Strategy,
    budget: usize,
    rng: &mut R,
) -> Result<Vec<MarginRecord>> {
    strategy.expect_level(Level::Corpus)?;
    let take = budget.min(records.len());
    match strategy.kind {
        SelectKind::Smallest | SelectKind::Largest => {
            let mut sorted = records.to_vec();
            sorted.sort_by(|x, y| strategy.compare(x, y));
            sorted.truncate(take);
            Ok(sorted)
        }
        SelectKind::Random => Ok(rand::seq::index::sample(rng, records.len(), take)
            .into_iter()
            .map(|i| records[i])
            .collect()),
    }
}

/// Corpus budget as an absolute count or as a fraction of the pooled set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorpusBudget {
    Count(usize),
    Fraction(f64),
}

impl CorpusBudget {
    /// Number of records to keep out of `pool`; fractions round down.
    pub fn resolve(&self, pool: usize) -> Result<usize> {
        match *self {
            CorpusBudget::Count(n) => Ok(n),
            CorpusBudget::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::config("budget", "fraction must lie in [0, 1]"));
                }
                Ok((f * pool as f64).floor() as usize)
            }
        }
    }
}

impl FromStr for CorpusBudget {
    type Err = Error;

    /// Accepts `5000` or `50%`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(pct) = s.strip_suffix('%') {
            let p: f64 = pct
                .trim()
                .parse()
                .map_err(|_| Error::config("budget", format!("invalid percentage {s:?}")))?;
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::config("budget", "percentage must lie in [0, 100]"));
            }
            return Ok(CorpusBudget::Fraction(p / 100.0));
        }
        if s.starts_with('-') {
            return Err(Error::config("budget", "must not be negative"));
        }
        s.parse()
            .map(CorpusBudget::Count)
            .map_err(|_| Error::config("budget", format!("invalid budget {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Increase,
    Constant,
    Decrease,
}

/// Number of instructions `M_i` handed to each iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetSchedule {
    kind: ScheduleKind,
    per_iteration: Vec<usize>,
}

impl BudgetSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn per_iteration(&self) -> &[usize] {
        &self.per_iteration
    }

    pub fn iterations(&self) -> usize {
        self.per_iteration.len()
    }

    pub fn total(&self) -> usize {
        self.per_iteration.iter().sum()
    }
}

pub fn make_schedule(kind: ScheduleKind, sizes: &[usize]) -> Result<BudgetSchedule> {
    if sizes.is_empty() {
        return Err(Error::config("schedule.sizes", "must not be empty"));
    }
    if sizes.contains(&0) {
        return Err(Error::config("schedule.sizes", "every size must be positive"));
    }
    let ok = sizes.windows(2).all(|w| match kind {
        ScheduleKind::Increase => w[0] <= w[1],
        ScheduleKind::Constant => w[0] == w[1],
        ScheduleKind::Decrease => w[0] >= w[1],
    });
    if !ok {
        return Err(Error::config(
            "schedule.sizes",
            format!("{sizes:?} violates the {kind:?} monotonicity"),
        ));
    }
    Ok(BudgetSchedule {
        kind,
        per_iteration: sizes.to_vec(),
    })
}

/// Instance selection per instruction, pooling, then corpus selection.
/// Instructions without a candidate pair are dropped before pooling.
pub fn select_from_candidates<R: Rng + ?Sized>(
    candidates: &[Candidates],
    instance: &Strategy,
    corpus: &Strategy,
    budget: CorpusBudget,
    rng: &mut R,
) -> Result<Vec<MarginRecord>> {
    let mut pooled = Vec::with_capacity(candidates.len());
    for c in candidates {
        if let Some(rec) = instance_select(&c.records, instance, &c.sampled_order)? {
            pooled.push(rec);
        }
    }
    let take = budget.resolve(pooled.len())?;
    corpus_select(&pooled, corpus, take, rng)
}

/// Responses drawn for one instruction; carries lengths but no gold rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledInstruction {
    pub instruction_id: usize,
    pub sampled: Vec<usize>,
    pub lengths: Vec<u32>,
}

#[allow(clippy::too_many_arguments)]
pub fn select_for_iteration<R: Rng + ?Sized>(
    sample: &[SampledInstruction],
    instance: &Strategy,
    corpus: &Strategy,
    budget: CorpusBudget,
    beta: f64,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    rng: &mut R,
) -> Result<Vec<MarginRecord>> {
    let candidates = sample
        .iter()
        .map(|s| margin::candidates(policy, reference, beta, s.instruction_id, &s.sampled, &s.lengths))
        .collect::<Result<Vec<_>>>()?;
    select_from_candidates(&candidates, instance, corpus, budget, rng)
}

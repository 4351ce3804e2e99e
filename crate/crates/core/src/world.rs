//! Synthetic instruction/response universe and the gold preference oracle.
//!
//! Each instruction owns a fixed pool of `K` candidate responses. A response
//! carries a token length, a latent gold reward, and an optional vector of
//! observable attributes. When attributes are enabled, a configurable share of
//! the gold reward's variance is a linear function of them, which is what lets
//! a shared policy head generalise across instructions.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::fmt_real;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardDistribution {
    Normal { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl Default for RewardDistribution {
    fn default() -> Self {
        RewardDistribution::Normal { mean: 0.0, sd: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub num_instructions: usize,
    pub pool_size: usize,
    pub reward: RewardDistribution,
    pub length_min: u32,
    pub length_max: u32,
    /// Correlation between the latent reward score and response length.
    pub length_correlation: f64,
    /// Number of observable response attributes (0 disables them).
    pub feature_dim: usize,
    /// Fraction of gold-reward variance explained by the attributes.
    pub feature_share: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_instructions: 1000,
            pool_size: 8,
            reward: RewardDistribution::default(),
            length_min: 16,
            length_max: 512,
            length_correlation: 0.0,
            feature_dim: 0,
            feature_share: 0.0,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_instructions == 0 {
            return Err(Error::config("num_instructions", "must be positive"));
        }
        if self.pool_size < 2 {
            return Err(Error::config("pool_size", "must be at least 2"));
        }
        match self.reward {
            RewardDistribution::Normal { mean, sd } => {
                if !mean.is_finite() || !(sd > 0.0 && sd.is_finite()) {
                    return Err(Error::config("reward.sd", "normal rewards need finite mean and sd > 0"));
                }
            }
            RewardDistribution::Uniform { lo, hi } => {
                if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                    return Err(Error::config("reward.lo", "uniform rewards need finite lo < hi"));
                }
            }
        }
        if self.length_min < 1 {
            return Err(Error::config("length_min", "must be at least 1"));
        }
        if self.length_min > self.length_max {
            return Err(Error::config("length_max", "must be >= length_min"));
        }
        if !(-1.0..=1.0).contains(&self.length_correlation) {
            return Err(Error::config("length_correlation", "must lie in [-1, 1]"));
        }
        if !(0.0..=1.0).contains(&self.feature_share) {
            return Err(Error::config("feature_share", "must lie in [0, 1]"));
        }
        if self.feature_dim == 0 && self.feature_share > 0.0 {
            return Err(Error::config("feature_share", "requires feature_dim > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub id: usize,
    pub length: u32,
    pub gold_reward: f64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub id: usize,
    pub pool: Vec<Response>,
}

impl Instruction {
    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn response(&self, id: usize) -> Result<&Response> {
        self.pool.get(id).ok_or(Error::Lookup { what: "response", id })
    }

    pub fn lengths(&self) -> Vec<u32> {
        self.pool.iter().map(|r| r.length).collect()
    }

    /// Highest gold reward in the pool, ties toward the lower id.
    pub fn gold_argmax(&self) -> usize {
        let mut best = 0;
        for r in &self.pool[1..] {
            if r.gold_reward > self.pool[best].gold_reward {
                best = r.id;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    instructions: Vec<Instruction>,
    feature_dim: usize,
}

impl World {
    pub fn new(instructions: Vec<Instruction>, feature_dim: usize) -> Result<Self> {
        if instructions.is_empty() {
            return Err(Error::Structure("world has no instructions".into()));
        }
        for (i, x) in instructions.iter().enumerate() {
            if x.id != i {
                return Err(Error::Structure(format!("instruction at position {i} has id {}", x.id)));
            }
            if x.pool.len() < 2 {
                return Err(Error::Structure(format!("instruction {i} has fewer than 2 responses")));
            }
            for (j, r) in x.pool.iter().enumerate() {
                if r.id != j || r.length == 0 || !r.gold_reward.is_finite() || r.features.len() != feature_dim {
                    return Err(Error::Structure(format!("malformed response {j} of instruction {i}")));
                }
            }
        }
        Ok(World { instructions, feature_dim })
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn instruction(&self, id: usize) -> Result<&Instruction> {
        self.instructions.get(id).ok_or(Error::Lookup { what: "instruction", id })
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn pool_sizes(&self) -> Vec<usize> {
        self.instructions.iter().map(Instruction::pool_size).collect()
    }

    /// Mean and population standard deviation of all gold rewards.
    pub fn gold_moments(&self) -> (f64, f64) {
        let all: Vec<f64> = self
            .instructions
            .iter()
            .flat_map(|x| x.pool.iter().map(|r| r.gold_reward))
            .collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Serialises as `#world v1 K=<K>` followed by one tab-separated line per
    /// response; attribute columns, when present, trail the gold reward.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let k = self.instructions[0].pool.len();
        writeln!(out, "#world v1 K={k}")?;
        for x in &self.instructions {
            for r in &x.pool {
                write!(out, "{}\t{}\t{}\t{}", x.id, r.id, r.length, fmt_real(r.gold_reward))?;
                for f in &r.features {
                    write!(out, "\t{}", fmt_real(*f))?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::parse(1, "empty world file"))??;
        let k: usize = header
            .strip_prefix("#world v1 K=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::parse(1, format!("bad header {header:?}")))?;
        let mut instructions: Vec<Instruction> = Vec::new();
        let mut dim: Option<usize> = None;
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() < 4 {
                return Err(Error::parse(lineno, "expected at least 4 tab-separated columns"));
            }
            let d = cols.len() - 4;
            if *dim.get_or_insert(d) != d {
                return Err(Error::parse(lineno, "inconsistent attribute column count"));
            }
            let bad = |what: &str| Error::parse(lineno, format!("invalid {what}"));
            let xid: usize = cols[0].parse().map_err(|_| bad("instruction_id"))?;
            let rid: usize = cols[1].parse().map_err(|_| bad("response_id"))?;
            let length: u32 = cols[2].parse().map_err(|_| bad("length"))?;
            let gold: f64 = cols[3].parse().map_err(|_| bad("gold_reward"))?;
            let features = cols[4..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| bad("attribute")))
                .collect::<Result<Vec<_>>>()?;
            if xid == instructions.len() {
                instructions.push(Instruction {
                    id: xid,
                    pool: Vec::with_capacity(k),
                });
            }
            let x = instructions
                .last_mut()
                .filter(|x| x.id == xid)
                .ok_or_else(|| bad("instruction_id ordering"))?;
            if rid != x.pool.len() {
                return Err(bad("response_id ordering"));
            }
            x.pool.push(Response {
                id: rid,
                length,
                gold_reward: gold,
                features,
            });
        }
        if instructions.iter().any(|x| x.pool.len() != k) {
            return Err(Error::parse(1, format!("every instruction must have K={k} responses")));
        }
        World::new(instructions, dim.unwrap_or(0))
    }
}

/// Generates a world; a pure function of `config` (including its seed).
pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = rng::substream(config.seed, "world", 0);
    let dim = config.feature_dim;
    let direction = unit_direction(&mut rng, dim);
    let share = config.feature_share;
    let std_normal = Normal::standard();
    let span = f64::from(config.length_max - config.length_min + 1);
    let rho_len = config.length_correlation;

    let instructions = (0..config.num_instructions)
        .map(|xid| {
            let pool = (0..config.pool_size)
                .map(|rid| {
                    let features: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let eps: f64 = rng.sample(StandardNormal);
                    let eta: f64 = rng.sample(StandardNormal);
                    let along: f64 = features.iter().zip(&direction).map(|(f, u)| f * u).sum();
                    let score = share.sqrt() * along + (1.0 - share).sqrt() * eps;
                    let gold_reward = match config.reward {
                        RewardDistribution::Normal { mean, sd } => mean + sd * score,
                        RewardDistribution::Uniform { lo, hi } => lo + (hi - lo) * std_normal.cdf(score),
                    };
                    let t = rho_len * score + (1.0 - rho_len * rho_len).sqrt() * eta;
                    let offset = (std_normal.cdf(t) * span).floor() as u32;
                    let length = (config.length_min + offset).min(config.length_max);
                    Response {
                        id: rid,
                        length,
                        gold_reward,
                        features,
                    }
                })
                .collect();
            Instruction { id: xid, pool }
        })
        .collect();
    World::new(instructions, dim)
}

fn unit_direction(rng: &mut StreamRng, dim: usize) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// Response whose gold reward sits at `quantile` of the pool (nearest rank).
///
/// Ranks run over rewards in ascending order; among equal rewards the lower
/// id ranks higher, so `quantile = 1` returns the tie-broken argmax.
pub fn reference_response(x: &Instruction, quantile: f64) -> Result<usize> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::config("quantile", "must lie in (0, 1]"));
    }
    let mut order: Vec<&Response> = x.pool.iter().collect();
    order.sort_by(|a, b| a.gold_reward.total_cmp(&b.gold_reward).then(b.id.cmp(&a.id)));
    let k = order.len();
    let rank = ((quantile * k as f64).ceil() as usize).clamp(1, k);
    Ok(order[rank - 1].id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    #[default]
    Deterministic,
    BradleyTerry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreferenceLabel {
    pub winner: usize,
    pub loser: usize,
}

/// Gold-standard annotator standing in for human or reward-model labels.
#[derive(Debug, Clone)]
pub struct GoldOracle {
    mode: OracleMode,
    bt_scale: f64,
    seed: u64,
    rng: StreamRng,
    calls: u64,
}

impl GoldOracle {
    pub fn deterministic() -> Self {
        GoldOracle {
            mode: OracleMode::Deterministic,
            bt_scale: 1.0,
            seed: 0,
            rng: rng::substream(0, "oracle", 0),
            calls: 0,
        }
    }

    pub fn bradley_terry(bt_scale: f64, seed: u64) -> Result<Self> {
        if !(bt_scale > 0.0 && bt_scale.is_finite()) {
            return Err(Error::config("bt_scale", "must be a positive finite number"));
        }
        Ok(GoldOracle {
            mode: OracleMode::BradleyTerry,
            bt_scale,
            seed,
            rng: rng::substream(seed, "oracle", 0),
            calls: 0,
        })
    }

    pub fn new(mode: OracleMode, bt_scale: f64, seed: u64) -> Result<Self> {
        match mode {
            OracleMode::Deterministic => Ok(GoldOracle::deterministic()),
            OracleMode::BradleyTerry => GoldOracle::bradley_terry(bt_scale, seed),
        }
    }

    /// Independent oracle with its own stream and a fresh call counter.
    pub fn fork(&self, stream_id: u64) -> Self {
        GoldOracle {
            mode: self.mode,
            bt_scale: self.bt_scale,
            seed: self.seed,
            rng: rng::substream(self.seed, "oracle", stream_id.wrapping_add(1)),
            calls: 0,
        }
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    /// Number of `annotate` calls answered so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn annotate(&mut self, x: &Instruction, a: usize, b: usize) -> Result<PreferenceLabel> {
        if a == b {
            return Err(Error::IdenticalPair(a));
        }
        let ra = x.response(a)?.gold_reward;
        let rb = x.response(b)?.gold_reward;
        self.calls += 1;
        let a_wins = match self.mode {
            OracleMode::Deterministic => ra > rb || (ra == rb && a < b),
            OracleMode::BradleyTerry => {
                let p = crate::sigmoid(self.bt_scale * (ra - rb));
                self.rng.random::<f64>() < p
            }
        };
        Ok(if a_wins {
            PreferenceLabel { winner: a, loser: b }
        } else {
            PreferenceLabel { winner: b, loser: a }
        })
    }
}

//! Softmax policy over each instruction's finite response pool.
//!
//! Logits are a per-instruction table plus, optionally, a shared linear head
//! over response attributes: `logit[x][y] = table[x][y] + w · φ(x, y)`. With no
//! head the policy is purely tabular. Either way every log-probability is an
//! exact softmax over the pool.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::World;
use crate::{fmt_real, log_sum_exp};

/// Response attributes laid out per instruction, `K * dim` values per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn from_world(world: &World) -> Self {
        let dim = world.feature_dim();
        let rows = world
            .instructions()
            .iter()
            .map(|x| x.pool.iter().flat_map(|r| r.features.iter().copied()).collect())
            .collect();
        FeatureTable { dim, rows }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, x: usize, y: usize) -> &[f64] {
        &self.rows[x][y * self.dim..(y + 1) * self.dim]
    }

    fn pool_size(&self, x: usize) -> usize {
        self.rows[x].len().checked_div(self.dim).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
struct LinearHead {
    weights: Vec<f64>,
    features: Arc<FeatureTable>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub n: usize,
    pub temperature: f64,
    pub top_k: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            n: 8,
            temperature: 1.0,
            top_k: 50,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("sampling.n", "must be at least 2"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("sampling.temperature", "must be positive"));
        }
        if self.top_k < 1 {
            return Err(Error::config("sampling.top_k", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TabularPolicy {
    table: Vec<Vec<f64>>,
    head: Option<LinearHead>,
    frozen: bool,
}

impl PartialEq for TabularPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.table == other.table
            && self.frozen == other.frozen
            && self.head.as_ref().map(|h| &h.weights) == other.head.as_ref().map(|h| &h.weights)
    }
}

impl TabularPolicy {
    pub fn from_logits(table: Vec<Vec<f64>>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::Structure("policy needs at least one instruction".into()));
        }
        for (x, row) in table.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Structure(format!("instruction {x} has an empty pool")));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    context: format!("logits of instruction {x}"),
                    detail: format!("value {v}"),
                });
            }
        }
        Ok(TabularPolicy {
            table,
            head: None,
            frozen: false,
        })
    }

    pub fn uniform(pool_sizes: &[usize]) -> Result<Self> {
        Self::from_logits(pool_sizes.iter().map(|&k| vec![0.0; k]).collect())
    }

    /// Attaches a zero-initialised shared head over `features`.
    pub fn with_head(mut self, features: Arc<FeatureTable>) -> Result<Self> {
        if features.rows.len() != self.table.len()
            || (0..self.table.len()).any(|x| features.pool_size(x) != self.table[x].len() && features.dim > 0)
        {
            return Err(Error::Structure("feature table does not match policy pools".into()));
        }
        self.head = Some(LinearHead {
            weights: vec![0.0; features.dim],
            features,
        });
        Ok(self)
    }

    pub fn num_instructions(&self) -> usize {
        self.table.len()
    }

    pub fn pool_size(&self, x: usize) -> Result<usize> {
        self.table.get(x).map(Vec::len).ok_or(Error::Lookup {
            what: "instruction",
            id: x,
        })
    }

    pub fn same_pools(&self, other: &TabularPolicy) -> bool {
        self.table.len() == other.table.len() && self.table.iter().zip(&other.table).all(|(a, b)| a.len() == b.len())
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }

    pub fn head_weights(&self) -> Option<&[f64]> {
        self.head.as_ref().map(|h| h.weights.as_slice())
    }

    pub fn features(&self) -> Option<&FeatureTable> {
        self.head.as_ref().map(|h| h.features.as_ref())
    }

    /// Effective logits of instruction `x`.
    pub fn logits(&self, x: usize) -> Result<Vec<f64>> {
        let row = self.table.get(x).ok_or(Error::Lookup {
            what: "instruction",
            id: x,
        })?;
        let mut out = row.clone();
        if let Some(h) = &self.head {
            if !h.weights.is_empty() {
                for (y, v) in out.iter_mut().enumerate() {
                    *v += dot(&h.weights, h.features.get(x, y));
                }
            }
        }
        Ok(out)
    }

    pub fn log_probs(&self, x: usize) -> Result<Vec<f64>> {
        let z = self.logits(x)?;
        let lse = log_sum_exp(&z);
        Ok(z.into_iter().map(|v| v - lse).collect())
    }

    pub fn probs(&self, x: usize) -> Result<Vec<f64>> {
        Ok(self.log_probs(x)?.into_iter().map(f64::exp).collect())
    }

    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        let lp = self.log_probs(x)?;
        lp.get(y).copied().ok_or(Error::Lookup { what: "response", id: y })
    }

    /// Draws `config.n` i.i.d. response ids from the temperature-scaled
    /// softmax restricted to the `top_k` highest logits.
    pub fn sample_responses<R: Rng + ?Sized>(&self, x: usize, config: &SamplingConfig, rng: &mut R) -> Result<Vec<usize>> {
        config.validate()?;
        let scaled: Vec<f64> = self.logits(x)?.into_iter().map(|z| z / config.temperature).collect();
        let keep = top_k_ids(&scaled, config.top_k);
        let kept: Vec<f64> = keep.iter().map(|&y| scaled[y]).collect();
        let lse = log_sum_exp(&kept);
        let mut cumulative = Vec::with_capacity(kept.len());
        let mut acc = 0.0;
        for v in &kept {
            acc += (v - lse).exp();
            cumulative.push(acc);
        }
        let total = acc;
        let draws = (0..config.n)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let pos = cumulative.partition_point(|&c| c <= u).min(keep.len() - 1);
                keep[pos]
            })
            .collect();
        Ok(draws)
    }

    /// Argmax of the effective logits, ties toward the lower id.
    pub fn greedy_response(&self, x: usize) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Deep, frozen copy.
    pub fn snapshot(&self) -> TabularPolicy {
        let mut copy = self.clone();
        copy.frozen = true;
        copy
    }

    /// Trainable copy of this policy (frozen or not).
    pub fn thawed(&self) -> TabularPolicy {
        let mut copy = self.clone();
        copy.frozen = false;
        copy
    }

    pub fn nudge_logit(&mut self, x: usize, y: usize, delta: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let slot = self
            .table
            .get_mut(x)
            .ok_or(Error::Lookup {
                what: "instruction",
                id: x,
            })?
            .get_mut(y)
            .ok_or(Error::Lookup { what: "response", id: y })?;
        *slot += delta;
        Ok(())
    }

    pub fn nudge_head(&mut self, delta: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let head = self
            .head
            .as_mut()
            .ok_or_else(|| Error::Structure("policy has no shared head".into()))?;
        if head.weights.len() != delta.len() {
            return Err(Error::Structure("head update has the wrong dimension".into()));
        }
        head.weights.iter_mut().zip(delta).for_each(|(w, d)| *w += d);
        Ok(())
    }

    /// Writes `#policy v1` and one `instruction<TAB>response<TAB>logit` line
    /// per response, using effective logits.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "#policy v1")?;
        for x in 0..self.table.len() {
            for (y, z) in self.logits(x)?.into_iter().enumerate() {
                writeln!(out, "{x}\t{y}\t{}", fmt_real(z))?;
            }
        }
        Ok(())
    }

    /// Reads a policy file into a purely tabular, trainable policy.
    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(h)) if h == "#policy v1" => {}
            Some(Err(e)) => return Err(e.into()),
            _ => return Err(Error::parse(1, "expected header '#policy v1'")),
        }
        let mut table: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::parse(lineno, "expected 3 tab-separated columns"));
            }
            let x: usize = cols[0].parse().map_err(|_| Error::parse(lineno, "invalid instruction_id"))?;
            let y: usize = cols[1].parse().map_err(|_| Error::parse(lineno, "invalid response_id"))?;
            let z: f64 = cols[2].parse().map_err(|_| Error::parse(lineno, "invalid logit"))?;
            if x == table.len() {
                table.push(Vec::new());
            }
            if x + 1 != table.len() {
                return Err(Error::parse(lineno, "instructions out of order"));
            }
            let row = &mut table[x];
            if y != row.len() {
                return Err(Error::parse(lineno, "responses out of order"));
            }
            row.push(z);
        }
        TabularPolicy::from_logits(table)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in v.iter().enumerate().skip(1) {
        if z > v[best] {
            best = i;
        }
    }
    best
}

/// Ids of the `k` largest values in ascending id order; ties at the cutoff
/// keep the lower ids.
fn top_k_ids(values: &[f64], k: usize) -> Vec<usize> {
    if k >= values.len() {
        return (0..values.len()).collect();
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::world::{generate_world, WorldConfig};

    fn policy(rows: &[&[f64]]) -> TabularPolicy {
        TabularPolicy::from_logits(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn log_prob_examples() {
        let p = TabularPolicy::uniform(&[4]).unwrap();
        assert!((p.log_prob(0, 2).unwrap() - (-1.386_294_361_119_890_6)).abs() < 1e-10);
        let p = policy(&[&[0.0, 3f64.ln()]]);
        assert!((p.log_prob(0, 1).unwrap() - (0.75f64).ln()).abs() < 1e-12);
        assert!((p.log_prob(0, 1).unwrap() - (-0.287_682_072_4)).abs() < 1e-10);
    }

    #[test]
    fn log_prob_lookup_errors() {
        let p = TabularPolicy::uniform(&[3]).unwrap();
        assert!(matches!(p.log_prob(1, 0), Err(Error::Lookup { what: "instruction", .. })));
        assert!(matches!(p.log_prob(0, 3), Err(Error::Lookup { what: "response", .. })));
    }

    #[test]
    fn shift_invariance() {
        let a = policy(&[&[0.3, -1.2, 2.0]]);
        let b = policy(&[&[5.3, 3.8, 7.0]]);
        for y in 0..3 {
            assert!((a.log_prob(0, y).unwrap() - b.log_prob(0, y).unwrap()).abs() < 1e-12);
        }
        assert_eq!(a.greedy_response(0).unwrap(), b.greedy_response(0).unwrap());
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(policy(&[&[0.2, 0.9, 0.1]]).greedy_response(0).unwrap(), 1);
        assert_eq!(policy(&[&[0.4, 0.4, 0.4]]).greedy_response(0).unwrap(), 0);
    }

    #[test]
    fn top_k_one_always_returns_argmax() {
        let p = policy(&[&[0.1, 1.5, 1.5, -3.0]]);
        let cfg = SamplingConfig {
            n: 50,
            temperature: 1.0,
            top_k: 1,
        };
        let draws = p.sample_responses(0, &cfg, &mut rng::seeded(3)).unwrap();
        assert_eq!(draws.len(), 50);
        assert!(draws.iter().all(|&y| y == 1));
    }

    #[test]
    fn default_sampling_returns_n_draws() {
        let p = TabularPolicy::uniform(&[8]).unwrap();
        let draws = p.sample_responses(0, &SamplingConfig::default(), &mut rng::seeded(1)).unwrap();
        assert_eq!(draws.len(), 8);
    }

    #[test]
    fn temperature_equals_rescaled_logits() {
        let z = [0.3, -1.0, 2.2, 0.0, 1.1];
        let t = 2.5;
        let hot = policy(&[&z]);
        let rescaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let cold = policy(&[&rescaled]);
        let cfg_t = SamplingConfig {
            n: 500,
            temperature: t,
            top_k: 50,
        };
        let cfg_1 = SamplingConfig {
            n: 500,
            temperature: 1.0,
            top_k: 50,
        };
        let a = hot.sample_responses(0, &cfg_t, &mut rng::seeded(42)).unwrap();
        let b = cold.sample_responses(0, &cfg_1, &mut rng::seeded(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_k_at_or_above_pool_size_is_identical() {
        let p = policy(&[&[0.3, -1.0, 2.2, 0.0]]);
        let a = p
            .sample_responses(
                0,
                &SamplingConfig {
                    n: 300,
                    temperature: 1.0,
                    top_k: 4,
                },
                &mut rng::seeded(5),
            )
            .unwrap();
        let b = p
            .sample_responses(
                0,
                &SamplingConfig {
                    n: 300,
                    temperature: 1.0,
                    top_k: 50,
                },
                &mut rng::seeded(5),
            )
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn top_k_cutoff_keeps_lower_ids_on_ties() {
        assert_eq!(top_k_ids(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
        assert_eq!(top_k_ids(&[1.0, 2.0, 0.0], 5), vec![0, 1, 2]);
    }

    #[test]
    fn invalid_sampling_config() {
        let p = TabularPolicy::uniform(&[3]).unwrap();
        for cfg in [
            SamplingConfig {
                n: 1,
                ..Default::default()
            },
            SamplingConfig {
                temperature: 0.0,
                ..Default::default()
            },
            SamplingConfig {
                top_k: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                p.sample_responses(0, &cfg, &mut rng::seeded(0)),
                Err(Error::Config { .. })
            ));
        }
    }

    #[test]
    fn snapshot_is_frozen_and_detached() {
        let mut p = policy(&[&[0.0, 1.0], &[2.0, -1.0]]);
        let snap = p.snapshot();
        assert!(snap.is_frozen());
        let before: Vec<f64> = (0..2).map(|y| snap.log_prob(1, y).unwrap()).collect();
        p.nudge_logit(1, 0, 3.0).unwrap();
        let after: Vec<f64> = (0..2).map(|y| snap.log_prob(1, y).unwrap()).collect();
        assert_eq!(before, after);
        let mut snap2 = snap.snapshot();
        assert_eq!(snap2.table(), snap.table());
        assert!(matches!(snap2.nudge_logit(0, 0, 1.0), Err(Error::Frozen)));
    }

    #[test]
    fn head_contributes_to_logits() {
        let cfg = WorldConfig {
            num_instructions: 5,
            pool_size: 3,
            feature_dim: 2,
            feature_share: 0.5,
            seed: 2,
            ..Default::default()
        };
        let w = generate_world(&cfg).unwrap();
        let features = Arc::new(FeatureTable::from_world(&w));
        let mut p = TabularPolicy::uniform(&w.pool_sizes())
            .unwrap()
            .with_head(features.clone())
            .unwrap();
        assert_eq!(p.logits(2).unwrap(), vec![0.0; 3]);
        p.nudge_head(&[0.5, -2.0]).unwrap();
        let phi = features.get(2, 1);
        let expect = 0.5 * phi[0] - 2.0 * phi[1];
        assert!((p.logits(2).unwrap()[1] - expect).abs() < 1e-15);
        assert!(p.nudge_head(&[1.0]).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let p = policy(&[&[0.1, -2.0 / 3.0, 1e-300], &[5.0, 7.25]]);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("#policy v1\n"));
        assert_eq!(TabularPolicy::read_from(&buf[..]).unwrap(), p);
        assert!(TabularPolicy::read_from("#policy v2\n".as_bytes()).is_err());
    }
}

//! Implicit rewards and pair margins.
//!
//! The implicit reward of a response is `log π(y|x) − log π_ref(y|x)`. For an
//! unordered pair the margin `rho` is `β·|Δ implicit|`, and the
//! length-normalised margin `rho_hat` divides each implicit reward by its
//! response length first (no β). Before annotation a pair has no chosen side,
//! so records keep magnitudes plus a provisional winner.

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginRecord {
    pub instruction_id: usize,
    /// Lower response id of the pair.
    pub a: usize,
    /// Higher response id of the pair.
    pub b: usize,
    pub implicit_a: f64,
    pub implicit_b: f64,
    pub rho: f64,
    pub rho_hat: f64,
    pub provisional_winner: usize,
}

/// One side of a pair: response id, implicit reward, token length.
#[derive(Debug, Clone, Copy)]
pub struct Side {
    pub id: usize,
    pub implicit: f64,
    pub length: u32,
}

impl MarginRecord {
    pub fn new(instruction_id: usize, first: Side, second: Side, beta: f64) -> Result<Self> {
        if first.id == second.id {
            return Err(Error::IdenticalPair(first.id));
        }
        check_beta(beta)?;
        if first.length == 0 || second.length == 0 {
            return Err(Error::config("length", "response lengths must be positive"));
        }
        let (lo, hi) = if first.id < second.id { (first, second) } else { (second, first) };
        let rho = beta * (lo.implicit - hi.implicit).abs();
        let rho_hat = (lo.implicit / f64::from(lo.length) - hi.implicit / f64::from(hi.length)).abs();
        let provisional_winner = if hi.implicit > lo.implicit { hi.id } else { lo.id };
        Ok(MarginRecord {
            instruction_id,
            a: lo.id,
            b: hi.id,
            implicit_a: lo.implicit,
            implicit_b: hi.implicit,
            rho,
            rho_hat,
            provisional_winner,
        })
    }

    pub fn provisional_loser(&self) -> usize {
        if self.provisional_winner == self.a {
            self.b
        } else {
            self.a
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.a == id || self.b == id
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::config("beta", "must be a positive finite number"))
    }
}

fn check_pools(policy: &TabularPolicy, reference: &TabularPolicy, x: usize) -> Result<()> {
    if policy.pool_size(x)? != reference.pool_size(x)? {
        return Err(Error::Structure(format!(
            "policy and reference disagree on the pool of instruction {x}"
        )));
    }
    Ok(())
}

pub fn implicit_reward(policy: &TabularPolicy, reference: &TabularPolicy, x: usize, y: usize) -> Result<f64> {
    check_pools(policy, reference, x)?;
    Ok(policy.log_prob(x, y)? - reference.log_prob(x, y)?)
}

/// Implicit rewards of every response in the pool of `x`.
pub fn implicit_rewards(policy: &TabularPolicy, reference: &TabularPolicy, x: usize) -> Result<Vec<f64>> {
    check_pools(policy, reference, x)?;
    let lp = policy.log_probs(x)?;
    let lr = reference.log_probs(x)?;
    Ok(lp.iter().zip(&lr).map(|(p, r)| p - r).collect())
}

pub fn pair_margin(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    x: usize,
    a: usize,
    b: usize,
    lengths: &[u32],
) -> Result<MarginRecord> {
    if a == b {
        return Err(Error::IdenticalPair(a));
    }
    let side = |id: usize| -> Result<Side> {
        Ok(Side {
            id,
            implicit: implicit_reward(policy, reference, x, id)?,
            length: *lengths.get(id).ok_or(Error::Lookup { what: "response", id })?,
        })
    };
    MarginRecord::new(x, side(a)?, side(b)?, beta)
}

/// Distinct ids in order of first appearance.
pub fn distinct_in_order(sampled: &[usize]) -> Vec<usize> {
    let mut seen = Vec::with_capacity(sampled.len());
    for &y in sampled {
        if !seen.contains(&y) {
            seen.push(y);
        }
    }
    seen
}

/// All unordered pairs of distinct sampled ids, sorted by `(a, b)`.
pub fn enumerate_pairs(sampled: &[usize]) -> Vec<(usize, usize)> {
    let mut ids = distinct_in_order(sampled);
    ids.sort_unstable();
    let mut pairs = Vec::with_capacity(ids.len() * ids.len().saturating_sub(1) / 2);
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Every candidate pair of one instruction, plus the order responses were drawn in.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub instruction_id: usize,
    pub sampled_order: Vec<usize>,
    pub records: Vec<MarginRecord>,
}

/// Builds candidate records from precomputed implicit rewards and lengths,
/// indexed by response id.
pub fn candidates_from_implicit(
    instruction_id: usize,
    sampled: &[usize],
    implicit: &[f64],
    lengths: &[u32],
    beta: f64,
) -> Result<Candidates> {
    let side = |id: usize| -> Result<Side> {
        Ok(Side {
            id,
            implicit: *implicit.get(id).ok_or(Error::Lookup { what: "response", id })?,
            length: *lengths.get(id).ok_or(Error::Lookup { what: "response", id })?,
        })
    };
    let records = enumerate_pairs(sampled)
        .into_iter()
        .map(|(a, b)| MarginRecord::new(instruction_id, side(a)?, side(b)?, beta))
        .collect::<Result<Vec<_>>>()?;
    Ok(Candidates {
        instruction_id,
        sampled_order: distinct_in_order(sampled),
        records,
    })
}

pub fn candidates(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    x: usize,
    sampled: &[usize],
    lengths: &[u32],
) -> Result<Candidates> {
    let implicit = implicit_rewards(policy, reference, x)?;
    candidates_from_implicit(x, sampled, &implicit, lengths, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn side(id: usize, implicit: f64, length: u32) -> Side {
        Side { id, implicit, length }
    }

    #[test]
    fn identical_policies_have_zero_implicit_reward() {
        let p = TabularPolicy::from_logits(vec![vec![0.2, -0.4, 1.0]]).unwrap();
        let r = p.snapshot();
        for y in 0..3 {
            assert_eq!(implicit_reward(&p, &r, 0, y).unwrap(), 0.0);
        }
    }

    #[test]
    fn implicit_reward_example() {
        let reference = TabularPolicy::uniform(&[2]).unwrap().snapshot();
        let policy = TabularPolicy::from_logits(vec![vec![1.0, 0.0]]).unwrap();
        let expect = 1.0 - ((std::f64::consts::E + 1.0) / 2.0).ln();
        let got = implicit_reward(&policy, &reference, 0, 0).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.3799).abs() < 1e-4);
        let shifted = TabularPolicy::from_logits(vec![vec![4.0, 3.0]]).unwrap();
        assert!((implicit_reward(&shifted, &reference, 0, 0).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn mismatched_pools_are_structural_errors() {
        let p = TabularPolicy::uniform(&[3]).unwrap();
        let r = TabularPolicy::uniform(&[4]).unwrap();
        assert!(matches!(implicit_reward(&p, &r, 0, 0), Err(Error::Structure(_))));
    }

    #[test]
    fn record_examples() {
        let rec = MarginRecord::new(0, side(3, 2.0, 1), side(1, 0.5, 1), 0.1).unwrap();
        assert_eq!((rec.a, rec.b), (1, 3));
        assert!((rec.rho - 0.15).abs() < 1e-12);
        assert_eq!(rec.provisional_winner, 3);

        let tie = MarginRecord::new(0, side(4, 0.7, 3), side(2, 0.7, 3), 0.1).unwrap();
        assert_eq!((tie.rho, tie.rho_hat, tie.provisional_winner), (0.0, 0.0, 2));

        let reorder = MarginRecord::new(0, side(0, 2.0, 4), side(1, 0.5, 1), 0.1).unwrap();
        assert_eq!(reorder.rho_hat, 0.0);
        assert!((reorder.rho - 0.15).abs() < 1e-12);
    }

    #[test]
    fn record_errors() {
        assert!(matches!(
            MarginRecord::new(0, side(1, 0.0, 1), side(1, 1.0, 1), 0.1),
            Err(Error::IdenticalPair(1))
        ));
        assert!(matches!(
            MarginRecord::new(0, side(0, 0.0, 1), side(1, 1.0, 1), 0.0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn pair_enumeration() {
        assert_eq!(enumerate_pairs(&[0, 1, 2, 3, 4, 5, 6, 7]).len(), 28);
        assert!(enumerate_pairs(&[3, 3, 3]).is_empty());
        assert_eq!(enumerate_pairs(&[2, 5, 2]), vec![(2, 5)]);
        assert_eq!(enumerate_pairs(&[5, 1, 3]), vec![(1, 3), (1, 5), (3, 5)]);
        assert_eq!(distinct_in_order(&[5, 1, 5, 3, 1]), vec![5, 1, 3]);
    }

    #[test]
    fn pair_margin_matches_record_and_is_symmetric() {
        let p = TabularPolicy::from_logits(vec![vec![0.3, 1.2, -0.5, 0.0]]).unwrap();
        let r = TabularPolicy::from_logits(vec![vec![0.0, 0.1, 0.4, -0.2]]).unwrap().snapshot();
        let lengths = [3, 9, 4, 2];
        let ab = pair_margin(&p, &r, 0.1, 0, 1, 2, &lengths).unwrap();
        let ba = pair_margin(&p, &r, 0.1, 0, 2, 1, &lengths).unwrap();
        assert_eq!(ab, ba);
        assert!(pair_margin(&p, &r, 0.1, 0, 2, 2, &lengths).is_err());
    }
}

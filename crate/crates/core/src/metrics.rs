//! Outcome and diagnostic measures: win rate, ranking accuracy, exact KL,
//! calibration tables and subset statistics.

use crate::error::{Error, Result};
use crate::margin::MarginRecord;
use crate::policy::TabularPolicy;
use crate::world::{reference_response, GoldOracle, World};
use crate::{sigmoid, stats};

/// Fraction of instructions whose greedy response beats the quantile
/// reference under the gold reward; ties count one half.
pub fn win_rate(policy: &TabularPolicy, world: &World, eval_instructions: &[usize], eval_quantile: f64) -> Result<f64> {
    if eval_instructions.is_empty() {
        return Err(Error::UndefinedMetric("win rate over an empty evaluation set".into()));
    }
    let mut score = 0.0;
    for &xid in eval_instructions {
        let x = world.instruction(xid)?;
        let ours = x.response(policy.greedy_response(xid)?)?.gold_reward;
        let theirs = x.response(reference_response(x, eval_quantile)?)?.gold_reward;
        if ours > theirs {
            score += 1.0;
        } else if ours == theirs {
            score += 0.5;
        }
    }
    Ok(score / eval_instructions.len() as f64)
}

/// Queries `oracle` once per record and scores provisional winners.
pub fn ranking_accuracy(records: &[MarginRecord], oracle: &mut GoldOracle, world: &World) -> Result<f64> {
    let winners = oracle_winners(records, oracle, world)?;
    ranking_accuracy_from_labels(records, &winners)
}

/// Ranking accuracy against winners that were already obtained.
pub fn ranking_accuracy_from_labels(records: &[MarginRecord], winners: &[usize]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("ranking accuracy of an empty record set".into()));
    }
    if records.len() != winners.len() {
        return Err(Error::Structure("one winner per record expected".into()));
    }
    let hits = records.iter().zip(winners).filter(|(r, &w)| r.provisional_winner == w).count();
    Ok(hits as f64 / records.len() as f64)
}

fn oracle_winners(records: &[MarginRecord], oracle: &mut GoldOracle, world: &World) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| Ok(oracle.annotate(world.instruction(r.instruction_id)?, r.a, r.b)?.winner))
        .collect()
}

/// KL(π ‖ π_ref) for one instruction, in nats.
pub fn kl_instruction(policy: &TabularPolicy, reference: &TabularPolicy, x: usize) -> Result<f64> {
    let lp = policy.log_probs(x)?;
    let lr = reference.log_probs(x)?;
    if lp.len() != lr.len() {
        return Err(Error::Structure(format!("pools differ for instruction {x}")));
    }
    Ok(lp.iter().zip(&lr).map(|(p, r)| p.exp() * (p - r)).sum::<f64>().max(0.0))
}

/// Mean exact KL(π ‖ π_ref) over `instructions`, in nats.
pub fn kl_divergence(policy: &TabularPolicy, reference: &TabularPolicy, instructions: &[usize]) -> Result<f64> {
    if instructions.is_empty() {
        return Err(Error::UndefinedMetric("KL over an empty instruction set".into()));
    }
    let total = instructions
        .iter()
        .map(|&x| kl_instruction(policy, reference, x))
        .sum::<Result<f64>>()?;
    Ok(total / instructions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationBin {
    pub margin_lo: f64,
    pub margin_hi: f64,
    pub mean_margin: f64,
    pub count: usize,
    pub empirical_accuracy: f64,
    /// Mean of `1 / (1 + e^{−ρ})` over the bin.
    pub logistic_prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationTable {
    pub bins: Vec<CalibrationBin>,
}

impl CalibrationTable {
    /// Spearman correlation between bin margin and empirical accuracy.
    pub fn trend(&self) -> Option<f64> {
        let m: Vec<f64> = self.bins.iter().map(|b| b.mean_margin).collect();
        let a: Vec<f64> = self.bins.iter().map(|b| b.empirical_accuracy).collect();
        stats::spearman(&m, &a)
    }
}

pub fn calibration_table(records: &[MarginRecord], oracle: &mut GoldOracle, world: &World, num_bins: usize) -> Result<CalibrationTable> {
    check_bins(records.len(), num_bins)?;
    let winners = oracle_winners(records, oracle, world)?;
    calibration_from_labels(records, &winners, num_bins)
}

fn check_bins(n: usize, num_bins: usize) -> Result<()> {
    if num_bins < 2 {
        return Err(Error::config("calibration_bins", "need at least 2 bins"));
    }
    if n < num_bins {
        return Err(Error::UndefinedMetric(format!("{n} records cannot fill {num_bins} bins")));
    }
    Ok(())
}

/// Equal-count bins over `rho`. Records with equal margins never straddle a
/// bin boundary, so heavy ties yield fewer, larger bins.
pub fn calibration_from_labels(records: &[MarginRecord], winners: &[usize], num_bins: usize) -> Result<CalibrationTable> {
    check_bins(records.len(), num_bins)?;
    if records.len() != winners.len() {
        return Err(Error::Structure("one winner per record expected".into()));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.sort_by(|&i, &j| records[i].rho.total_cmp(&records[j].rho));
    let n = idx.len();
    let mut cuts = vec![0];
    for k in 1..num_bins {
        let mut c = (k * n / num_bins).max(*cuts.last().unwrap());
        while c > 0 && c < n && records[idx[c]].rho == records[idx[c - 1]].rho {
            c += 1;
        }
        if c < n && c > *cuts.last().unwrap() {
            cuts.push(c);
        }
    }
    cuts.push(n);
    let bins = cuts
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| {
            let members = &idx[w[0]..w[1]];
            let count = members.len();
            let hits = members.iter().filter(|&&i| records[i].provisional_winner == winners[i]).count();
            let rhos = members.iter().map(|&i| records[i].rho);
            CalibrationBin {
                margin_lo: records[members[0]].rho,
                margin_hi: records[*members.last().unwrap()].rho,
                mean_margin: rhos.clone().sum::<f64>() / count as f64,
                count,
                empirical_accuracy: hits as f64 / count as f64,
                logistic_prediction: rhos.map(sigmoid).sum::<f64>() / count as f64,
            }
        })
        .collect();
    Ok(CalibrationTable { bins })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetStats {
    pub count: usize,
    pub mean_rho: Option<f64>,
    pub mean_rho_hat: Option<f64>,
}

pub fn subset_stats(records: &[MarginRecord]) -> SubsetStats {
    let rho: Vec<f64> = records.iter().map(|r| r.rho).collect();
    let rho_hat: Vec<f64> = records.iter().map(|r| r.rho_hat).collect();
    SubsetStats {
        count: records.len(),
        mean_rho: stats::mean(&rho),
        mean_rho_hat: stats::mean(&rho_hat),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margin::Side;
    use crate::world::{Instruction, Response};

    fn world(rewards: &[&[f64]]) -> World {
        let instructions = rewards
            .iter()
            .enumerate()
            .map(|(id, rs)| Instruction {
                id,
                pool: rs
                    .iter()
                    .enumerate()
                    .map(|(j, &gold_reward)| Response {
                        id: j,
                        length: 5,
                        gold_reward,
                        features: vec![],
                    })
                    .collect(),
            })
            .collect();
        World::new(instructions, 0).unwrap()
    }

    fn rec(x: usize, a: usize, b: usize, imp_a: f64, imp_b: f64) -> MarginRecord {
        MarginRecord::new(
            x,
            Side {
                id: a,
                implicit: imp_a,
                length: 1,
            },
            Side {
                id: b,
                implicit: imp_b,
                length: 1,
            },
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn win_rate_examples() {
        let w = world(&[&[0.1, 0.9, 0.5], &[1.0, 0.2, 0.3]]);
        let matching = TabularPolicy::from_logits(vec![vec![0.0, 5.0, 0.0], vec![5.0, 0.0, 0.0]]).unwrap();
        assert_eq!(win_rate(&matching, &w, &[0, 1], 1.0).unwrap(), 0.5);
        assert_eq!(win_rate(&matching, &w, &[0, 1], 0.5).unwrap(), 1.0);
        let bad = TabularPolicy::from_logits(vec![vec![5.0, 0.0, 0.0], vec![0.0, 5.0, 0.0]]).unwrap();
        assert_eq!(win_rate(&bad, &w, &[0, 1], 1.0).unwrap(), 0.0);
        assert!(win_rate(&bad, &w, &[], 1.0).is_err());
    }

    #[test]
    fn win_rate_ignores_monotone_reward_transforms() {
        let w = world(&[&[0.1, 0.9, 0.5], &[1.0, 0.2, 0.3], &[0.0, -1.0, 2.0]]);
        let t = world(&[
            &[0.1f64.exp(), 0.9f64.exp(), 0.5f64.exp()],
            &[1.0f64.exp(), 0.2f64.exp(), 0.3f64.exp()],
            &[1.0, (-1.0f64).exp(), 2.0f64.exp()],
        ]);
        let p = TabularPolicy::from_logits(vec![vec![0.0, 0.0, 1.0], vec![0.0, 2.0, 1.0], vec![3.0, 0.0, 1.0]]).unwrap();
        for q in [0.3, 0.5, 0.9, 1.0] {
            assert_eq!(win_rate(&p, &w, &[0, 1, 2], q).unwrap(), win_rate(&p, &t, &[0, 1, 2], q).unwrap());
        }
    }

    #[test]
    fn ranking_accuracy_examples() {
        let w = world(&[&[0.1, 0.9, 0.5]]);
        let mut oracle = GoldOracle::deterministic();
        let right = [rec(0, 0, 1, 0.0, 1.0), rec(0, 1, 2, 2.0, 0.0)];
        assert_eq!(ranking_accuracy(&right, &mut oracle, &w).unwrap(), 1.0);
        let mixed = [rec(0, 0, 1, 0.0, 1.0), rec(0, 0, 2, 2.0, 0.0)];
        assert_eq!(ranking_accuracy(&mixed, &mut oracle, &w).unwrap(), 0.5);
        assert_eq!(ranking_accuracy(&right[..1], &mut oracle, &w).unwrap(), 1.0);
        assert!(ranking_accuracy(&[], &mut oracle, &w).is_err());
        assert_eq!(oracle.calls(), 5);
    }

    #[test]
    fn kl_examples() {
        let r = TabularPolicy::uniform(&[2]).unwrap();
        assert_eq!(kl_divergence(&r, &r, &[0]).unwrap(), 0.0);
        let p = TabularPolicy::from_logits(vec![vec![9f64.ln(), 0.0]]).unwrap();
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_divergence(&p, &r, &[0]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn calibration_zero_margin_bin() {
        let records: Vec<_> = (0..4).map(|x| rec(x, 0, 1, 0.0, 0.0)).collect();
        let winners = vec![0, 1, 0, 1];
        let table = calibration_from_labels(&records, &winners, 2).unwrap();
        assert_eq!(table.bins.len(), 1);
        assert_eq!(table.bins[0].count, 4);
        assert_eq!(table.bins[0].logistic_prediction, 0.5);
        assert_eq!(table.bins[0].empirical_accuracy, 0.5);
    }

    #[test]
    fn calibration_bins_are_ordered_and_disjoint() {
        let records: Vec<_> = (0..10).map(|i| rec(i, 0, 1, (i / 3) as f64, 0.0)).collect();
        let winners: Vec<usize> = (0..10).map(|i| if i % 2 == 0 { 0 } else { 1 }).collect();
        let table = calibration_from_labels(&records, &winners, 3).unwrap();
        assert_eq!(table.bins.iter().map(|b| b.count).sum::<usize>(), 10);
        for w in table.bins.windows(2) {
            assert!(w[0].margin_hi < w[1].margin_lo);
        }
        assert!(calibration_from_labels(&records[..2], &winners[..2], 3).is_err());
        assert!(calibration_from_labels(&records, &winners, 1).is_err());
    }

    #[test]
    fn subset_stats_examples() {
        let s = subset_stats(&[rec(0, 0, 1, 0.1, 0.0), rec(1, 0, 1, 0.3, 0.0)]);
        assert_eq!(s.count, 2);
        assert!((s.mean_rho.unwrap() - 0.2).abs() < 1e-12);
        let empty = subset_stats(&[]);
        assert_eq!((empty.count, empty.mean_rho, empty.mean_rho_hat), (0, None, None));
    }
}

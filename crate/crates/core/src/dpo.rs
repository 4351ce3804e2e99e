//! Direct preference objectives over annotated trios, their exact gradients
//! with respect to policy logits, and a mini-batch gradient-descent trainer.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::margin::check_beta;
use crate::policy::TabularPolicy;
use crate::{fmt_real, rng, sigmoid};

/// An instruction with its oracle-oriented chosen (`y_w`) and rejected (`y_l`) responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnotatedTrio {
    pub instruction_id: usize,
    pub chosen: usize,
    pub rejected: usize,
}

impl AnnotatedTrio {
    pub fn new(instruction_id: usize, chosen: usize, rejected: usize) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::IdenticalPair(chosen));
        }
        Ok(AnnotatedTrio {
            instruction_id,
            chosen,
            rejected,
        })
    }

    pub fn swapped(&self) -> Self {
        AnnotatedTrio {
            instruction_id: self.instruction_id,
            chosen: self.rejected,
            rejected: self.chosen,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Dpo,
    Ipo,
    Slic,
}

/// Which parameters a training run updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// Per-instruction logit table only.
    #[default]
    Table,
    /// Shared attribute head only.
    Head,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub loss: LossKind,
    /// Step size for the per-instruction logits.
    pub step_size: f64,
    /// Step size for the shared head.
    pub head_step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub target: TrainTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.1,
            loss: LossKind::Dpo,
            step_size: 0.05,
            head_step_size: 0.05,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            target: TrainTarget::Table,
        }
    }
}

impl TrainConfig {
    /// Values used for the 8B-parameter runs this engine mirrors; recorded
    /// for reference, far too small a step for tabular logits.
    pub fn reference_llm() -> Self {
        TrainConfig {
            beta: 0.1,
            step_size: 5e-7,
            head_step_size: 5e-7,
            epochs: 1,
            batch_size: 128,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("train.step_size", "must be a non-negative finite number"));
        }
        if !(self.head_step_size >= 0.0 && self.head_step_size.is_finite()) {
            return Err(Error::config("train.head_step_size", "must be a non-negative finite number"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// `β·[(log π(y_w) − log π_ref(y_w)) − (log π(y_l) − log π_ref(y_l))]`.
pub fn signed_margin(policy: &TabularPolicy, reference: &TabularPolicy, beta: f64, trio: &AnnotatedTrio) -> Result<f64> {
    let x = trio.instruction_id;
    if policy.pool_size(x)? != reference.pool_size(x)? {
        return Err(Error::Structure(format!("pools differ for instruction {x}")));
    }
    let lp = policy.log_probs(x)?;
    let lr = reference.log_probs(x)?;
    let at = |v: &[f64], y: usize| v.get(y).copied().ok_or(Error::Lookup { what: "response", id: y });
    let w = at(&lp, trio.chosen)? - at(&lr, trio.chosen)?;
    let l = at(&lp, trio.rejected)? - at(&lr, trio.rejected)?;
    Ok(beta * (w - l))
}

pub fn loss(rho: f64, kind: LossKind) -> f64 {
    match kind {
        // −log σ(ρ) = log(1 + e^{−ρ})
        LossKind::Dpo => {
            if rho > 0.0 {
                (-rho).exp().ln_1p()
            } else {
                -rho + rho.exp().ln_1p()
            }
        }
        LossKind::Ipo => (rho - 1.0).powi(2),
        LossKind::Slic => (1.0 - rho).max(0.0),
    }
}

/// Derivative of [`loss`] with respect to ρ (0 at the SLiC hinge).
pub fn loss_slope(rho: f64, kind: LossKind) -> f64 {
    match kind {
        LossKind::Dpo => -sigmoid(-rho),
        LossKind::Ipo => 2.0 * (rho - 1.0),
        LossKind::Slic => {
            if rho < 1.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

/// Gradient over the logits of one instruction. Within a pool the
/// log-partition terms cancel in ρ, so only the chosen and rejected entries
/// are non-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrad {
    pub instruction_id: usize,
    pub entries: Vec<(usize, f64)>,
}

impl LogitGrad {
    pub fn to_dense(&self, pool_size: usize) -> Vec<f64> {
        let mut out = vec![0.0; pool_size];
        for &(y, g) in &self.entries {
            out[y] += g;
        }
        out
    }
}

pub fn grad_logits(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    beta: f64,
    trio: &AnnotatedTrio,
    kind: LossKind,
) -> Result<LogitGrad> {
    let rho = signed_margin(policy, reference, beta, trio)?;
    let g = beta * loss_slope(rho, kind);
    Ok(LogitGrad {
        instruction_id: trio.instruction_id,
        entries: vec![(trio.chosen, g), (trio.rejected, -g)],
    })
}

/// Gradient of the trio loss with respect to the shared head weights.
pub fn grad_head(policy: &TabularPolicy, reference: &TabularPolicy, beta: f64, trio: &AnnotatedTrio, kind: LossKind) -> Result<Vec<f64>> {
    let features = policy
        .features()
        .ok_or_else(|| Error::Structure("policy has no shared head".into()))?;
    let grad = grad_logits(policy, reference, beta, trio, kind)?;
    let mut out = vec![0.0; features.dim()];
    for (y, g) in grad.entries {
        for (o, f) in out.iter_mut().zip(features.get(trio.instruction_id, y)) {
            *o += g * f;
        }
    }
    Ok(out)
}

/// Mean loss and mean signed margin of `trios` at the current parameters.
pub fn evaluate(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    trios: &[AnnotatedTrio],
    beta: f64,
    kind: LossKind,
) -> Result<(f64, f64)> {
    if trios.is_empty() {
        return Err(Error::Training("no trios to evaluate".into()));
    }
    let mut total_loss = 0.0;
    let mut total_margin = 0.0;
    for t in trios {
        let rho = signed_margin(policy, reference, beta, t)?;
        total_loss += loss(rho, kind);
        total_margin += rho;
    }
    let n = trios.len() as f64;
    Ok((total_loss / n, total_margin / n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_signed_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn mean_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    /// CSV with header `epoch,mean_loss,mean_signed_margin`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "mean_loss", "mean_signed_margin"]).map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), fmt_real(e.mean_loss), fmt_real(e.mean_signed_margin)])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Mini-batch gradient descent on `trios` against a frozen reference.
///
/// Each epoch shuffles the trios with a stream keyed by `config.seed` and
/// averages gradients within a batch. The reported per-epoch loss and margin
/// are means over the trios as they were visited.
pub fn train(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    trios: &[AnnotatedTrio],
    config: &TrainConfig,
) -> Result<(TabularPolicy, TrainReport)> {
    config.validate()?;
    if !reference.is_frozen() {
        return Err(Error::Training("reference policy must be frozen".into()));
    }
    if trios.is_empty() {
        return Err(Error::Training("no trios to train on".into()));
    }
    if !policy.same_pools(reference) {
        return Err(Error::Structure("policy and reference pools differ".into()));
    }
    let use_table = matches!(config.target, TrainTarget::Table | TrainTarget::Both);
    let head_dim = match config.target {
        TrainTarget::Table => None,
        _ => Some(
            policy
                .features()
                .ok_or_else(|| Error::Training("head training needs a policy with a shared head".into()))?
                .dim(),
        ),
    };

    let mut current = policy.thawed();
    let mut rng = rng::substream(config.seed, "training", 0);
    let mut order: Vec<usize> = (0..trios.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut margin_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let scale = config.step_size / batch.len() as f64;
            let head_scale = config.head_step_size / batch.len() as f64;
            let mut table_steps: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * batch.len());
            let mut head_step = head_dim.map(|d| vec![0.0; d]);
            for &i in batch {
                let trio = &trios[i];
                let rho = signed_margin(&current, reference, config.beta, trio)?;
                let l = loss(rho, config.loss);
                if !l.is_finite() || !rho.is_finite() {
                    return Err(Error::Numerical {
                        context: "training loss".into(),
                        detail: format!(
                            "epoch {epoch}, instruction {}, chosen {}, rejected {}: rho = {rho}, loss = {l}",
                            trio.instruction_id, trio.chosen, trio.rejected
                        ),
                    });
                }
                loss_sum += l;
                margin_sum += rho;
                let g = config.beta * loss_slope(rho, config.loss);
                if use_table {
                    table_steps.push((trio.instruction_id, trio.chosen, g));
                    table_steps.push((trio.instruction_id, trio.rejected, -g));
                }
                if let (Some(acc), Some(features)) = (head_step.as_mut(), current.features()) {
                    let fw = features.get(trio.instruction_id, trio.chosen);
                    let fl = features.get(trio.instruction_id, trio.rejected);
                    for ((a, w), l) in acc.iter_mut().zip(fw).zip(fl) {
                        *a += g * (w - l);
                    }
                }
            }
            for (x, y, g) in table_steps {
                current.nudge_logit(x, y, -scale * g)?;
            }
            if let Some(acc) = head_step {
                let delta: Vec<f64> = acc.into_iter().map(|g| -head_scale * g).collect();
                current.nudge_head(&delta)?;
            }
        }
        let n = trios.len() as f64;
        report.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / n,
            mean_signed_margin: margin_sum / n,
        });
    }
    Ok((current, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln2() -> f64 {
        std::f64::consts::LN_2
    }

    #[test]
    fn loss_examples() {
        assert!((loss(0.0, LossKind::Dpo) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((loss(0.0, LossKind::Dpo) - ln2()).abs() < 1e-15);
        assert_eq!(loss(1.0, LossKind::Ipo), 0.0);
        assert_eq!(loss(2.0, LossKind::Slic), 0.0);
        assert_eq!(loss(0.0, LossKind::Slic), 1.0);
        assert!(loss(-800.0, LossKind::Dpo).is_finite());
        assert!(loss(800.0, LossKind::Dpo) >= 0.0);
    }

    #[test]
    fn dpo_loss_and_gradient_decrease_in_margin() {
        let grid: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.025).collect();
        for w in grid.windows(2) {
            assert!(loss(w[1], LossKind::Dpo) < loss(w[0], LossKind::Dpo));
            assert!(loss_slope(w[1], LossKind::Dpo).abs() < loss_slope(w[0], LossKind::Dpo).abs());
        }
    }

    #[test]
    fn signed_margin_basics() {
        let p = TabularPolicy::from_logits(vec![vec![0.4, -0.2, 1.3]]).unwrap();
        let r = p.snapshot();
        let t = AnnotatedTrio::new(0, 2, 0).unwrap();
        assert_eq!(signed_margin(&p, &r, 0.1, &t).unwrap(), 0.0);
        let q = TabularPolicy::from_logits(vec![vec![1.0, -0.2, 0.3]]).unwrap();
        let m = signed_margin(&q, &r, 0.1, &t).unwrap();
        assert_eq!(signed_margin(&q, &r, 0.1, &t.swapped()).unwrap(), -m);
        assert!(AnnotatedTrio::new(0, 1, 1).is_err());
    }

    #[test]
    fn gradient_at_reference_point() {
        let p = TabularPolicy::uniform(&[4]).unwrap();
        let r = p.snapshot();
        let g = grad_logits(&p, &r, 0.1, &AnnotatedTrio::new(0, 1, 3).unwrap(), LossKind::Dpo).unwrap();
        let dense = g.to_dense(4);
        assert_eq!(dense, vec![0.0, -0.05, 0.0, 0.05]);
    }

    #[test]
    fn ipo_stationary_at_unit_margin() {
        let r = TabularPolicy::uniform(&[2]).unwrap().snapshot();
        // β·(z_w − z_l) = 1 with β = 0.5
        let p = TabularPolicy::from_logits(vec![vec![2.0, 0.0]]).unwrap();
        let t = AnnotatedTrio::new(0, 0, 1).unwrap();
        assert!((signed_margin(&p, &r, 0.5, &t).unwrap() - 1.0).abs() < 1e-15);
        let g = grad_logits(&p, &r, 0.5, &t, LossKind::Ipo).unwrap();
        assert!(g.entries.iter().all(|&(_, v)| v.abs() < 1e-14));
    }

    #[test]
    fn training_errors() {
        let p = TabularPolicy::uniform(&[3]).unwrap();
        let t = [AnnotatedTrio::new(0, 0, 1).unwrap()];
        let cfg = TrainConfig::default();
        assert!(matches!(train(&p, &p.snapshot(), &[], &cfg), Err(Error::Training(_))));
        assert!(matches!(train(&p, &p, &t, &cfg), Err(Error::Training(_))));
        let head_cfg = TrainConfig {
            target: TrainTarget::Head,
            ..cfg
        };
        assert!(matches!(train(&p, &p.snapshot(), &t, &head_cfg), Err(Error::Training(_))));
        let bad = TrainConfig { epochs: 0, ..cfg };
        assert!(matches!(train(&p, &p.snapshot(), &t, &bad), Err(Error::Config { .. })));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = TabularPolicy::from_logits(vec![vec![0.0, 0.0]]).unwrap();
        let r = TabularPolicy::from_logits(vec![vec![0.0, 0.0]]).unwrap().snapshot();
        let t = [AnnotatedTrio::new(0, 0, 1).unwrap()];
        let cfg = TrainConfig {
            beta: 1e308,
            step_size: 1e308,
            loss: LossKind::Ipo,
            epochs: 3,
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(train(&p, &r, &t, &cfg), Err(Error::Numerical { .. })));
    }

    #[test]
    fn zero_step_leaves_policy_unchanged() {
        let p = TabularPolicy::from_logits(vec![vec![0.3, -0.1, 0.8], vec![0.0, 1.0, 2.0]]).unwrap();
        let r = TabularPolicy::uniform(&[3, 3]).unwrap().snapshot();
        let trios = [AnnotatedTrio::new(0, 0, 2).unwrap(), AnnotatedTrio::new(1, 2, 1).unwrap()];
        let cfg = TrainConfig {
            step_size: 0.0,
            epochs: 4,
            ..Default::default()
        };
        let (q, report) = train(&p, &r, &trios, &cfg).unwrap();
        assert_eq!(q.table(), p.table());
        let losses = report.mean_losses();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn report_csv_header() {
        let report = TrainReport {
            epochs: vec![EpochStats {
                epoch: 1,
                mean_loss: 0.5,
                mean_signed_margin: 0.25,
            }],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,mean_loss,mean_signed_margin\n1,"));
    }
}

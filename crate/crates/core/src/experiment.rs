//! The iterative annotate-select-train loop and multi-arm, multi-seed runs.
//!
//! A run for one seed regenerates the world, initialises the reference and
//! starting policies, optionally warms the starting policy up on an offline
//! preference set, and then walks every arm through its iterations. Arms share
//! the seed's world, initial policies, evaluation set and instruction order,
//! so arm comparisons within a seed are paired.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dpo::{self, AnnotatedTrio, TrainConfig};
use crate::error::{Error, Result};
use crate::margin::{self, MarginRecord};
use crate::metrics;
use crate::policy::{FeatureTable, SamplingConfig, TabularPolicy};
use crate::rng;
use crate::select::{self, BudgetSchedule, CorpusBudget, Normalization, SampledInstruction, ScheduleKind, SelectKind, Strategy};
use crate::world::{generate_world, GoldOracle, OracleMode, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Weight of the standardised gold reward in the reference logits.
    pub signal_coefficient: f64,
    pub noise_sd: f64,
    /// Instructions used to warm the starting policy up before iteration 1.
    pub offline_instructions: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            signal_coefficient: 0.5,
            noise_sd: 1.0,
            offline_instructions: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scope: EvalScope,
    pub instructions: usize,
    pub quantile: f64,
    pub calibration_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scope: EvalScope::Heldout,
            instructions: 500,
            quantile: 0.9,
            calibration_bins: 10,
        }
    }
}

/// Which instructions the win rate is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalScope {
    /// A held-out set never used for training.
    #[default]
    Heldout,
    /// Every instruction the arm's schedule hands out, trained or not.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub mode: OracleMode,
    pub bt_scale: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            mode: OracleMode::Deterministic,
            bt_scale: 1.0,
        }
    }
}

/// Corpus budgets of an arm: a fraction of each iteration's pooled pairs, or
/// one absolute count per iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum ArmBudget {
    Fraction(f64),
    Counts(Vec<usize>),
}

impl ArmBudget {
    fn for_iteration(&self, i: usize) -> Result<CorpusBudget> {
        match self {
            ArmBudget::Fraction(f) => Ok(CorpusBudget::Fraction(*f)),
            ArmBudget::Counts(c) => c
                .get(i)
                .map(|&n| CorpusBudget::Count(n))
                .ok_or_else(|| Error::config("corpus_budgets", format!("no budget for iteration {}", i + 1))),
        }
    }
}

/// One named strategy/schedule combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub instance: Strategy,
    pub corpus: Strategy,
    pub schedule: BudgetSchedule,
    pub budget: ArmBudget,
}

impl Arm {
    pub fn new(
        name: impl Into<String>,
        instance: SelectKind,
        corpus: SelectKind,
        normalization: Normalization,
        schedule: BudgetSchedule,
        budget: ArmBudget,
    ) -> Self {
        Arm {
            name: name.into(),
            instance: Strategy::instance(instance, normalization),
            corpus: Strategy::corpus(corpus, normalization),
            schedule,
            budget,
        }
    }

    pub fn always_smallest(schedule: BudgetSchedule, budget: ArmBudget) -> Self {
        Arm::new(
            "always_smallest",
            SelectKind::Smallest,
            SelectKind::Smallest,
            Normalization::Raw,
            schedule,
            budget,
        )
    }

    pub fn always_random(schedule: BudgetSchedule, budget: ArmBudget) -> Self {
        Arm::new(
            "always_random",
            SelectKind::Random,
            SelectKind::Random,
            Normalization::Raw,
            schedule,
            budget,
        )
    }

    /// Always-smallest over every instruction of `schedule` in one round.
    pub fn single_iter(schedule: &BudgetSchedule, budget: ArmBudget) -> Result<Self> {
        let budget = match budget {
            ArmBudget::Counts(c) => ArmBudget::Counts(vec![c.iter().sum()]),
            f => f,
        };
        let one = select::make_schedule(ScheduleKind::Constant, &[schedule.total()])?;
        Ok(Arm::new(
            "single_iter",
            SelectKind::Smallest,
            SelectKind::Smallest,
            Normalization::Raw,
            one,
            budget,
        ))
    }

    fn validate(&self) -> Result<()> {
        if let ArmBudget::Counts(c) = &self.budget {
            if c.len() != self.schedule.iterations() {
                return Err(Error::config(
                    "corpus_budgets",
                    format!("arm {} needs one budget per iteration", self.name),
                ));
            }
        }
        if let ArmBudget::Fraction(f) = self.budget {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config("corpus_fraction", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub world: WorldConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub init: InitConfig,
    pub eval: EvalConfig,
    pub oracle: OracleConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.sampling.validate()?;
        self.train.validate()?;
        if self.init.noise_sd < 0.0 || !self.init.noise_sd.is_finite() {
            return Err(Error::config("init.noise_sd", "must be non-negative"));
        }
        if !self.init.signal_coefficient.is_finite() {
            return Err(Error::config("init.signal_coefficient", "must be finite"));
        }
        if self.eval.scope == EvalScope::Heldout && self.eval.instructions == 0 {
            return Err(Error::config("eval.instructions", "must be positive"));
        }
        if !(self.eval.quantile > 0.0 && self.eval.quantile <= 1.0) {
            return Err(Error::config("eval.quantile", "must lie in (0, 1]"));
        }
        if self.oracle.mode == OracleMode::BradleyTerry && (self.oracle.bt_scale.is_nan() || self.oracle.bt_scale <= 0.0) {
            return Err(Error::config("oracle.bt_scale", "must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("run.seeds", "at least one seed is required"));
        }
        if self.arms.is_empty() {
            return Err(Error::config("run.arms", "at least one arm is required"));
        }
        for arm in &self.arms {
            arm.validate()?;
        }
        let needed =
            self.init.offline_instructions + self.eval.instructions + self.arms.iter().map(|a| a.schedule.total()).max().unwrap_or(0);
        if needed > self.world.num_instructions {
            return Err(Error::config(
                "world.num_instructions",
                format!("plan needs {needed} instructions but the world has {}", self.world.num_instructions),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub instructions: usize,
    pub trained_instances: usize,
    pub annotations: u64,
    pub win_rate: f64,
    pub ranking_accuracy: f64,
    pub mean_kl: f64,
    pub mean_selected_margin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub seed: u64,
    pub arm: String,
    /// Win rate of the starting policy, before any online iteration.
    pub initial_win_rate: f64,
    pub iterations: Vec<IterationRecord>,
    pub annotation_calls: u64,
}

impl ArmRun {
    pub fn final_win_rate(&self) -> f64 {
        self.iterations.last().map_or(self.initial_win_rate, |r| r.win_rate)
    }
}

/// Per-seed state shared by all arms.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub world: Arc<World>,
    pub reference: TabularPolicy,
    pub start: TabularPolicy,
    pub eval: Vec<usize>,
    /// Instructions available to the online iterations, in consumption order.
    pub pool: Vec<usize>,
    pub offline_report: Option<dpo::TrainReport>,
}

/// Reference logits `signal · standardised(gold) + N(0, noise_sd²)`; the
/// returned starting policy equals the reference.
pub fn init_policies(world: &World, signal_coefficient: f64, noise_sd: f64, seed: u64) -> Result<(TabularPolicy, TabularPolicy)> {
    if noise_sd.is_nan() || noise_sd < 0.0 {
        return Err(Error::config("init.noise_sd", "must be non-negative"));
    }
    let (mean, sd) = world.gold_moments();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let mut r = rng::substream(seed, "init", 0);
    let table = world
        .instructions()
        .iter()
        .map(|x| {
            x.pool
                .iter()
                .map(|resp| {
                    let noise: f64 = r.sample(StandardNormal);
                    signal_coefficient * (resp.gold_reward - mean) / sd + noise_sd * noise
                })
                .collect()
        })
        .collect();
    let mut base = TabularPolicy::from_logits(table)?;
    if world.feature_dim() > 0 {
        base = base.with_head(Arc::new(FeatureTable::from_world(world)))?;
    }
    let reference = base.snapshot();
    Ok((reference, base))
}

/// Draws `n` responses per instruction from `policy`.
pub fn sample_instructions(
    policy: &TabularPolicy,
    world: &World,
    ids: &[usize],
    sampling: &SamplingConfig,
    rng: &mut rng::StreamRng,
) -> Result<Vec<SampledInstruction>> {
    ids.iter()
        .map(|&x| {
            Ok(SampledInstruction {
                instruction_id: x,
                sampled: policy.sample_responses(x, sampling, rng)?,
                lengths: world.instruction(x)?.lengths(),
            })
        })
        .collect()
}

impl SeedContext {
    pub fn build(plan: &ExperimentPlan, seed: u64) -> Result<Self> {
        let world_config = WorldConfig {
            seed,
            ..plan.world.clone()
        };
        let world = Arc::new(generate_world(&world_config)?);
        let (reference, mut start) = init_policies(&world, plan.init.signal_coefficient, plan.init.noise_sd, seed)?;

        let mut order: Vec<usize> = (0..world.len()).collect();
        order.shuffle(&mut rng::substream(seed, "partition", 0));
        let n_off = plan.init.offline_instructions;
        let n_eval = plan.eval.instructions;
        let offline = &order[..n_off];
        let eval = order[n_off..n_off + n_eval].to_vec();
        let pool = order[n_off + n_eval..].to_vec();

        let mut offline_report = None;
        if n_off > 0 {
            // Offline preference data predates the online budget, so it is
            // labelled by a separate oracle whose calls are not counted.
            let mut oracle = GoldOracle::new(plan.oracle.mode, plan.oracle.bt_scale, seed)?.fork(u64::MAX);
            let mut r = rng::substream(seed, "offline", 0);
            let mut trios = Vec::with_capacity(n_off);
            for s in sample_instructions(&reference, &world, offline, &plan.sampling, &mut r)? {
                let order = margin::distinct_in_order(&s.sampled);
                if order.len() < 2 {
                    continue;
                }
                let label = oracle.annotate(world.instruction(s.instruction_id)?, order[0], order[1])?;
                trios.push(AnnotatedTrio::new(s.instruction_id, label.winner, label.loser)?);
            }
            if !trios.is_empty() {
                let cfg = TrainConfig {
                    seed: rng::stream_key(seed, "offline-training", 0),
                    ..plan.train
                };
                let (trained, report) = dpo::train(&start, &reference, &trios, &cfg)?;
                start = trained;
                offline_report = Some(report);
            }
        }
        Ok(SeedContext {
            seed,
            world,
            reference,
            start,
            eval,
            pool,
            offline_report,
        })
    }

    /// Disjoint instruction sets of the arm's iterations.
    pub fn iteration_sets(&self, schedule: &BudgetSchedule) -> Result<Vec<Vec<usize>>> {
        if schedule.total() > self.pool.len() {
            return Err(Error::config(
                "schedule.sizes",
                format!("needs {} instructions, {} available", schedule.total(), self.pool.len()),
            ));
        }
        let mut start = 0;
        Ok(schedule
            .per_iteration()
            .iter()
            .map(|&m| {
                let set = self.pool[start..start + m].to_vec();
                start += m;
                set
            })
            .collect())
    }
}

/// Outcome of one iteration.
#[derive(Debug, Clone)]
pub struct IterationOutcome {
    pub policy: TabularPolicy,
    pub record: IterationRecord,
    pub selected: Vec<MarginRecord>,
    pub trios: Vec<AnnotatedTrio>,
}

/// Step i: sample from the current policy, rank margins, annotate only the
/// selected pairs, train against the fixed reference, and evaluate.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration(
    ctx: &SeedContext,
    plan: &ExperimentPlan,
    arm: &Arm,
    policy: &TabularPolicy,
    oracle: &mut GoldOracle,
    iteration: usize,
    instructions: &[usize],
    eval: &[usize],
) -> Result<IterationOutcome> {
    let seed = ctx.seed;
    let idx = iteration as u64;
    let sample = sample_instructions(
        policy,
        &ctx.world,
        instructions,
        &plan.sampling,
        &mut rng::substream(seed, "sampling", idx),
    )?;
    let budget = arm.budget.for_iteration(iteration - 1)?;
    let selected = select::select_for_iteration(
        &sample,
        &arm.instance,
        &arm.corpus,
        budget,
        plan.train.beta,
        policy,
        &ctx.reference,
        &mut rng::substream(seed, "selection", idx),
    )?;
    if selected.is_empty() {
        return Err(Error::Iteration {
            iteration,
            reason: "selection is empty".into(),
        });
    }

    let calls_before = oracle.calls();
    let mut trios = Vec::with_capacity(selected.len());
    let mut winners = Vec::with_capacity(selected.len());
    for rec in &selected {
        let label = oracle.annotate(ctx.world.instruction(rec.instruction_id)?, rec.a, rec.b)?;
        winners.push(label.winner);
        trios.push(AnnotatedTrio::new(rec.instruction_id, label.winner, label.loser)?);
    }
    let annotations = oracle.calls() - calls_before;
    assert_eq!(
        annotations as usize,
        selected.len(),
        "oracle calls must equal the selected set size"
    );

    let train_cfg = TrainConfig {
        seed: rng::stream_key(seed, "training", idx),
        ..plan.train
    };
    let (trained, _) = dpo::train(policy, &ctx.reference, &trios, &train_cfg)?;

    let mut touched: Vec<usize> = selected.iter().map(|r| r.instruction_id).collect();
    touched.sort_unstable();
    touched.dedup();
    let record = IterationRecord {
        iteration,
        instructions: instructions.len(),
        trained_instances: trios.len(),
        annotations,
        win_rate: metrics::win_rate(&trained, &ctx.world, eval, plan.eval.quantile)?,
        ranking_accuracy: metrics::ranking_accuracy_from_labels(&selected, &winners)?,
        mean_kl: metrics::kl_divergence(&trained, &ctx.reference, &touched)?,
        mean_selected_margin: metrics::subset_stats(&selected).mean_rho.unwrap_or(0.0),
    };
    Ok(IterationOutcome {
        policy: trained,
        record,
        selected,
        trios,
    })
}

/// Runs every iteration of one arm for one seed.
pub fn run_arm(ctx: &SeedContext, plan: &ExperimentPlan, arm: &Arm) -> Result<ArmRun> {
    let sets = ctx.iteration_sets(&arm.schedule)?;
    let mut oracle = GoldOracle::new(plan.oracle.mode, plan.oracle.bt_scale, ctx.seed)?.fork(rng::stream_key(0, &arm.name, 0));
    let mut policy = ctx.start.clone();
    let eval = match plan.eval.scope {
        EvalScope::Heldout => ctx.eval.clone(),
        EvalScope::Pool => {
            let mut all = sets.concat();
            all.sort_unstable();
            all
        }
    };
    let initial_win_rate = metrics::win_rate(&policy, &ctx.world, &eval, plan.eval.quantile)?;
    let mut iterations = Vec::with_capacity(sets.len());
    let mut expected_calls = 0u64;
    for (i, set) in sets.iter().enumerate() {
        let out = run_iteration(ctx, plan, arm, &policy, &mut oracle, i + 1, set, &eval)?;
        expected_calls += out.selected.len() as u64;
        policy = out.policy;
        iterations.push(out.record);
    }
    assert_eq!(oracle.calls(), expected_calls, "annotation budget accounting");
    Ok(ArmRun {
        seed: ctx.seed,
        arm: arm.name.clone(),
        initial_win_rate,
        iterations,
        annotation_calls: oracle.calls(),
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentResults {
    pub runs: Vec<ArmRun>,
}

impl ExperimentResults {
    pub fn arm_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.runs {
            if !names.contains(&r.arm) {
                names.push(r.arm.clone());
            }
        }
        names
    }

    pub fn runs_of<'a>(&'a self, arm: &'a str) -> impl Iterator<Item = &'a ArmRun> + 'a {
        self.runs.iter().filter(move |r| r.arm == arm)
    }

    /// Final win rate of `arm` per seed, in seed order.
    pub fn final_win_rates(&self, arm: &str) -> Vec<f64> {
        self.runs_of(arm).map(ArmRun::final_win_rate).collect()
    }
}

/// Calibration of the starting policy's margins: samples the first `n`
/// pool instructions, takes the instance-random pair of each and labels all
/// of them with an uncounted oracle.
pub fn calibration_run(plan: &ExperimentPlan, seed: u64, n: usize) -> Result<metrics::CalibrationTable> {
    let ctx = SeedContext::build(plan, seed)?;
    if n > ctx.pool.len() {
        return Err(Error::config(
            "calibration.instructions",
            format!("needs {n} instructions, {} available", ctx.pool.len()),
        ));
    }
    let ids = &ctx.pool[..n];
    let sample = sample_instructions(
        &ctx.start,
        &ctx.world,
        ids,
        &plan.sampling,
        &mut rng::substream(seed, "calibration", 0),
    )?;
    let records = select::select_for_iteration(
        &sample,
        &Strategy::instance(SelectKind::Random, Normalization::Raw),
        &Strategy::corpus(SelectKind::Smallest, Normalization::Raw),
        CorpusBudget::Fraction(1.0),
        plan.train.beta,
        &ctx.start,
        &ctx.reference,
        &mut rng::substream(seed, "calibration", 1),
    )?;
    let mut oracle = GoldOracle::new(plan.oracle.mode, plan.oracle.bt_scale, seed)?.fork(u64::MAX - 1);
    let winners = records
        .iter()
        .map(|r| Ok(oracle.annotate(ctx.world.instruction(r.instruction_id)?, r.a, r.b)?.winner))
        .collect::<Result<Vec<_>>>()?;
    metrics::calibration_from_labels(&records, &winners, plan.eval.calibration_bins)
}

/// Runs every arm for every seed. Seeds run in parallel; results come back
/// in `(seed, arm)` plan order.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentResults> {
    plan.validate()?;
    let per_seed: Vec<Vec<ArmRun>> = plan
        .seeds
        .par_iter()
        .map(|&seed| {
            let ctx = SeedContext::build(plan, seed)?;
            plan.arms.par_iter().map(|arm| run_arm(&ctx, plan, arm)).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResults {
        runs: per_seed.into_iter().flatten().collect(),
    })
}

//! Plan files: TOML with `[world]`, `[sampling]`, `[train]`, `[strategy]`,
//! `[schedule]`, `[eval]` and `[run]` sections.
//!
//! Unknown keys are rejected. Missing keys take their default and the choice
//! is logged at info level, so `RUST_LOG=info` shows exactly what a plan
//! resolved to.

use std::fmt::Debug;
use std::path::Path;

use serde::Deserialize;

use crate::dpo::{LossKind, TrainConfig, TrainTarget};
use crate::error::{Error, Result};
use crate::experiment::{Arm, ArmBudget, EvalConfig, EvalScope, ExperimentPlan, InitConfig, OracleConfig};
use crate::policy::SamplingConfig;
use crate::select::{make_schedule, BudgetSchedule, Normalization, ScheduleKind, SelectKind};
use crate::world::{OracleMode, RewardDistribution, WorldConfig};

/// Shipped plan files, by name.
pub const PRESETS: [(&str, &str); 4] = [
    ("always_smallest_vs_random", include_str!("../plans/always_smallest_vs_random.toml")),
    ("allocation", include_str!("../plans/allocation.toml")),
    ("single_iteration", include_str!("../plans/single_iteration.toml")),
    ("strategy_grid", include_str!("../plans/strategy_grid.toml")),
];

/// Parses a shipped preset.
pub fn preset(name: &str) -> Result<ExperimentPlan> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::config("preset", format!("unknown preset {name:?}")))?;
    parse(text)
}

pub fn load(path: &Path) -> Result<ExperimentPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config("plan", format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    #[serde(default)]
    world: WorldSection,
    #[serde(default)]
    sampling: SamplingSection,
    #[serde(default)]
    train: TrainSection,
    #[serde(default)]
    strategy: StrategySection,
    #[serde(default)]
    schedule: ScheduleSection,
    #[serde(default)]
    eval: EvalSection,
    #[serde(default)]
    run: RunSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldSection {
    num_instructions: Option<usize>,
    pool_size: Option<usize>,
    reward: Option<RewardDistribution>,
    length_min: Option<u32>,
    length_max: Option<u32>,
    length_correlation: Option<f64>,
    feature_dim: Option<usize>,
    feature_share: Option<f64>,
    oracle: Option<OracleMode>,
    bt_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingSection {
    n: Option<usize>,
    temperature: Option<f64>,
    top_k: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    beta: Option<f64>,
    loss: Option<LossKind>,
    step_size: Option<f64>,
    head_step_size: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    target: Option<TrainTarget>,
    init_signal: Option<f64>,
    init_noise: Option<f64>,
    offline_instructions: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StrategySection {
    arms: Option<Vec<String>>,
    normalized: Option<bool>,
    corpus_fraction: Option<f64>,
    corpus_counts: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleSection {
    kind: Option<ScheduleKind>,
    sizes: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSection {
    scope: Option<EvalScope>,
    instructions: Option<usize>,
    quantile: Option<f64>,
    calibration_bins: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    seeds: Option<Seeds>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

fn or_default<T: Debug>(value: Option<T>, default: T, key: &str) -> T {
    value.unwrap_or_else(|| {
        log::info!("plan: {key} not set, using {default:?}");
        default
    })
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses plan text into a validated plan.
pub fn parse(text: &str) -> Result<ExperimentPlan> {
    let file: PlanFile = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| line_of(text, s.start));
        Error::parse(line, e.message().to_string())
    })?;
    let plan = build(file)?;
    plan.validate()?;
    Ok(plan)
}

fn build(f: PlanFile) -> Result<ExperimentPlan> {
    let wd = WorldConfig::default();
    let w = f.world;
    let world = WorldConfig {
        num_instructions: or_default(w.num_instructions, wd.num_instructions, "world.num_instructions"),
        pool_size: or_default(w.pool_size, wd.pool_size, "world.pool_size"),
        reward: or_default(w.reward, wd.reward, "world.reward"),
        length_min: or_default(w.length_min, wd.length_min, "world.length_min"),
        length_max: or_default(w.length_max, wd.length_max, "world.length_max"),
        length_correlation: or_default(w.length_correlation, wd.length_correlation, "world.length_correlation"),
        feature_dim: or_default(w.feature_dim, wd.feature_dim, "world.feature_dim"),
        feature_share: or_default(w.feature_share, wd.feature_share, "world.feature_share"),
        seed: 0,
    };
    let od = OracleConfig::default();
    let oracle = OracleConfig {
        mode: or_default(w.oracle, od.mode, "world.oracle"),
        bt_scale: or_default(w.bt_scale, od.bt_scale, "world.bt_scale"),
    };

    let sd = SamplingConfig::default();
    let sampling = SamplingConfig {
        n: or_default(f.sampling.n, sd.n, "sampling.n"),
        temperature: or_default(f.sampling.temperature, sd.temperature, "sampling.temperature"),
        top_k: or_default(f.sampling.top_k, sd.top_k, "sampling.top_k"),
    };

    let td = TrainConfig::default();
    let t = f.train;
    let step_size = or_default(t.step_size, td.step_size, "train.step_size");
    let train = TrainConfig {
        beta: or_default(t.beta, td.beta, "train.beta"),
        loss: or_default(t.loss, td.loss, "train.loss"),
        step_size,
        head_step_size: or_default(t.head_step_size, step_size, "train.head_step_size"),
        epochs: or_default(t.epochs, td.epochs, "train.epochs"),
        batch_size: or_default(t.batch_size, td.batch_size, "train.batch_size"),
        seed: 0,
        target: or_default(t.target, td.target, "train.target"),
    };
    let id = InitConfig::default();
    let init = InitConfig {
        signal_coefficient: or_default(t.init_signal, id.signal_coefficient, "train.init_signal"),
        noise_sd: or_default(t.init_noise, id.noise_sd, "train.init_noise"),
        offline_instructions: or_default(t.offline_instructions, id.offline_instructions, "train.offline_instructions"),
    };

    let sizes = f
        .schedule
        .sizes
        .ok_or_else(|| Error::config("schedule.sizes", "required (instructions per iteration)"))?;
    let kind = or_default(f.schedule.kind, ScheduleKind::Constant, "schedule.kind");
    let schedule = make_schedule(kind, &sizes)?;

    let s = f.strategy;
    let normalization = if or_default(s.normalized, false, "strategy.normalized") {
        Normalization::LengthNormalized
    } else {
        Normalization::Raw
    };
    let budget = match (s.corpus_fraction, s.corpus_counts) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "strategy.corpus_counts",
                "set either corpus_fraction or corpus_counts, not both",
            ))
        }
        (_, Some(c)) => ArmBudget::Counts(c),
        (fraction, None) => ArmBudget::Fraction(or_default(fraction, 0.5, "strategy.corpus_fraction")),
    };
    let names = or_default(
        s.arms,
        vec!["always_smallest".to_string(), "always_random".to_string()],
        "strategy.arms",
    );
    if names.is_empty() {
        return Err(Error::config("strategy.arms", "must name at least one arm"));
    }
    let arms = names
        .iter()
        .map(|n| resolve_arm(n, &schedule, &budget, normalization))
        .collect::<Result<Vec<_>>>()?;
    for (i, a) in arms.iter().enumerate() {
        if arms[..i].iter().any(|b| b.name == a.name) {
            return Err(Error::config("strategy.arms", format!("arm {:?} listed twice", a.name)));
        }
    }

    let ed = EvalConfig::default();
    let e = f.eval;
    let eval = EvalConfig {
        scope: or_default(e.scope, ed.scope, "eval.scope"),
        instructions: or_default(e.instructions, ed.instructions, "eval.instructions"),
        quantile: or_default(e.quantile, ed.quantile, "eval.quantile"),
        calibration_bins: or_default(e.calibration_bins, ed.calibration_bins, "eval.calibration_bins"),
    };

    let seeds = match or_default(f.run.seeds, Seeds::Count(20), "run.seeds") {
        Seeds::Count(n) => (0..n).collect(),
        Seeds::List(l) => l,
    };
    if seeds.is_empty() {
        return Err(Error::config("run.seeds", "must not be empty"));
    }

    Ok(ExperimentPlan {
        world,
        sampling,
        train,
        init,
        eval,
        oracle,
        arms,
        seeds,
    })
}

/// Splits the schedule's total into `n` iterations with weights `1..=n`
/// (increase), all equal (constant) or `n..=1` (decrease).
pub fn allocation_schedule(kind: ScheduleKind, total: usize, iterations: usize) -> Result<BudgetSchedule> {
    let weights: Vec<usize> = match kind {
        ScheduleKind::Increase => (1..=iterations).collect(),
        ScheduleKind::Constant => vec![1; iterations],
        ScheduleKind::Decrease => (1..=iterations).rev().collect(),
    };
    let sum: usize = weights.iter().sum();
    if iterations == 0 || !total.is_multiple_of(sum) {
        return Err(Error::config(
            "schedule.sizes",
            format!("total {total} does not split into {iterations} {kind:?} iterations"),
        ));
    }
    let sizes: Vec<usize> = weights.iter().map(|w| total / sum * w).collect();
    make_schedule(kind, &sizes)
}

/// Resolves an arm name: `always_smallest`, `always_random`, `single_iter`,
/// `increase`, `constant`, `decrease`, or `<instance>-<corpus>` such as
/// `random-smallest`.
pub fn resolve_arm(name: &str, schedule: &BudgetSchedule, budget: &ArmBudget, normalization: Normalization) -> Result<Arm> {
    let with = |mut arm: Arm| {
        arm.instance.normalization = normalization;
        arm.corpus.normalization = normalization;
        arm
    };
    let allocation = |kind: ScheduleKind| -> Result<Arm> {
        let sched = allocation_schedule(kind, schedule.total(), schedule.iterations())?;
        let budget = match budget {
            ArmBudget::Fraction(f) => ArmBudget::Fraction(*f),
            ArmBudget::Counts(_) => {
                return Err(Error::config(
                    "strategy.corpus_counts",
                    format!("arm {name:?} needs corpus_fraction"),
                ))
            }
        };
        let mut arm = with(Arm::always_smallest(sched, budget));
        arm.name = name.to_string();
        Ok(arm)
    };
    match name {
        "always_smallest" => Ok(with(Arm::always_smallest(schedule.clone(), budget.clone()))),
        "always_random" => Ok(with(Arm::always_random(schedule.clone(), budget.clone()))),
        "single_iter" => Ok(with(Arm::single_iter(schedule, budget.clone())?)),
        "increase" => allocation(ScheduleKind::Increase),
        "constant" => allocation(ScheduleKind::Constant),
        "decrease" => allocation(ScheduleKind::Decrease),
        other => {
            let (inst, corp) = other
                .split_once('-')
                .ok_or_else(|| Error::config("strategy.arms", format!("unknown arm {other:?}")))?;
            let inst: SelectKind = inst
                .parse()
                .map_err(|_| Error::config("strategy.arms", format!("unknown arm {other:?}")))?;
            let corp: SelectKind = corp
                .parse()
                .map_err(|_| Error::config("strategy.arms", format!("unknown arm {other:?}")))?;
            Ok(Arm::new(other, inst, corp, normalization, schedule.clone(), budget.clone()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[schedule]\nsizes = [100, 100]\n[world]\nnum_instructions = 1000\n";

    #[test]
    fn minimal_plan_takes_defaults() {
        let plan = parse(MINIMAL).unwrap();
        assert_eq!(plan.arms.len(), 2);
        assert_eq!(plan.arms[0].name, "always_smallest");
        assert_eq!(plan.seeds.len(), 20);
        assert_eq!(plan.sampling, SamplingConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let err = parse("[schedule]\nsizes = [10]\n\n[train]\nlearning_rate = 3\n").unwrap_err();
        match err {
            Error::Parse { line, reason } => {
                assert_eq!(line, 5);
                assert!(reason.contains("learning_rate"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("[bogus]\nx = 1\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn missing_schedule_is_a_config_error() {
        assert!(matches!(parse("[run]\nseeds = 2\n"), Err(Error::Config { field, .. }) if field == "schedule.sizes"));
    }

    #[test]
    fn allocation_triples() {
        let inc = allocation_schedule(ScheduleKind::Increase, 30_000, 3).unwrap();
        assert_eq!(inc.per_iteration(), &[5_000, 10_000, 15_000]);
        let dec = allocation_schedule(ScheduleKind::Decrease, 30_000, 3).unwrap();
        assert_eq!(dec.per_iteration(), &[15_000, 10_000, 5_000]);
        let con = allocation_schedule(ScheduleKind::Constant, 30_000, 3).unwrap();
        assert_eq!(con.per_iteration(), &[10_000; 3]);
        assert!(allocation_schedule(ScheduleKind::Increase, 100, 3).is_err());
    }

    #[test]
    fn combo_arm_names() {
        let s = make_schedule(ScheduleKind::Constant, &[10]).unwrap();
        let arm = resolve_arm("random-largest", &s, &ArmBudget::Fraction(0.5), Normalization::Raw).unwrap();
        assert_eq!(arm.instance.kind, SelectKind::Random);
        assert_eq!(arm.corpus.kind, SelectKind::Largest);
        assert!(resolve_arm("tiny-huge", &s, &ArmBudget::Fraction(0.5), Normalization::Raw).is_err());
        assert!(resolve_arm("always", &s, &ArmBudget::Fraction(0.5), Normalization::Raw).is_err());
    }

    #[test]
    fn presets_parse() {
        for (name, _) in PRESETS {
            let plan = preset(name).unwrap();
            assert_eq!(plan.seeds.len(), 20, "{name}");
            assert_eq!(plan.world.pool_size, 8, "{name}");
        }
        let alloc = preset("allocation").unwrap();
        let names: Vec<&str> = alloc.arms.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, ["increase", "constant", "decrease"]);
        assert_eq!(alloc.arms[0].schedule.per_iteration(), &[500, 1000, 1500]);
        assert_eq!(preset("always_smallest_vs_random").unwrap().arms.len(), 2);
        assert_eq!(preset("strategy_grid").unwrap().arms.len(), 9);
    }

    #[test]
    fn seeds_accept_count_or_list() {
        let p = parse(&format!("{MINIMAL}[run]\nseeds = [7, 3]\n")).unwrap();
        assert_eq!(p.seeds, vec![7, 3]);
        let p = parse(&format!("{MINIMAL}[run]\nseeds = 3\n")).unwrap();
        assert_eq!(p.seeds, vec![0, 1, 2]);
    }
}

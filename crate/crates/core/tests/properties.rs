use margin_select::dpo::TrainConfig;
use margin_select::dump::{self, DumpRecord};
use margin_select::experiment::{self, Arm, ArmBudget, SeedContext};
use margin_select::margin::{self, MarginRecord, Side};
use margin_select::metrics;
use margin_select::plan;
use margin_select::policy::TabularPolicy;
use margin_select::report::{self, ResultRow};
use margin_select::rng;
use margin_select::select::{self, make_schedule, Normalization, ScheduleKind, SelectKind, Strategy};
use proptest::prelude::*;

fn logit_rows(k: usize) -> impl proptest::strategy::Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-8.0..8.0f64, k), 1..6)
}

fn pool() -> impl proptest::strategy::Strategy<Value = (Vec<usize>, Vec<f64>, Vec<u32>)> {
    (
        prop::collection::vec(0..8usize, 2..10),
        prop::collection::vec(-5.0..5.0f64, 8),
        prop::collection::vec(1..400u32, 8),
    )
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in logit_rows(5), shift in -3.0..3.0f64) {
        let q: Vec<Vec<f64>> = p.iter().map(|row| row.iter().enumerate().map(|(i, z)| z + shift * i as f64).collect()).collect();
        let (p, q) = (TabularPolicy::from_logits(p).unwrap(), TabularPolicy::from_logits(q).unwrap());
        let ids: Vec<usize> = (0..p.num_instructions()).collect();
        prop_assert!(metrics::kl_divergence(&p, &q, &ids).unwrap() >= 0.0);
        prop_assert!(metrics::kl_divergence(&p, &p, &ids).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn margin_record_ignores_argument_order(ia in -5.0..5.0f64, ib in -5.0..5.0f64, la in 1..500u32, lb in 1..500u32, beta in 0.01..5.0f64) {
        let a = Side { id: 2, implicit: ia, length: la };
        let b = Side { id: 7, implicit: ib, length: lb };
        let r = MarginRecord::new(0, a, b, beta).unwrap();
        prop_assert_eq!(r, MarginRecord::new(0, b, a, beta).unwrap());
        prop_assert!(r.rho >= 0.0 && r.rho_hat >= 0.0);
        prop_assert!(r.contains(r.provisional_winner));
    }

    #[test]
    fn instance_extremes_bracket_random((sampled, implicit, lengths) in pool()) {
        let c = margin::candidates_from_implicit(0, &sampled, &implicit, &lengths, 0.5).unwrap();
        prop_assume!(!c.records.is_empty());
        for norm in [Normalization::Raw, Normalization::LengthNormalized] {
            let pick = |kind| select::instance_select(&c.records, &Strategy::instance(kind, norm), &c.sampled_order).unwrap().unwrap();
            let key = |r: MarginRecord| Strategy::instance(SelectKind::Smallest, norm).key(&r);
            let (s, m, l) = (pick(SelectKind::Smallest), pick(SelectKind::Random), pick(SelectKind::Largest));
            prop_assert!(key(s) <= key(m) && key(m) <= key(l));
            prop_assert_eq!((m.a, m.b), (c.sampled_order[0].min(c.sampled_order[1]), c.sampled_order[0].max(c.sampled_order[1])));
        }
    }

    #[test]
    fn corpus_smallest_mean_never_exceeds_random(pools in prop::collection::vec(pool(), 1..30), frac in 0.05..1.0f64, seed in any::<u64>()) {
        let records: Vec<MarginRecord> = pools
            .iter()
            .enumerate()
            .flat_map(|(x, (s, i, l))| margin::candidates_from_implicit(x, s, i, l, 1.0).unwrap().records)
            .collect();
        prop_assume!(!records.is_empty());
        let take = ((records.len() as f64 * frac) as usize).max(1);
        let mean = |kind| {
            let sel = select::corpus_select(&records, &Strategy::corpus(kind, Normalization::Raw), take, &mut rng::seeded(seed)).unwrap();
            metrics::subset_stats(&sel).mean_rho.unwrap()
        };
        prop_assert!(mean(SelectKind::Smallest) <= mean(SelectKind::Random) + 1e-12);
        prop_assert!(mean(SelectKind::Random) <= mean(SelectKind::Largest) + 1e-12);
    }

    #[test]
    fn calibration_bins_are_well_formed(rhos in prop::collection::vec(0.0..4.0f64, 20..200), bins in 2..12usize, flips in any::<u64>()) {
        let records: Vec<MarginRecord> = rhos
            .iter()
            .enumerate()
            .map(|(x, &r)| MarginRecord::new(x, Side { id: 0, implicit: (r * 4.0).round() / 4.0, length: 1 }, Side { id: 1, implicit: 0.0, length: 1 }, 1.0).unwrap())
            .collect();
        prop_assume!(records.len() >= bins);
        let winners: Vec<usize> = (0..records.len()).map(|i| ((flips >> (i % 64)) & 1) as usize).collect();
        let t = metrics::calibration_from_labels(&records, &winners, bins).unwrap();
        prop_assert_eq!(t.bins.iter().map(|b| b.count).sum::<usize>(), records.len());
        for w in t.bins.windows(2) {
            prop_assert!(w[0].margin_hi < w[1].margin_lo);
        }
        for b in &t.bins {
            prop_assert!((0.0..=1.0).contains(&b.empirical_accuracy));
            prop_assert!(b.margin_lo <= b.mean_margin && b.mean_margin <= b.margin_hi);
        }
    }

    #[test]
    fn dump_round_trips(rows in prop::collection::vec(("[a-z0-9_]{1,6}", "[a-z0-9]{1,4}", -1e3..0.0f64, -1e3..0.0f64, 1..10_000u32), 0..40)) {
        let records: Vec<DumpRecord> = rows
            .into_iter()
            .map(|(i, r, p, q, l)| DumpRecord { instruction_key: i, response_key: r, logp_policy: p, logp_ref: q, length: l })
            .collect();
        let mut buf = Vec::new();
        dump::write_dump(&records, &mut buf).unwrap();
        prop_assert_eq!(dump::read_dump(&buf[..]).unwrap(), records);
    }

    #[test]
    fn results_round_trip_with_awkward_arm_names(arm in "[ -~]{1,12}", win in 0.0..1.0f64, kl in 0.0..10.0f64) {
        prop_assume!(!arm.trim().is_empty());
        let rows = vec![ResultRow { seed: 3, arm, iteration: 1, trained_instances: 9, win_rate: win, ranking_accuracy: 0.5, mean_kl: kl, mean_margin: 0.25 }];
        let mut buf = Vec::new();
        report::write_results(&rows, &mut buf).unwrap();
        prop_assert_eq!(report::read_results(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn natural_order_is_total(keys in prop::collection::vec("[a-c0-9]{1,4}", 1..30)) {
        let mut sorted = keys.clone();
        sorted.sort_by(|a, b| dump::natural_cmp(a, b));
        for w in sorted.windows(2) {
            prop_assert!(dump::natural_cmp(&w[0], &w[1]) != std::cmp::Ordering::Greater);
        }
    }

    #[test]
    fn schedules_enforce_their_shape(sizes in prop::collection::vec(1..50usize, 1..5)) {
        let up = sizes.windows(2).all(|w| w[0] <= w[1]);
        let down = sizes.windows(2).all(|w| w[0] >= w[1]);
        let flat = sizes.windows(2).all(|w| w[0] == w[1]);
        prop_assert_eq!(make_schedule(ScheduleKind::Increase, &sizes).is_ok(), up);
        prop_assert_eq!(make_schedule(ScheduleKind::Decrease, &sizes).is_ok(), down);
        prop_assert_eq!(make_schedule(ScheduleKind::Constant, &sizes).is_ok(), flat);
    }
}

fn small_plan() -> experiment::ExperimentPlan {
    let mut p = plan::preset("always_smallest_vs_random").unwrap();
    p.seeds = vec![5, 6];
    p
}

#[test]
fn iteration_sets_are_disjoint() {
    let p = small_plan();
    let ctx = SeedContext::build(&p, 5).unwrap();
    let sets = ctx.iteration_sets(&p.arms[0].schedule).unwrap();
    let mut all: Vec<usize> = sets.concat();
    let n = all.len();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), n);
    assert!(all.iter().all(|x| !ctx.eval.contains(x)));
}

#[test]
fn no_learning_means_constant_win_rate() {
    let mut p = small_plan();
    p.train = TrainConfig {
        step_size: 0.0,
        head_step_size: 0.0,
        ..p.train
    };
    p.arms.retain(|a| a.name == "always_random");
    for run in experiment::run_experiment(&p).unwrap().runs {
        assert!(
            run.iterations
                .iter()
                .all(|i| i.win_rate == run.initial_win_rate && i.mean_kl == 0.0),
            "{run:?}"
        );
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    let mut p = small_plan();
    let schedule = p.arms[0].schedule.clone();
    p.arms.push(Arm::new(
        "largest-random",
        SelectKind::Largest,
        SelectKind::Random,
        Normalization::LengthNormalized,
        schedule,
        ArmBudget::Fraction(0.3),
    ));
    assert_eq!(experiment::run_experiment(&p).unwrap(), experiment::run_experiment(&p).unwrap());
}

#[test]
fn budget_arithmetic() {
    // 10,000 instructions at a 50% corpus fraction annotate 5,000 pairs.
    let sample: Vec<_> = (0..10_000)
        .map(|x| select::SampledInstruction {
            instruction_id: x,
            sampled: vec![0, 1, 2],
            lengths: vec![5, 6, 7],
        })
        .collect();
    let mut logits = vec![vec![0.0; 3]; 10_000];
    for (x, row) in logits.iter_mut().enumerate() {
        row[x % 3] = (x % 17) as f64 * 0.1;
    }
    let policy = TabularPolicy::from_logits(logits).unwrap();
    let reference = TabularPolicy::uniform(&vec![3; 10_000]).unwrap().snapshot();
    let picked = select::select_for_iteration(
        &sample,
        &Strategy::instance(SelectKind::Smallest, Normalization::Raw),
        &Strategy::corpus(SelectKind::Smallest, Normalization::Raw),
        select::CorpusBudget::Fraction(0.5),
        0.1,
        &policy,
        &reference,
        &mut rng::seeded(0),
    )
    .unwrap();
    assert_eq!(picked.len(), 5_000);
    // Eight distinct responses give 28 candidate pairs.
    let c = margin::candidates_from_implicit(0, &[0, 1, 2, 3, 4, 5, 6, 7], &[0.0; 8], &[1; 8], 1.0).unwrap();
    assert_eq!(c.records.len(), 28);
}

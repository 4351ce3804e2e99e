//! Instance- then corpus-level selection under every strategy combination,
//! with the mean margin of the kept pairs.

use margin_select::experiment::{init_policies, sample_instructions};
use margin_select::metrics;
use margin_select::policy::SamplingConfig;
use margin_select::rng;
use margin_select::select::{select_for_iteration, CorpusBudget, Normalization, SelectKind, Strategy};
use margin_select::world::{generate_world, WorldConfig};

fn main() -> margin_select::Result<()> {
    let world = generate_world(&WorldConfig {
        num_instructions: 2000,
        seed: 5,
        ..Default::default()
    })?;
    let (reference, mut policy) = init_policies(&world, 0.5, 1.0, 5)?;
    let mut r = rng::substream(5, "drift", 0);
    for x in 0..world.len() {
        for y in 0..8 {
            policy.nudge_logit(x, y, 0.3 * rand::Rng::random::<f64>(&mut r))?;
        }
    }
    let ids: Vec<usize> = (0..world.len()).collect();
    let sample = sample_instructions(
        &policy,
        &world,
        &ids,
        &SamplingConfig::default(),
        &mut rng::substream(5, "sampling", 1),
    )?;

    println!("{:<18} {:>6} {:>12}", "instance-corpus", "pairs", "mean rho");
    for instance in SelectKind::ALL {
        for corpus in SelectKind::ALL {
            let kept = select_for_iteration(
                &sample,
                &Strategy::instance(instance, Normalization::Raw),
                &Strategy::corpus(corpus, Normalization::Raw),
                CorpusBudget::Fraction(0.5),
                0.1,
                &policy,
                &reference,
                &mut rng::substream(5, "selection", 1),
            )?;
            let stats = metrics::subset_stats(&kept);
            println!(
                "{:<18} {:>6} {:>12.6}",
                format!("{instance}-{corpus}"),
                stats.count,
                stats.mean_rho.unwrap_or(0.0)
            );
        }
    }
    Ok(())
}

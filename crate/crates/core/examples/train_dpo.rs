//! Trains a tabular policy on gold-labelled pairs with each loss and prints
//! the per-epoch loss curve and the resulting win rate.

use margin_select::dpo::{train, AnnotatedTrio, LossKind, TrainConfig, TrainTarget};
use margin_select::experiment::init_policies;
use margin_select::metrics;
use margin_select::world::{generate_world, GoldOracle, WorldConfig};

fn main() -> margin_select::Result<()> {
    let world = generate_world(&WorldConfig {
        num_instructions: 500,
        seed: 9,
        ..Default::default()
    })?;
    let (reference, start) = init_policies(&world, 0.3, 1.0, 9)?;
    let mut oracle = GoldOracle::deterministic();
    let trios = world
        .instructions()
        .iter()
        .map(|x| {
            let label = oracle.annotate(x, 0, 1)?;
            AnnotatedTrio::new(x.id, label.winner, label.loser)
        })
        .collect::<margin_select::Result<Vec<_>>>()?;
    let ids: Vec<usize> = (0..world.len()).collect();
    println!("start win rate {:.3}", metrics::win_rate(&start, &world, &ids, 0.9)?);

    for loss in [LossKind::Dpo, LossKind::Ipo, LossKind::Slic] {
        let config = TrainConfig {
            beta: 0.5,
            loss,
            step_size: 2.0,
            epochs: 5,
            target: TrainTarget::Table,
            ..TrainConfig::default()
        };
        let (trained, report) = train(&start, &reference, &trios, &config)?;
        let losses: Vec<String> = report.mean_losses().iter().map(|l| format!("{l:.4}")).collect();
        println!(
            "{loss:?}: losses [{}], win rate {:.3}, KL {:.4}",
            losses.join(", "),
            metrics::win_rate(&trained, &world, &ids, 0.9)?,
            metrics::kl_divergence(&trained, &reference, &ids)?
        );
    }
    Ok(())
}

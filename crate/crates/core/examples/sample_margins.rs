//! Samples responses from a policy and lists the implicit reward margins of
//! every sampled pair.

use margin_select::experiment::init_policies;
use margin_select::margin;
use margin_select::policy::SamplingConfig;
use margin_select::rng;
use margin_select::world::{generate_world, WorldConfig};

fn main() -> margin_select::Result<()> {
    let world = generate_world(&WorldConfig {
        num_instructions: 10,
        seed: 3,
        ..Default::default()
    })?;
    let (reference, mut policy) = init_policies(&world, 1.0, 0.5, 3)?;
    // Move the policy away from the reference so margins are non-zero.
    for y in 0..8 {
        policy.nudge_logit(0, y, (y as f64 * 1.7).sin())?;
    }

    let sampled = policy.sample_responses(0, &SamplingConfig::default(), &mut rng::substream(3, "sampling", 1))?;
    println!("sampled responses: {sampled:?}");
    let c = margin::candidates(&policy, &reference, 0.1, 0, &sampled, &world.instruction(0)?.lengths())?;
    println!("{} candidate pairs", c.records.len());
    println!("{:>3} {:>3} {:>10} {:>10} {:>7}", "a", "b", "rho", "rho_hat", "winner");
    for r in &c.records {
        println!(
            "{:>3} {:>3} {:>10.5} {:>10.6} {:>7}",
            r.a, r.b, r.rho, r.rho_hat, r.provisional_winner
        );
    }
    Ok(())
}

//! Generates a synthetic world and prints a few of its instructions.
//!
//! cargo run --example generate_world -- [num_instructions] [seed]

use margin_select::world::{generate_world, reference_response, WorldConfig};

fn main() -> margin_select::Result<()> {
    let mut args = std::env::args().skip(1);
    let num_instructions = args.next().and_then(|a| a.parse().ok()).unwrap_or(1000);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let config = WorldConfig {
        num_instructions,
        feature_dim: 4,
        feature_share: 0.5,
        seed,
        ..Default::default()
    };
    let world = generate_world(&config)?;

    let (mean, sd) = world.gold_moments();
    println!(
        "{} instructions, pool size {}, gold reward mean {mean:.3} sd {sd:.3}",
        world.len(),
        config.pool_size
    );
    for x in world.instructions().iter().take(3) {
        let rewards: Vec<String> = x.pool.iter().map(|r| format!("{:+.2}", r.gold_reward)).collect();
        println!(
            "instruction {}: rewards [{}], lengths {:?}, best {}, reference@0.9 {}",
            x.id,
            rewards.join(" "),
            x.lengths(),
            x.gold_argmax(),
            reference_response(x, 0.9)?
        );
    }
    Ok(())
}

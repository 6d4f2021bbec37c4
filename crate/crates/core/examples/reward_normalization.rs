// Tracks per-image reward statistics and turns raw rewards into clipped-surrogate terms.

use restore_rl::reward::{advantage, step_key, RewardStats};
use restore_rl::rl::{surrogate_term, surrogate_value};

pub fn run_example() -> restore_rl::Result<()> {
    let mut stats = RewardStats::new(1e-8, 0.5, 0.9)?;
    let rounds = [[0.2, 0.4, 0.9], [0.3, 0.5, 0.8], [0.4, 0.6, 0.7]];
    for (round, rewards) in rounds.iter().enumerate() {
        stats.set_batch(rewards.to_vec())?;
        let keys: Vec<String> = (0..rewards.len()).map(|i| step_key(&format!("img{i}"), 0)).collect();
        for (key, r) in keys.iter().zip(rewards) {
            stats.observe(key, &[*r])?;
        }
        let adv: Vec<f64> = keys
            .iter()
            .zip(rewards)
            .map(|(k, r)| advantage(*r, &stats, k))
            .collect::<restore_rl::Result<_>>()?;
        println!("round {round}: advantages {:?}", adv.iter().map(|a| format!("{a:+.3}")).collect::<Vec<_>>());
    }

    for ratio in [0.5, 0.9, 1.0, 1.1, 1.5] {
        println!(
            "ratio {ratio:.1}: term(A=+1) {:+.2}  term(A=-1) {:+.2}",
            surrogate_term(ratio, 1.0, 0.2),
            surrogate_term(ratio, -1.0, 0.2)
        );
    }
    println!("batch surrogate {:.3}", surrogate_value(&[0.9, 1.3], &[1.0, -0.5], 0.2)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> restore_rl::Result<()> {
    run_example()
}

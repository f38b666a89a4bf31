//! Progressive depth-ceiling search over a simulated learner.
//!
//! The search trains one cell per (k, m) and stops at the first depth where
//! no branch factor clears its significance threshold. Training a real model
//! per cell takes hours on one core, so this example plugs in a simulated
//! learner that is perfect through m = 4 and collapses to chance at m = 5;
//! the search machinery (LPC decisions, budget accounting) is the real one.
//! The `starplan ceiling` subcommand runs the same search with real training.
//!
//! Run: `cargo run --example depth_ceiling`

use starplan::training::depth_ceiling_search;

fn main() -> starplan::Result<()> {
    let n = 2048usize;
    let mut cells_run = 0usize;
    let result = depth_ceiling_search(3, 8, 30, |k, m| {
        cells_run += 1;
        // Simulated learner: solves the task exactly up to depth 4, then
        // guesses uniformly among the k first hops.
        let correct = if m <= 4 { n } else { n / k };
        println!("  cell k={k} m={m}: {correct}/{n}");
        Ok((correct, n))
    })?;

    match result.ceiling {
        Some(m) => println!("\nceiling: deepest depth with latent planning capacity is m = {m}"),
        None => println!("\nno depth passed the capacity test"),
    }
    println!("cells trained: {cells_run}");
    for c in &result.cells {
        println!("  k={} m={}: skill {:+.3}", c.k, c.m, c.skill);
    }
    Ok(())
}

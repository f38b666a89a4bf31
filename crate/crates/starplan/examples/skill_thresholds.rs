//! Skill scores, exact binomial significance thresholds, and the LPC test.
//!
//! Prints the critical accuracy/skill table, then runs the latent-planning-
//! capacity decision on two synthetic outcome sets: one clearly above
//! threshold at k=2 and one at chance everywhere.
//!
//! Run: `cargo run --example skill_thresholds`

use starplan::evalstats::{lpc, skill, SkillScore, ThresholdTable, ALPHA, K_SET};

fn main() -> starplan::Result<()> {
    println!("skill = (acc - 1/k) / (1 - 1/k):");
    for (acc, k) in [(1.0, 2), (0.5, 2), (0.75, 2), (0.1, 10)] {
        println!("  acc {acc:.2} at k={k}: skill {:+.3}", skill(acc, k));
    }

    let table = ThresholdTable::build(&K_SET, &[100, 2048], ALPHA);
    println!("\nsmallest accuracy/skill significant at alpha = {ALPHA:.0e}:");
    print!("{}", table.to_csv());

    // LPC at depth m=3: pass iff any k in K_SET clears its critical skill.
    let n = 2048;
    let strong: Vec<SkillScore> = K_SET
        .iter()
        .map(|&k| {
            let correct = if k == 2 { 1400 } else { n / k }; // only k=2 above chance
            SkillScore::from_counts(correct, n, k)
        })
        .collect();
    let chance: Vec<SkillScore> = K_SET
        .iter()
        .map(|&k| SkillScore::from_counts(n / k, n, k))
        .collect();
    for (name, scores) in [("one-strong-cell", strong), ("chance-everywhere", chance)] {
        let r = lpc(3, &scores, n, ALPHA, &K_SET)?;
        println!(
            "\nLPC(m=3), {name}: decision {} (witness k = {:?})",
            if r.decision { "PASS" } else { "FAIL" },
            r.witness_k
        );
        for s in &r.per_k_skills {
            println!(
                "  k={:<2} accuracy {:.3} skill {:+.3}",
                s.k, s.accuracy, s.skill
            );
        }
    }
    Ok(())
}

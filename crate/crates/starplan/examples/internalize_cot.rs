//! Internalized chain-of-thought: train with the full path, then remove it
//! one token per stage until only the answer remains.
//!
//! Runs the staged schedule on a tiny G(2, 2) memorization setup so it
//! finishes quickly, and prints the stage each logged evaluation belongs to.
//!
//! Run: `cargo run --example internalize_cot`

use starplan::encoding::{input_len, Mode};
use starplan::model::{ModelConfig, Parameters};
use starplan::stargraph::{build_dataset, DatasetConfig};
use starplan::training::{first_hop_accuracy, train_icot, StageSchedule, TrainConfig};

fn main() -> starplan::Result<()> {
    let dcfg = DatasetConfig::new(2, 2, 48, 24, 24, 9);
    let bundle = build_dataset(&dcfg)?;
    let vocab = dcfg.vocabulary();
    let mcfg = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 64,
        vocab_size: vocab.size(),
        max_seq_len: input_len(2, 2) + 4,
        dropout: 0.0,
    };
    let params = Parameters::<f32>::init(mcfg, 2)?;
    let cfg = TrainConfig {
        mode: Mode::Icot(0),
        epochs: 240,
        batch_size: 16,
        lr: 2e-3,
        eval_cadence: 5,
        eval_subset: 0,
        early_stop: true,
        seed: 13,
    };
    let schedule = StageSchedule::default_for(cfg.epochs, dcfg.m);
    println!(
        "stages 0..{}: stage s drops the first s chain-of-thought tokens; \
         advance at token accuracy >= {:.2}",
        dcfg.m - 1,
        schedule.advance_token_acc
    );

    let (trained, log) = train_icot(params, &bundle, &cfg, schedule)?;
    for stage in 0..dcfg.m {
        let evals: Vec<_> = log.records.iter().filter(|r| r.stage == stage).collect();
        if let (Some(first), Some(last)) = (evals.first(), evals.last()) {
            println!(
                "stage {stage}: updates {:>4}..{:<4} token acc {:.3} -> {:.3}",
                first.update, last.update, first.token_acc, last.token_acc
            );
        }
    }

    // After the last stage the model answers with no visible chain.
    let (c, t) = first_hop_accuracy(&trained, &bundle.test, &vocab)?;
    println!("latent-format test accuracy after internalization: {c}/{t}");
    Ok(())
}

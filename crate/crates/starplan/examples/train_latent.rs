//! Train a small transformer end to end under latent supervision.
//!
//! Uses a deliberately tiny model and dataset (G(2, 2), a few hundred
//! updates) so the run finishes in under a minute while exercising the full
//! pipeline: dataset build, Adam training with evaluation cadence, run log,
//! and two-stage dynamics detection. The reference-scale configuration is
//! `ModelConfig::reference` + `TrainConfig::desk`, driven the same way.
//!
//! Run: `cargo run --example train_latent`

use starplan::encoding::{input_len, Mode};
use starplan::model::{ModelConfig, Parameters};
use starplan::stargraph::{build_dataset, DatasetConfig};
use starplan::training::{
    detect_stages, first_hop_accuracy, train, TrainConfig, STAGE1_DELTA_FRACTION, STAGE_WINDOW,
};

fn main() -> starplan::Result<()> {
    let dcfg = DatasetConfig::new(2, 2, 4096, 256, 256, 5);
    let bundle = build_dataset(&dcfg)?;
    let vocab = dcfg.vocabulary();
    let mcfg = ModelConfig {
        layers: 4,
        heads: 2,
        hidden: 64,
        vocab_size: vocab.size(),
        max_seq_len: input_len(2, 2) + 4,
        dropout: 0.0,
    };
    let params = Parameters::<f32>::init(mcfg, 1)?;
    println!("model: {} parameters", params.param_count());

    let cfg = TrainConfig {
        mode: Mode::Latent,
        epochs: 40,
        batch_size: 256,
        lr: 1e-3,
        eval_cadence: 5,
        eval_subset: 0,
        early_stop: true,
        seed: 7,
    };
    let (trained, log) = train(params, &bundle, &cfg)?;

    println!("\nrun log (every 4th evaluation):");
    println!("update  train_loss  val_loss  val_acc");
    for r in log.records.iter().step_by(4) {
        println!(
            "{:>6}  {:>10.4}  {:>8.4}  {:>7.3}",
            r.update, r.train_loss, r.val_loss, r.val_acc
        );
    }

    let (c, t) = first_hop_accuracy(&trained, &bundle.test, &vocab)?;
    println!(
        "\ntest first-hop accuracy: {c}/{t} = {:.3}",
        c as f64 / t as f64
    );

    let delta = STAGE1_DELTA_FRACTION / dcfg.k as f64;
    let report = detect_stages(&log, dcfg.k, delta, STAGE_WINDOW);
    println!(
        "stage 1 (chance plateau near 1/k) reached: {}; stage 2 outcome: {:?}",
        report.stage1_reached, report.stage2_outcome
    );
    for line in &report.evidence {
        println!("  {line}");
    }
    Ok(())
}

//! Verify the hand-written backward pass against finite differences.
//!
//! Samples a small randomized model, probes two entries of every named
//! tensor, and compares analytic gradients with central differences of the
//! loss, with and without dropout.
//!
//! Run: `cargo run --example check_gradients`

use starplan::model::{loss_and_grad, DropoutSpec, ModelConfig, Parameters, TrainBatch};
use starplan::oracle::fd_gradient;

fn main() -> starplan::Result<()> {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        vocab_size: 13,
        max_seq_len: 10,
        dropout: 0.0,
    };
    let params = Parameters::<f64>::init(cfg, 123)?;
    let batch = TrainBatch {
        seqs: vec![vec![3, 7, 1, 9, 0, 5, 12], vec![8, 2, 2, 4, 11, 6, 12]],
        masks: vec![vec![false, true, false, true, true, true]; 2],
    };

    let (loss, grads) = loss_and_grad(&params, &batch, None)?;
    println!("loss {loss:.6}; checking 2 probes per tensor against central differences\n");
    let indices: Vec<usize> = params
        .layout
        .specs
        .iter()
        .flat_map(|s| [s.offset, s.offset + (s.rows * s.cols) / 2])
        .collect();
    let fd = fd_gradient(&params, &batch, &indices, 1e-5)?;
    let mut worst = (0.0f64, 0usize);
    for (&i, &f) in indices.iter().zip(&fd) {
        let rel = (grads[i] - f).abs() / (1.0 + grads[i].abs().max(f.abs()));
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    let tensor = params
        .layout
        .specs
        .iter()
        .find(|s| worst.1 < s.offset + s.rows * s.cols)
        .map(|s| s.name.as_str())
        .unwrap_or("?");
    println!(
        "eval mode: {} probes, worst relative error {:.2e} (in {tensor})",
        indices.len(),
        worst.0
    );

    // Dropout: differentiate through fixed masks by pinning the seed.
    let mut cfg_drop = params.config;
    cfg_drop.dropout = 0.2;
    let p = Parameters::<f64>::init(cfg_drop, 123)?;
    let spec = DropoutSpec { seed: 9 };
    let (_, g) = loss_and_grad(&p, &batch, Some(spec))?;
    let mut worst_drop = 0.0f64;
    for &i in &indices {
        let h = 1e-5;
        let mut q = p.clone();
        q.data[i] = p.data[i] + h;
        let up = loss_and_grad(&q, &batch, Some(spec))?.0;
        q.data[i] = p.data[i] - h;
        let down = loss_and_grad(&q, &batch, Some(spec))?.0;
        let f = (up - down) / (2.0 * h);
        worst_drop = worst_drop.max((g[i] - f).abs() / (1.0 + g[i].abs().max(f.abs())));
    }
    println!("dropout 0.2, fixed masks: worst relative error {worst_drop:.2e}");
    Ok(())
}

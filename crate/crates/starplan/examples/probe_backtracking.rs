//! Backtracking-ratio probe: how much final-token attention lands on the
//! target branch.
//!
//! Partitions input positions into problem / edge / special tokens, computes
//! BR for a freshly initialized model (expected near 1/k), shows that a
//! synthetic attention pattern concentrated on the answer branch scores 1.0,
//! and writes an attention heat strip as SVG.
//!
//! Run: `cargo run --example probe_backtracking`

use starplan::encoding::{encode_input, input_len, Vocabulary};
use starplan::model::{forward, ModelConfig, Parameters};
use starplan::probe::{attention_heat_svg, backtracking_ratio, partition_tokens};
use starplan::rng::stream_rng;
use starplan::stargraph::sample_instance;

fn main() -> starplan::Result<()> {
    let (k, m) = (4usize, 3usize);
    let mut rng = stream_rng(3, &[1]);
    let inst = sample_instance(k, m, &mut rng, 60)?;
    let vocab = Vocabulary::new(60);
    let tokens = encode_input(&inst, &vocab)?;
    let part = partition_tokens(&tokens, &inst, &vocab)?;
    println!(
        "G({k}, {m}): {} edge positions ({} on the target branch), {} problem, {} special",
        part.edges.len(),
        part.on_path.len(),
        part.problem.len(),
        part.special.len()
    );

    let mcfg = ModelConfig {
        layers: 4,
        heads: 2,
        hidden: 32,
        vocab_size: vocab.size(),
        max_seq_len: input_len(k, m) + 2,
        dropout: 0.0,
    };
    let params = Parameters::<f32>::init(mcfg, 0)?;
    let trace = forward(&params, &tokens)?;
    let br = backtracking_ratio(&trace, &part)?;
    println!(
        "untrained model BR = {br:.4} (chance level 1/k = {:.4})",
        1.0 / k as f64
    );

    // A synthetic trace whose edge attention sits entirely on the answer
    // branch scores BR = 1.
    let mut concentrated = trace.clone();
    for layer in &mut concentrated.attn {
        layer.iter_mut().for_each(|w| *w = 0.0);
        for &p in &part.on_path {
            layer[p] = 1.0 / part.on_path.len() as f64;
        }
    }
    println!(
        "fully concentrated attention BR = {:.4}",
        backtracking_ratio(&concentrated, &part)?
    );

    let svg = attention_heat_svg(&trace, &part);
    let path = std::env::temp_dir().join("starplan_attention.svg");
    std::fs::write(&path, &svg)?;
    println!("attention heat strip written to {}", path.display());
    Ok(())
}

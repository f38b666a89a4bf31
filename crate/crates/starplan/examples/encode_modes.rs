//! Show the token serialization for each supervision mode.
//!
//! Encodes one G(2, 3) instance under latent, chain-of-thought, and every
//! internalization stage, printing input tokens, target tokens, and the loss
//! mask side by side.
//!
//! Run: `cargo run --example encode_modes`

use starplan::encoding::{input_len, make_target, Mode, Vocabulary};
use starplan::rng::stream_rng;
use starplan::stargraph::sample_instance;

fn main() -> starplan::Result<()> {
    let (k, m) = (2usize, 3usize);
    let mut rng = stream_rng(7, &[0]);
    let inst = sample_instance(k, m, &mut rng, 50)?;
    let vocab = Vocabulary::new(50);
    println!(
        "G({k}, {m}); sep={}, delim={}, eos={}, vocab size {}",
        vocab.sep(),
        vocab.delim(),
        vocab.eos(),
        vocab.size()
    );
    println!("input length 3km+3 = {}\n", input_len(k, m));

    let mut modes = vec![
        (String::from("latent"), Mode::Latent),
        (String::from("cot"), Mode::Cot),
    ];
    for s in 0..m {
        modes.push((format!("icot({s})"), Mode::Icot(s)));
    }
    for (name, mode) in modes {
        let ex = make_target(&inst, mode, &vocab)?;
        println!("{name:>8}: input {:?}", ex.input);
        println!("{:>8}  target {:?} mask {:?}", "", ex.target, ex.loss_mask);
    }
    println!(
        "\nicot({}) collapses to the latent target [ground, eos] = [{}, {}]",
        m - 1,
        inst.ground,
        vocab.eos()
    );
    Ok(())
}

//! Prompt export and scoring for frontier-model evaluation.
//!
//! Builds a prompt set in each template mode, prints one full prompt, writes
//! the few-shot set to JSONL, then scores simulated responders (oracle,
//! uniform neighbor, constant junk) with the same pipeline real responses go
//! through.
//!
//! Run: `cargo run --example prompt_pipeline`

use starplan::oracle::{simulate_response, Responder};
use starplan::promptgen::{
    build_eval_set, export_eval_set, read_eval_set, score_responses, PromptMode, Response,
};
use starplan::rng::{stream_rng, tag};
use starplan::stargraph::{build_dataset, DatasetConfig};

fn main() -> starplan::Result<()> {
    let dcfg = DatasetConfig::new(3, 3, 200, 50, 200, 21);
    let bundle = build_dataset(&dcfg)?;

    let records = build_eval_set(&bundle, PromptMode::FewShot)?;
    let r = &records[0];
    if let Some(system) = &r.system {
        println!("--- system ---\n{system}\n");
    }
    println!(
        "--- user ({}, expected {}) ---\n{}\n",
        r.id, r.expected, r.user
    );

    let path = std::env::temp_dir().join("starplan_prompts.jsonl");
    let n = export_eval_set(&bundle, PromptMode::FewShot, &path)?;
    println!("exported {n} prompts to {}", path.display());
    let records = read_eval_set(&path)?;

    // Score simulated responders; scoring never sees how answers were made.
    let by_id: std::collections::HashMap<&str, _> = records
        .iter()
        .map(|rec| {
            (
                rec.id.as_str(),
                &bundle.test[rec.id["test-".len()..].parse::<usize>().unwrap()],
            )
        })
        .collect();
    for (name, responder) in [
        ("oracle", Responder::Oracle),
        ("uniform neighbor", Responder::UniformNeighbor),
        ("constant 99999", Responder::Constant(99_999)),
    ] {
        let mut rng = stream_rng(dcfg.seed, &[tag::RESPONDER]);
        let responses: Vec<Response> = records
            .iter()
            .map(|rec| Response {
                id: rec.id.clone(),
                text: simulate_response(responder, by_id[rec.id.as_str()], &mut rng),
            })
            .collect();
        let rep = score_responses(&records, &responses)?;
        println!(
            "{name:>17}: accuracy {:.3} skill {:+.3} ({} malformed, {} unanswered)",
            rep.score.accuracy, rep.score.skill, rep.malformed, rep.unanswered
        );
    }
    Ok(())
}

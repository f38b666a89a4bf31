//! Prompt rendering for external LLM evaluation, JSONL export, and response
//! scoring.
//!
//! The four templates (direct, cot, zero_shot, few_shot) are instantiated
//! byte-exactly; golden files under `tests/goldens/` pin them. The graph is
//! rendered as edges of "u v" joined by ", ". No network code lives here:
//! prompts are exported, answered elsewhere, and the responses scored from a
//! file.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::encode_input;
use crate::error::{Error, Result};
use crate::evalstats::SkillScore;
use crate::rng::{stream_rng, tag};
use crate::stargraph::{DatasetBundle, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Direct,
    Cot,
    ZeroShot,
    FewShot,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Direct => "direct",
            PromptMode::Cot => "cot",
            PromptMode::ZeroShot => "zero_shot",
            PromptMode::FewShot => "few_shot",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub mode: PromptMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
    pub expected: u32,
    pub k: usize,
    pub m: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demo_ids: Vec<String>,
}

/// "u1 v1, u2 v2, ...": node indices space-separated within an edge, edges
/// comma-separated.
pub fn render_graph(instance: &TaskInstance) -> String {
    let parts: Vec<String> = instance
        .graph
        .edges
        .iter()
        .map(|(u, v)| format!("{u} {v}"))
        .collect();
    parts.join(", ")
}

const PREAMBLE: &str = "You are given an undirected graph. The graph is described as a list of edges.\n\
Each edge is written as two node indices separated by a space, and different edges are separated by commas.\n";

const TASK_LINE: &str =
    "Your task is to only return the first hop node after the Source node on the shortest path toward the Target node.\n";

const STRICT_SYSTEM: &str = "You are a precise assistant. You must follow the instructions exactly and output only what is explicitly requested. Do not provide explanations or intermediate reasoning.";

const STRICT_TASK: &str = "Your task is to find the first hop node after the Source node on the shortest path toward the Target node.\n\
Return ONLY the first hop node after the Source on this path.\n\
Do NOT provide explanations, reasoning, or intermediate steps.\n\
Output ONLY the final answer enclosed within <answer> and </answer> tags.\n";

fn problem_block(instance: &TaskInstance) -> String {
    format!(
        "Graph: {}\nSource: {}\nTarget: {}\n",
        render_graph(instance),
        instance.graph.source,
        instance.target
    )
}

/// Instantiates one template. `demos` must be given exactly for `FewShot`
/// and must not contain the scored instance.
pub fn render_prompt(
    instance: &TaskInstance,
    mode: PromptMode,
    demos: Option<&[TaskInstance]>,
) -> Result<(Option<String>, String)> {
    match (mode, demos) {
        (PromptMode::FewShot, Some(d)) if d.len() == 3 => {
            let vocab = crate::encoding::Vocabulary::new(u32::MAX as usize - 3);
            let fp = encode_input(instance, &vocab)?;
            for demo in d {
                if encode_input(demo, &vocab)? == fp {
                    return Err(Error::DemoOverlap);
                }
            }
        }
        (PromptMode::FewShot, _) => {
            return Err(Error::Config(
                "few_shot requires exactly 3 demonstrations".into(),
            ));
        }
        (_, Some(_)) => {
            return Err(Error::Config(format!(
                "mode {} takes no demonstrations",
                mode.as_str()
            )));
        }
        _ => {}
    }
    Ok(match mode {
        PromptMode::Direct => {
            let user = format!(
                "{PREAMBLE}{}{TASK_LINE}Return an integer only.",
                problem_block(instance)
            );
            (None, user)
        }
        PromptMode::Cot => {
            let user = format!(
                "{PREAMBLE}{}{TASK_LINE}\
                 You can find this first hop by backtracking from the Target node along a shortest path toward the Source node until you reach a direct neighbor of the Source node.\n\
                 Return the backtracking nodes as integers separated by single spaces.\n\
                 The last integer must be the first hop node.",
                problem_block(instance)
            );
            (None, user)
        }
        PromptMode::ZeroShot => {
            let user = format!(
                "{PREAMBLE}{}{STRICT_TASK}For example: <answer>3</answer>",
                problem_block(instance)
            );
            (Some(STRICT_SYSTEM.to_string()), user)
        }
        PromptMode::FewShot => {
            let demos = demos.expect("checked above");
            let mut user = format!(
                "{PREAMBLE}{STRICT_TASK}\
                 Below are some examples and their solutions.\n\
                 At the end, you will be given another question that you will need to solve. Make sure you follow the same format.\n"
            );
            for (i, demo) in demos.iter().enumerate() {
                write!(
                    user,
                    "\n[Example {}]\n{}<answer>{}</answer>\n",
                    i + 1,
                    problem_block(demo),
                    demo.ground
                )
                .expect("write to string");
            }
            write!(
                user,
                "\nNow solve the following problem.\n{}",
                problem_block(instance).trim_end()
            )
            .expect("write to string");
            (Some(STRICT_SYSTEM.to_string()), user)
        }
    })
}

/// Renders the whole test split of a bundle. Few-shot demos are drawn from
/// the train split (disjoint from test by dataset construction) under the
/// bundle's seed; every record gets fresh demos.
pub fn build_eval_set(bundle: &DatasetBundle, mode: PromptMode) -> Result<Vec<PromptRecord>> {
    let (k, m) = (bundle.config.k, bundle.config.m);
    let mut rng = stream_rng(bundle.config.seed, &[tag::DEMOS]);
    let mut records = Vec::with_capacity(bundle.test.len());
    for (i, inst) in bundle.test.iter().enumerate() {
        let (demo_insts, demo_ids) = if mode == PromptMode::FewShot {
            if bundle.train.len() < 3 {
                return Err(Error::Config(
                    "few_shot needs at least 3 train instances".into(),
                ));
            }
            let picks = rand::seq::index::sample(&mut rng, bundle.train.len(), 3);
            let ids = picks.iter().map(|j| format!("train-{j}")).collect();
            let insts: Vec<TaskInstance> = picks.iter().map(|j| bundle.train[j].clone()).collect();
            (Some(insts), ids)
        } else {
            (None, Vec::new())
        };
        let (system, user) = render_prompt(inst, mode, demo_insts.as_deref())?;
        records.push(PromptRecord {
            id: format!("test-{i}"),
            mode,
            system,
            user,
            expected: inst.ground,
            k,
            m,
            demo_ids,
        });
    }
    Ok(records)
}

/// One JSON record per line, deterministic order. Returns the record count.
pub fn export_eval_set(bundle: &DatasetBundle, mode: PromptMode, path: &Path) -> Result<usize> {
    let records = build_eval_set(bundle, mode)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in &records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(records.len())
}

pub fn read_eval_set(path: &Path) -> Result<Vec<PromptRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// A raw response to one prompt, as produced by whatever answered the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    pub text: String,
}

pub fn read_responses(path: &Path) -> Result<Vec<Response>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// First `<answer>...</answer>` payload if present, else the last standalone
/// integer in the text. A tag whose payload is not an integer is malformed
/// (no fallback); None means malformed.
pub fn extract_answer(text: &str) -> Option<u32> {
    if let Some(start) = text.find("<answer>") {
        let rest = &text[start + "<answer>".len()..];
        if let Some(end) = rest.find("</answer>") {
            return rest[..end].trim().parse().ok();
        }
    }
    let mut last = None;
    for token in text.split(|c: char| !c.is_ascii_digit()) {
        if !token.is_empty() {
            if let Ok(v) = token.parse() {
                last = Some(v);
            }
        }
    }
    last
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub k: usize,
    pub m: usize,
    pub score: SkillScore,
    pub malformed: usize,
    /// Prompt ids that received no response; scored incorrect.
    pub unanswered: usize,
}

/// Scores responses against an exported eval set. Malformed or missing
/// answers count as incorrect; a response id absent from the eval set is an
/// error.
pub fn score_responses(records: &[PromptRecord], responses: &[Response]) -> Result<ScoreReport> {
    if records.is_empty() {
        return Err(Error::Config("empty eval set".into()));
    }
    let by_id: std::collections::HashMap<&str, &PromptRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut correct = 0usize;
    let mut malformed = 0usize;
    for resp in responses {
        let rec = by_id
            .get(resp.id.as_str())
            .ok_or_else(|| Error::UnknownInstance(resp.id.clone()))?;
        seen.insert(rec.id.as_str());
        match extract_answer(&resp.text) {
            Some(v) if v == rec.expected => correct += 1,
            Some(_) => {}
            None => malformed += 1,
        }
    }
    let unanswered = records.len() - seen.len();
    Ok(ScoreReport {
        k: records[0].k,
        m: records[0].m,
        score: SkillScore::from_counts(correct, records.len(), records[0].k),
        malformed,
        unanswered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{simulate_response, Responder};
    use crate::rng::stream_rng;
    use crate::stargraph::{build_dataset, sample_instance, DatasetConfig};

    fn bundle() -> DatasetBundle {
        build_dataset(&DatasetConfig::new(3, 3, 20, 8, 10, 99)).unwrap()
    }

    #[test]
    fn direct_template_fixed_lines() {
        let inst = sample_instance(2, 2, &mut stream_rng(1, &[0]), 50).unwrap();
        let (system, user) = render_prompt(&inst, PromptMode::Direct, None).unwrap();
        assert!(system.is_none());
        assert!(user.contains(&format!("Source: {}", inst.graph.source)));
        assert!(user.ends_with("Return an integer only."));
        assert!(user.contains("separated by commas"));
    }

    #[test]
    fn cot_template_backtracking_lines() {
        let inst = sample_instance(2, 2, &mut stream_rng(1, &[1]), 50).unwrap();
        let (_, user) = render_prompt(&inst, PromptMode::Cot, None).unwrap();
        assert!(user.ends_with("The last integer must be the first hop node."));
        assert!(user.contains("backtracking from the Target node"));
    }

    #[test]
    fn zero_shot_has_answer_tags_and_system() {
        let inst = sample_instance(2, 2, &mut stream_rng(1, &[2]), 50).unwrap();
        let (system, user) = render_prompt(&inst, PromptMode::ZeroShot, None).unwrap();
        assert!(system.unwrap().starts_with("You are a precise assistant."));
        assert!(user.contains("<answer> and </answer>"));
        assert!(user.ends_with("For example: <answer>3</answer>"));
    }

    #[test]
    fn few_shot_has_three_examples_with_answers() {
        let b = bundle();
        let demos = b.train[..3].to_vec();
        let (_, user) = render_prompt(&b.test[0], PromptMode::FewShot, Some(&demos)).unwrap();
        assert_eq!(user.matches("[Example ").count(), 3);
        for d in &demos {
            assert!(user.contains(&format!("<answer>{}</answer>", d.ground)));
        }
        assert!(user.contains("Now solve the following problem."));
        assert!(user
            .trim_end()
            .ends_with(&format!("Target: {}", b.test[0].target)));
    }

    #[test]
    fn few_shot_rejects_overlapping_demo() {
        let b = bundle();
        let mut demos = b.train[..2].to_vec();
        demos.push(b.test[0].clone());
        assert!(matches!(
            render_prompt(&b.test[0], PromptMode::FewShot, Some(&demos)),
            Err(Error::DemoOverlap)
        ));
    }

    #[test]
    fn few_shot_demo_count_enforced() {
        let b = bundle();
        assert!(render_prompt(&b.test[0], PromptMode::FewShot, Some(&b.train[..2])).is_err());
        assert!(render_prompt(&b.test[0], PromptMode::Direct, Some(&b.train[..3])).is_err());
    }

    #[test]
    fn export_is_deterministic_and_round_trips() {
        let b = bundle();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        let n1 = export_eval_set(&b, PromptMode::FewShot, &p1).unwrap();
        let n2 = export_eval_set(&b, PromptMode::FewShot, &p2).unwrap();
        assert_eq!(n1, b.test.len());
        assert_eq!(n2, n1);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let records = read_eval_set(&p1).unwrap();
        for (r, inst) in records.iter().zip(&b.test) {
            assert_eq!(r.expected, inst.ground);
            assert_eq!(r.demo_ids.len(), 3);
        }
    }

    #[test]
    fn answer_extraction_rules() {
        assert_eq!(extract_answer("<answer>17</answer>"), Some(17));
        assert_eq!(extract_answer("blah <answer> 4 </answer> blah"), Some(4));
        assert_eq!(extract_answer("path is 9 3 then 12"), Some(12));
        assert_eq!(extract_answer("no numbers here"), None);
        assert_eq!(extract_answer("<answer>oops</answer> but 7"), None);
    }

    #[test]
    fn scoring_oracle_and_random_responders() {
        let b = bundle();
        let records = build_eval_set(&b, PromptMode::Direct).unwrap();
        let mut rng = stream_rng(b.config.seed, &[tag::RESPONDER]);
        let oracle_resp: Vec<Response> = records
            .iter()
            .zip(&b.test)
            .map(|(r, inst)| Response {
                id: r.id.clone(),
                text: simulate_response(Responder::Oracle, inst, &mut rng),
            })
            .collect();
        let rep = score_responses(&records, &oracle_resp).unwrap();
        assert_eq!(rep.score.skill, 1.0);
        assert_eq!(rep.malformed, 0);
        assert_eq!(rep.unanswered, 0);

        let missing_tag: Vec<Response> = records
            .iter()
            .map(|r| Response {
                id: r.id.clone(),
                text: "I refuse.".into(),
            })
            .collect();
        let rep = score_responses(&records, &missing_tag).unwrap();
        assert_eq!(rep.malformed, records.len());
        assert_eq!(rep.score.accuracy, 0.0);
    }

    #[test]
    fn random_neighbor_scores_near_zero_skill() {
        let cfg = DatasetConfig::new(4, 2, 10, 8, 400, 17);
        let b = build_dataset(&cfg).unwrap();
        let records = build_eval_set(&b, PromptMode::Direct).unwrap();
        let mut rng = stream_rng(cfg.seed, &[tag::RESPONDER]);
        let resp: Vec<Response> = records
            .iter()
            .zip(&b.test)
            .map(|(r, inst)| Response {
                id: r.id.clone(),
                text: simulate_response(Responder::UniformNeighbor, inst, &mut rng),
            })
            .collect();
        let rep = score_responses(&records, &resp).unwrap();
        assert!(rep.score.skill.abs() < 0.12, "skill {}", rep.score.skill);
    }

    #[test]
    fn unknown_response_id_is_an_error() {
        let b = bundle();
        let records = build_eval_set(&b, PromptMode::Direct).unwrap();
        let resp = vec![Response {
            id: "nope-0".into(),
            text: "1".into(),
        }];
        assert!(matches!(
            score_responses(&records, &resp),
            Err(Error::UnknownInstance(_))
        ));
    }
}

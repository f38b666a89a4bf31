//! Final-token attention partitioning and the backtracking ratio (BR).
//!
//! BR measures what fraction of the final input token's edge-token attention
//! falls on the edges of the answer path, summed over all layers. Uniform
//! attention gives BR = 1/k (2m of the 2km edge-node positions are on-path);
//! a model that truly backtracks concentrates far above that.

use serde::{Deserialize, Serialize};

use crate::encoding::{encode_input, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward, ForwardTrace, Parameters, Scalar};
use crate::stargraph::TaskInstance;

/// Disjoint classification of every input-token position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPartition {
    /// Source and target positions.
    pub problem: Vec<usize>,
    /// All edge node-token positions.
    pub edges: Vec<usize>,
    /// Separator and delimiter positions.
    pub special: Vec<usize>,
    /// Edge positions belonging to the m answer-path edges.
    pub on_path: Vec<usize>,
    /// Edge positions of the other branches.
    pub off_path: Vec<usize>,
}

/// Classifies the positions of `tokens`, which must be the exact encoding of
/// `instance`.
pub fn partition_tokens(
    tokens: &[u32],
    instance: &TaskInstance,
    vocab: &Vocabulary,
) -> Result<TokenPartition> {
    let expected = encode_input(instance, vocab)?;
    if tokens != expected {
        return Err(Error::LayoutMismatch(
            "tokens are not the encoding of this instance".into(),
        ));
    }
    let g = &instance.graph;
    let n = tokens.len();
    // Nodes of the branch containing the target, plus the source: exactly
    // the endpoints of the m answer-path edges.
    let path_branch = g
        .branches
        .iter()
        .find(|b| b.contains(&instance.target))
        .expect("target lies on a branch");
    let on_set: std::collections::HashSet<u32> = std::iter::once(g.source)
        .chain(path_branch.iter().copied())
        .collect();

    let mut part = TokenPartition {
        problem: vec![n - 3, n - 2],
        edges: Vec::new(),
        special: Vec::new(),
        on_path: Vec::new(),
        off_path: Vec::new(),
    };
    for (i, &(u, v)) in g.edges.iter().enumerate() {
        let base = 3 * i;
        part.edges.push(base);
        part.edges.push(base + 1);
        let on = on_set.contains(&u) && on_set.contains(&v);
        if on {
            part.on_path.push(base);
            part.on_path.push(base + 1);
        } else {
            part.off_path.push(base);
            part.off_path.push(base + 1);
        }
        if i + 1 < g.edges.len() {
            part.special.push(base + 2);
        }
    }
    part.special.push(n - 4);
    part.special.push(n - 1);
    debug_assert_eq!(
        part.problem.len() + part.edges.len() + part.special.len(),
        n
    );
    debug_assert_eq!(part.on_path.len(), 2 * g.m);
    Ok(part)
}

/// BR for one trace: summed across layers, on-path edge attention over all
/// edge attention of the final input token.
pub fn backtracking_ratio(trace: &ForwardTrace, partition: &TokenPartition) -> Result<f64> {
    let mut on = 0.0f64;
    let mut off = 0.0f64;
    for row in &trace.attn {
        if row.len() != trace.seq_len {
            return Err(Error::LayoutMismatch(
                "attention row length mismatch".into(),
            ));
        }
        for &p in &partition.on_path {
            on += row[p];
        }
        for &p in &partition.off_path {
            off += row[p];
        }
    }
    if on + off <= 0.0 {
        return Err(Error::ZeroEdgeAttention);
    }
    Ok(on / (on + off))
}

/// One evaluated instance in a BR report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrRow {
    pub index: usize,
    pub br: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BrReport {
    pub k: usize,
    pub m: usize,
    pub rows: Vec<BrRow>,
    /// Mean over every instance.
    pub mean_all: f64,
    /// Mean over correctly answered instances; None if none were correct.
    pub mean_correct: Option<f64>,
}

impl BrReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,m,instance,br,correct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{}\n",
                self.k, self.m, r.index, r.br, r.correct
            ));
        }
        out.push_str(&format!("# mean_all,{:.6}\n", self.mean_all));
        if let Some(mc) = self.mean_correct {
            out.push_str(&format!("# mean_correct,{:.6}\n", mc));
        }
        out
    }
}

/// Mean BR over a test set. Per-instance values come along; correctness is
/// the greedy first-token prediction against ground truth.
pub fn average_br<S: Scalar>(
    params: &Parameters<S>,
    instances: &[TaskInstance],
    vocab: &Vocabulary,
) -> Result<BrReport> {
    if instances.is_empty() {
        return Err(Error::Config("empty instance set for BR".into()));
    }
    let (k, m) = (instances[0].graph.k, instances[0].graph.m);
    let mut rows = Vec::with_capacity(instances.len());
    let mut sum = 0.0;
    let mut sum_c = 0.0;
    let mut n_c = 0usize;
    for (index, inst) in instances.iter().enumerate() {
        let tokens = encode_input(inst, vocab)?;
        let trace = forward(params, &tokens)?;
        let part = partition_tokens(&tokens, inst, vocab)?;
        let br = backtracking_ratio(&trace, &part)?;
        let correct = trace.argmax_at(tokens.len() - 1) == inst.ground;
        sum += br;
        if correct {
            sum_c += br;
            n_c += 1;
        }
        rows.push(BrRow { index, br, correct });
    }
    Ok(BrReport {
        k,
        m,
        mean_all: sum / rows.len() as f64,
        mean_correct: (n_c > 0).then(|| sum_c / n_c as f64),
        rows,
    })
}

/// Data-faithful SVG heat strip: one row per layer, one cell per input
/// position; opacity encodes attention mass, outline marks on-path cells.
pub fn attention_heat_svg(trace: &ForwardTrace, partition: &TokenPartition) -> String {
    let cell = 14usize;
    let w = trace.seq_len * cell + 2;
    let h = trace.attn.len() * cell + 2;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n"
    );
    let max = trace
        .attn
        .iter()
        .flatten()
        .cloned()
        .fold(f64::MIN_POSITIVE, f64::max);
    for (li, row) in trace.attn.iter().enumerate() {
        for (pi, &a) in row.iter().enumerate() {
            let x = pi * cell + 1;
            let y = li * cell + 1;
            let opacity = (a / max).clamp(0.0, 1.0);
            let stroke = if partition.on_path.contains(&pi) {
                " stroke=\"#d62728\" stroke-width=\"1.5\""
            } else {
                " stroke=\"#cccccc\" stroke-width=\"0.5\""
            };
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"#1f77b4\" fill-opacity=\"{opacity:.4}\"{stroke}>\
                 <title>layer {li} pos {pi}: {a:.5}</title></rect>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::stargraph::sample_instance;

    fn uniform_trace(seq_len: usize, layers: usize) -> ForwardTrace {
        ForwardTrace {
            seq_len,
            vocab_size: 1,
            logits: vec![0.0; seq_len],
            attn: vec![vec![1.0 / seq_len as f64; seq_len]; layers],
        }
    }

    #[test]
    fn partition_counts_match_layout() {
        let mut rng = stream_rng(3, &[0]);
        let inst = sample_instance(3, 3, &mut rng, 50).unwrap();
        let vocab = Vocabulary::new(50);
        let tokens = encode_input(&inst, &vocab).unwrap();
        let p = partition_tokens(&tokens, &inst, &vocab).unwrap();
        assert_eq!(p.edges.len(), 18);
        assert_eq!(p.on_path.len(), 6);
        assert_eq!(p.off_path.len(), 12);
        assert_eq!(p.special.len(), 10);
        assert_eq!(p.problem.len(), 2);
        // every position classified exactly once at top level
        let mut all: Vec<usize> = p
            .problem
            .iter()
            .chain(&p.edges)
            .chain(&p.special)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..tokens.len()).collect::<Vec<_>>());
    }

    #[test]
    fn partition_rejects_foreign_tokens() {
        let mut rng = stream_rng(3, &[1]);
        let inst = sample_instance(2, 2, &mut rng, 50).unwrap();
        let other = sample_instance(2, 2, &mut rng, 50).unwrap();
        let vocab = Vocabulary::new(50);
        let tokens = encode_input(&other, &vocab).unwrap();
        assert!(matches!(
            partition_tokens(&tokens, &inst, &vocab),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn uniform_attention_gives_one_over_k() {
        for (k, m) in [(2usize, 3usize), (4, 3), (5, 2)] {
            let mut rng = stream_rng(5, &[k as u64, m as u64]);
            let inst = sample_instance(k, m, &mut rng, 60).unwrap();
            let vocab = Vocabulary::new(60);
            let tokens = encode_input(&inst, &vocab).unwrap();
            let p = partition_tokens(&tokens, &inst, &vocab).unwrap();
            let trace = uniform_trace(tokens.len(), 8);
            let br = backtracking_ratio(&trace, &p).unwrap();
            assert!((br - 1.0 / k as f64).abs() < 1e-12, "k={k} br={br}");
        }
    }

    #[test]
    fn concentrated_attention_gives_one() {
        let mut rng = stream_rng(6, &[0]);
        let inst = sample_instance(3, 3, &mut rng, 50).unwrap();
        let vocab = Vocabulary::new(50);
        let tokens = encode_input(&inst, &vocab).unwrap();
        let p = partition_tokens(&tokens, &inst, &vocab).unwrap();
        let mut attn = vec![vec![0.0; tokens.len()]; 4];
        for row in attn.iter_mut() {
            row[p.on_path[0]] = 1.0;
        }
        let trace = ForwardTrace {
            seq_len: tokens.len(),
            vocab_size: 1,
            logits: vec![0.0; tokens.len()],
            attn,
        };
        assert_eq!(backtracking_ratio(&trace, &p).unwrap(), 1.0);
    }

    #[test]
    fn zero_edge_attention_flagged() {
        let mut rng = stream_rng(6, &[1]);
        let inst = sample_instance(2, 2, &mut rng, 50).unwrap();
        let vocab = Vocabulary::new(50);
        let tokens = encode_input(&inst, &vocab).unwrap();
        let p = partition_tokens(&tokens, &inst, &vocab).unwrap();
        let mut attn = vec![vec![0.0; tokens.len()]; 2];
        for row in attn.iter_mut() {
            // all mass on the trailing delimiter, none on edges
            row[tokens.len() - 1] = 1.0;
        }
        let trace = ForwardTrace {
            seq_len: tokens.len(),
            vocab_size: 1,
            logits: vec![0.0; tokens.len()],
            attn,
        };
        assert!(matches!(
            backtracking_ratio(&trace, &p),
            Err(Error::ZeroEdgeAttention)
        ));
    }

    #[test]
    fn average_br_on_untrained_model_is_near_chance() {
        use crate::model::{ModelConfig, Parameters};
        let mut rng = stream_rng(7, &[0]);
        let vocab = Vocabulary::new(50);
        let instances: Vec<_> = (0..16)
            .map(|_| sample_instance(2, 2, &mut rng, 50).unwrap())
            .collect();
        let mcfg = ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 16,
            vocab_size: vocab.size(),
            max_seq_len: 32,
            dropout: 0.0,
        };
        let params = Parameters::<f32>::init(mcfg, 0).unwrap();
        let rep = average_br(&params, &instances, &vocab).unwrap();
        assert_eq!(rep.rows.len(), 16);
        assert!(rep.mean_all > 0.0 && rep.mean_all < 1.0);
        // Near-uniform attention at init: loosely around 1/k.
        assert!((rep.mean_all - 0.5).abs() < 0.2, "mean {}", rep.mean_all);
    }

    #[test]
    fn heat_svg_is_well_formed() {
        let mut rng = stream_rng(8, &[0]);
        let inst = sample_instance(2, 2, &mut rng, 50).unwrap();
        let vocab = Vocabulary::new(50);
        let tokens = encode_input(&inst, &vocab).unwrap();
        let p = partition_tokens(&tokens, &inst, &vocab).unwrap();
        let svg = attention_heat_svg(&uniform_trace(tokens.len(), 3), &p);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 3 * tokens.len());
    }
}

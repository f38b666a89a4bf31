//! Token serialization for the three supervision modes.
//!
//! Input layout for an instance with M = k*m edges:
//!
//! ```text
//! u_1 v_1 s u_2 v_2 s ... u_M v_M g source target g
//! ```
//!
//! A separator `s` sits only between consecutive edges, so the sequence has
//! exactly `3*M + 3` tokens. Node tokens are the raw permuted integer labels;
//! the three special tokens occupy the ids just past the label pool.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stargraph::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Node labels occupy `0..pool`.
    pub pool: usize,
}

impl Vocabulary {
    pub fn new(pool: usize) -> Self {
        Self { pool }
    }

    pub fn sep(&self) -> u32 {
        self.pool as u32
    }

    pub fn delim(&self) -> u32 {
        self.pool as u32 + 1
    }

    pub fn eos(&self) -> u32 {
        self.pool as u32 + 2
    }

    pub fn size(&self) -> usize {
        self.pool + 3
    }

    pub fn is_node(&self, token: u32) -> bool {
        (token as usize) < self.pool
    }
}

/// Supervision mode for one encoded example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Latent,
    Cot,
    /// Staged internalization: the first `s` CoT tokens are dropped.
    Icot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    /// Per-position loss switch over `target`.
    pub loss_mask: Vec<bool>,
    pub mode: Mode,
}

pub fn input_len(k: usize, m: usize) -> usize {
    3 * k * m + 3
}

pub fn encode_input(instance: &TaskInstance, vocab: &Vocabulary) -> Result<Vec<u32>> {
    let g = &instance.graph;
    let edges = &g.edges;
    let mut out = Vec::with_capacity(input_len(g.k, g.m));
    for (i, &(u, v)) in edges.iter().enumerate() {
        for t in [u, v] {
            if !vocab.is_node(t) {
                return Err(Error::TokenOutOfVocabulary(t, vocab.size()));
            }
            out.push(t);
        }
        if i + 1 < edges.len() {
            out.push(vocab.sep());
        }
    }
    out.push(vocab.delim());
    out.push(g.source);
    out.push(instance.target);
    out.push(vocab.delim());
    debug_assert_eq!(out.len(), input_len(g.k, g.m));
    Ok(out)
}

/// Inverse of [`encode_input`]: recover (edges, source, target).
pub fn decode_input(tokens: &[u32], vocab: &Vocabulary) -> Result<(Vec<(u32, u32)>, u32, u32)> {
    if tokens.len() < 7 || tokens.len() % 3 != 0 {
        return Err(Error::LayoutMismatch(format!(
            "input length {} is not 3M+3",
            tokens.len()
        )));
    }
    let n = tokens.len();
    if tokens[n - 1] != vocab.delim() || tokens[n - 4] != vocab.delim() {
        return Err(Error::LayoutMismatch("missing graph delimiters".into()));
    }
    let source = tokens[n - 3];
    let target = tokens[n - 2];
    let mut edges = Vec::new();
    let body = &tokens[..n - 4];
    for (i, chunk) in body.chunks(3).enumerate() {
        if !vocab.is_node(chunk[0]) || !vocab.is_node(chunk[1]) {
            return Err(Error::LayoutMismatch(format!(
                "edge {i} has non-node tokens"
            )));
        }
        edges.push((chunk[0], chunk[1]));
        if chunk.len() == 3 && chunk[2] != vocab.sep() {
            return Err(Error::LayoutMismatch(format!("edge {i} missing separator")));
        }
    }
    Ok((edges, source, target))
}

/// Target tokens and loss mask for a supervision mode.
///
/// latent: `[ground, eos]`; cot: the m backtracked nodes then eos;
/// icot(s): cot with the first `s` node tokens removed.
pub fn make_target(
    instance: &TaskInstance,
    mode: Mode,
    vocab: &Vocabulary,
) -> Result<EncodedExample> {
    let m = instance.graph.m;
    let nodes: Vec<u32> = match mode {
        Mode::Latent => vec![instance.ground],
        Mode::Cot => instance.answer_path.clone(),
        Mode::Icot(s) => {
            if s > m - 1 {
                return Err(Error::StageOutOfRange { stage: s, m });
            }
            instance.answer_path[s..].to_vec()
        }
    };
    let mut target = nodes;
    target.push(vocab.eos());
    let loss_mask = vec![true; target.len()];
    Ok(EncodedExample {
        input: encode_input(instance, vocab)?,
        target,
        loss_mask,
        mode,
    })
}

/// Whitespace-separated token dump, one sequence per line. Golden-file format.
pub fn dump_tokens(sequences: &[Vec<u32>]) -> String {
    let mut out = String::new();
    for seq in sequences {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

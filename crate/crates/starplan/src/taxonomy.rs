//! Structural taxonomy of wrong first-hop predictions.
//!
//! For an erroneous node prediction v̂, let d1 = d(v̂, source) and
//! d2 = d(v̂, target). The three categories are:
//!
//! * `one_hop`  — d1 = 1: a neighbor of the source, but the wrong branch's
//!   first node (the local heuristic without planning);
//! * `on_path`  — d2 < m−1: deep inside the target's branch, overshooting
//!   the first hop;
//! * `off_path` — d2 ≥ m: on a wrong branch (any off-branch node is at
//!   least m+1 from the target via the source).
//!
//! Star-graph geometry leaves d2 = m−1 (the branch node two hops from the
//! target when it is not a source neighbor) outside all three predicates;
//! such predictions are counted as `unclassified` rather than silently
//! forced into a bucket. Non-node output tokens are reported separately as
//! invalid-token errors and excluded from the three-way split.

use serde::{Deserialize, Serialize};

use crate::encoding::{encode_input, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{batch_last_argmax, Parameters, Scalar};
use crate::stargraph::{NodeId, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCategory {
    OneHop,
    OnPath,
    OffPath,
    Unclassified,
}

/// Classifies a wrong node prediction. The prediction must be a node of the
/// instance's graph and differ from the ground truth.
pub fn classify_error(instance: &TaskInstance, predicted: NodeId) -> Result<ErrorCategory> {
    if predicted == instance.ground {
        return Err(Error::Config("prediction is correct, not an error".into()));
    }
    let g = &instance.graph;
    let d1 = g.shortest_path_distance(predicted, g.source)?;
    let d2 = g.shortest_path_distance(predicted, instance.target)?;
    let m = g.m;
    Ok(if d1 == 1 {
        ErrorCategory::OneHop
    } else if d2 < m - 1 {
        ErrorCategory::OnPath
    } else if d2 >= m {
        ErrorCategory::OffPath
    } else {
        ErrorCategory::Unclassified
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ErrorBreakdown {
    pub k: usize,
    pub m: usize,
    pub total_instances: usize,
    pub correct: usize,
    pub one_hop: usize,
    pub on_path: usize,
    pub off_path: usize,
    pub unclassified: usize,
    /// Predictions that were not node tokens of the graph at all.
    pub invalid_token: usize,
    /// One (instance index, predicted token) exemplar per category, in the
    /// order one_hop, on_path, off_path, unclassified, invalid_token.
    pub exemplars: Vec<(String, usize, u32)>,
}

impl ErrorBreakdown {
    pub fn errors(&self) -> usize {
        self.one_hop + self.on_path + self.off_path + self.unclassified + self.invalid_token
    }

    /// Fractions over classified-plus-unclassified node errors.
    pub fn fractions(&self) -> [f64; 4] {
        let d = (self.one_hop + self.on_path + self.off_path + self.unclassified) as f64;
        if d == 0.0 {
            return [0.0; 4];
        }
        [
            self.one_hop as f64 / d,
            self.on_path as f64 / d,
            self.off_path as f64 / d,
            self.unclassified as f64 / d,
        ]
    }

    pub fn to_csv(&self) -> String {
        let [f1, f2, f3, f4] = self.fractions();
        let mut out = String::from(
            "k,m,total,correct,one_hop,on_path,off_path,unclassified,invalid_token,\
             one_hop_frac,on_path_frac,off_path_frac,unclassified_frac\n",
        );
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4}\n",
            self.k,
            self.m,
            self.total_instances,
            self.correct,
            self.one_hop,
            self.on_path,
            self.off_path,
            self.unclassified,
            self.invalid_token,
            f1,
            f2,
            f3,
            f4,
        ));
        out
    }
}

/// Aggregates the taxonomy over explicit (instance, predicted token) pairs.
pub fn breakdown_from_predictions(
    instances: &[TaskInstance],
    predictions: &[u32],
) -> Result<ErrorBreakdown> {
    if instances.len() != predictions.len() {
        return Err(Error::RaggedBatch);
    }
    if instances.is_empty() {
        return Err(Error::Config(
            "empty instance set for error breakdown".into(),
        ));
    }
    let mut bd = ErrorBreakdown {
        k: instances[0].graph.k,
        m: instances[0].graph.m,
        total_instances: instances.len(),
        ..Default::default()
    };
    let push_exemplar = |bd: &mut ErrorBreakdown, name: &str, i: usize, tok: u32| {
        if !bd.exemplars.iter().any(|(n, _, _)| n == name) {
            bd.exemplars.push((name.to_string(), i, tok));
        }
    };
    for (i, (inst, &pred)) in instances.iter().zip(predictions).enumerate() {
        if pred == inst.ground {
            bd.correct += 1;
            continue;
        }
        if !inst.graph.contains(pred) {
            bd.invalid_token += 1;
            push_exemplar(&mut bd, "invalid_token", i, pred);
            continue;
        }
        match classify_error(inst, pred)? {
            ErrorCategory::OneHop => {
                bd.one_hop += 1;
                push_exemplar(&mut bd, "one_hop", i, pred);
            }
            ErrorCategory::OnPath => {
                bd.on_path += 1;
                push_exemplar(&mut bd, "on_path", i, pred);
            }
            ErrorCategory::OffPath => {
                bd.off_path += 1;
                push_exemplar(&mut bd, "off_path", i, pred);
            }
            ErrorCategory::Unclassified => {
                bd.unclassified += 1;
                push_exemplar(&mut bd, "unclassified", i, pred);
            }
        }
    }
    Ok(bd)
}

/// Runs the model over a test set and classifies its wrong answers.
pub fn error_breakdown<S: Scalar>(
    params: &Parameters<S>,
    instances: &[TaskInstance],
    vocab: &Vocabulary,
) -> Result<ErrorBreakdown> {
    let inputs: Vec<Vec<u32>> = instances
        .iter()
        .map(|i| encode_input(i, vocab))
        .collect::<Result<_>>()?;
    let preds = batch_last_argmax(params, &inputs)?;
    breakdown_from_predictions(instances, &preds)
}

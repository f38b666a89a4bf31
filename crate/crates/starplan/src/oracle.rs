//! Independent reference implementations used to validate the fast paths.
//!
//! Everything here is deliberately naive: breadth-first search straight off
//! the edge list, central finite differences straight off the loss function,
//! and simulated responders that answer prompts without a model. Tests pit
//! the production code against these.

use std::collections::{HashMap, VecDeque};

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{batch_loss, Parameters, TrainBatch};
use crate::stargraph::{NodeId, TaskInstance};

/// First hop on the shortest path from `source` to `target`, computed by
/// plain BFS over the undirected edge list. Shares no code with
/// `StarGraph::ground_truth_first_hop`.
pub fn brute_force_first_hop(
    edges: &[(NodeId, NodeId)],
    source: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    if source == target {
        return Err(Error::TargetNotLeaf(target));
    }
    let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for &(u, v) in edges {
        adj.entry(u).or_default().push(v);
        adj.entry(v).or_default().push(u);
    }
    if !adj.contains_key(&source) {
        return Err(Error::UnknownNode(source));
    }
    if !adj.contains_key(&target) {
        return Err(Error::UnknownNode(target));
    }
    let mut parent: HashMap<NodeId, NodeId> = HashMap::new();
    let mut queue = VecDeque::from([source]);
    parent.insert(source, source);
    while let Some(u) = queue.pop_front() {
        if u == target {
            break;
        }
        if let Some(ns) = adj.get(&u) {
            for &n in ns {
                parent.entry(n).or_insert_with(|| {
                    queue.push_back(n);
                    u
                });
            }
        }
    }
    if !parent.contains_key(&target) {
        return Err(Error::DisconnectedGraph);
    }
    let mut node = target;
    while parent[&node] != source {
        node = parent[&node];
    }
    Ok(node)
}

/// Full shortest path source..=target by the same BFS.
pub fn brute_force_path(
    edges: &[(NodeId, NodeId)],
    source: NodeId,
    target: NodeId,
) -> Result<Vec<NodeId>> {
    let mut path = vec![target];
    let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for &(u, v) in edges {
        adj.entry(u).or_default().push(v);
        adj.entry(v).or_default().push(u);
    }
    let mut parent: HashMap<NodeId, NodeId> = HashMap::new();
    let mut queue = VecDeque::from([source]);
    parent.insert(source, source);
    while let Some(u) = queue.pop_front() {
        if let Some(ns) = adj.get(&u) {
            for &n in ns {
                parent.entry(n).or_insert_with(|| {
                    queue.push_back(n);
                    u
                });
            }
        }
    }
    if !parent.contains_key(&target) {
        return Err(Error::DisconnectedGraph);
    }
    while *path.last().unwrap() != source {
        let p = parent[path.last().unwrap()];
        path.push(p);
    }
    path.reverse();
    Ok(path)
}

/// Central-difference gradient of the mean masked loss with respect to the
/// selected parameter indices. f64 only; used to check the analytic backward
/// pass.
pub fn fd_gradient(
    params: &Parameters<f64>,
    batch: &TrainBatch,
    indices: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let mut p = params.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = p.data[i];
        p.data[i] = orig + h;
        let up = batch_loss(&p, batch)?;
        p.data[i] = orig - h;
        let down = batch_loss(&p, batch)?;
        p.data[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Strategies for answering a prompt without a model, used to exercise the
/// scoring pipeline end to end.
#[derive(Debug, Clone, Copy)]
pub enum Responder {
    /// Always the ground-truth first hop.
    Oracle,
    /// A uniformly random neighbor of the source (accuracy 1/k).
    UniformNeighbor,
    /// A uniformly random node of the graph.
    UniformNode,
    /// A fixed literal, valid or not.
    Constant(u32),
}

/// Produces a free-text answer in the shape real responses take.
pub fn simulate_response<R: Rng>(
    responder: Responder,
    instance: &TaskInstance,
    rng: &mut R,
) -> String {
    let answer = match responder {
        Responder::Oracle => instance.ground,
        Responder::UniformNeighbor => {
            let firsts: Vec<NodeId> = instance.graph.branches.iter().map(|b| b[0]).collect();
            firsts[rng.gen_range(0..firsts.len())]
        }
        Responder::UniformNode => {
            let nodes = instance.graph.nodes();
            nodes[rng.gen_range(0..nodes.len())]
        }
        Responder::Constant(tok) => tok,
    };
    format!("Answer: {answer}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::stargraph::sample_instance;

    #[test]
    fn bfs_first_hop_matches_branch_structure() {
        let mut rng = stream_rng(11, &[1]);
        for _ in 0..50 {
            let inst = sample_instance(4, 3, &mut rng, 50).unwrap();
            let hop =
                brute_force_first_hop(&inst.graph.edges, inst.graph.source, inst.target).unwrap();
            assert_eq!(hop, inst.ground);
            // answer_path runs target -> ground; BFS runs source -> target.
            let path = brute_force_path(&inst.graph.edges, inst.graph.source, inst.target).unwrap();
            let reversed: Vec<_> = path[1..].iter().rev().copied().collect();
            assert_eq!(reversed, inst.answer_path);
        }
    }

    #[test]
    fn bfs_rejects_bad_endpoints() {
        let edges = [(1u32, 2u32), (2, 3)];
        assert!(matches!(
            brute_force_first_hop(&edges, 9, 3),
            Err(Error::UnknownNode(9))
        ));
        assert!(matches!(
            brute_force_first_hop(&edges, 1, 1),
            Err(Error::TargetNotLeaf(1))
        ));
        let split = [(1u32, 2u32), (3, 4)];
        assert!(matches!(
            brute_force_first_hop(&split, 1, 4),
            Err(Error::DisconnectedGraph)
        ));
    }

    fn grad_check_setup(dropout: f64) -> (Parameters<f64>, TrainBatch) {
        use crate::model::ModelConfig;
        let cfg = ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 16,
            vocab_size: 11,
            max_seq_len: 12,
            dropout,
        };
        let p = Parameters::init(cfg, 42).unwrap();
        let batch = TrainBatch {
            seqs: vec![vec![1, 4, 2, 7, 3, 9, 5, 10], vec![2, 2, 8, 1, 6, 0, 4, 10]],
            masks: vec![vec![false, false, true, false, true, true, true]; 2],
        };
        (p, batch)
    }

    /// Two probe indices per named tensor: the first element and one from
    /// the middle.
    fn probe_indices(p: &Parameters<f64>) -> Vec<usize> {
        p.layout
            .specs
            .iter()
            .flat_map(|s| {
                let len = s.rows * s.cols;
                [s.offset, s.offset + len / 2 + len % 2.min(len - 1)]
            })
            .collect()
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (p, batch) = grad_check_setup(0.0);
        let (_, grads) = crate::model::loss_and_grad(&p, &batch, None).unwrap();
        let idx = probe_indices(&p);
        let fd = fd_gradient(&p, &batch, &idx, 1e-5).unwrap();
        for (&i, &f) in idx.iter().zip(&fd) {
            let a = grads[i];
            let denom = 1.0 + a.abs().max(f.abs());
            assert!(
                (a - f).abs() / denom < 1e-7,
                "param {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn dropout_gradients_match_finite_differences() {
        use crate::model::{loss_and_grad, DropoutSpec};
        let (p, batch) = grad_check_setup(0.25);
        let spec = DropoutSpec { seed: 5 };
        let (_, grads) = loss_and_grad(&p, &batch, Some(spec)).unwrap();
        // Finite differences through the same fixed dropout masks.
        let loss_at = |q: &Parameters<f64>| loss_and_grad(q, &batch, Some(spec)).unwrap().0;
        let idx = probe_indices(&p);
        for &i in &idx {
            let mut q = p.clone();
            let h = 1e-5;
            q.data[i] = p.data[i] + h;
            let up = loss_at(&q);
            q.data[i] = p.data[i] - h;
            let down = loss_at(&q);
            let f = (up - down) / (2.0 * h);
            let a = grads[i];
            let denom = 1.0 + a.abs().max(f.abs());
            assert!(
                (a - f).abs() / denom < 1e-7,
                "param {i}: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn responders_answer_in_scoreable_form() {
        let mut rng = stream_rng(12, &[2]);
        let inst = sample_instance(3, 2, &mut rng, 50).unwrap();
        let text = simulate_response(Responder::Oracle, &inst, &mut rng);
        assert_eq!(text, format!("Answer: {}", inst.ground));
        let neighbor = simulate_response(Responder::UniformNeighbor, &inst, &mut rng);
        let val: u32 = neighbor.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(inst.graph.branches.iter().any(|b| b[0] == val));
    }
}

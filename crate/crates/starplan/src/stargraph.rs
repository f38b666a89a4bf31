//! Star-graph task generation and leakage-free dataset construction.
//!
//! A star graph `G(k,m)` has one source node and `k` disjoint branches, each a
//! simple path of `m` edges. The task is to name the first node on the branch
//! that leads to a designated target leaf. Node identifiers are a random
//! injection into a larger label pool and the edge list is stored in a random
//! order, so nothing about the labels or their positions gives the answer away.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_input, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, tag};

pub type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StarGraph {
    pub k: usize,
    pub m: usize,
    pub source: NodeId,
    /// `k` branches in path order starting at the neighbor of `source`.
    pub branches: Vec<Vec<NodeId>>,
    /// All `k*m` edges in a stored (shuffled) order.
    pub edges: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub graph: StarGraph,
    /// Terminal node of the branch the model must identify.
    pub target: NodeId,
    /// First node on the target's branch; the answer token.
    pub ground: NodeId,
    /// Nodes from `target` back to `ground`, length `m`.
    pub answer_path: Vec<NodeId>,
}

impl StarGraph {
    pub fn node_count(&self) -> usize {
        self.k * self.m + 1
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        let mut out = vec![self.source];
        for b in &self.branches {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.source == node || self.branches.iter().any(|b| b.contains(&node))
    }

    pub fn adjacency(&self) -> HashMap<NodeId, Vec<NodeId>> {
        let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for &(u, v) in &self.edges {
            adj.entry(u).or_default().push(v);
            adj.entry(v).or_default().push(u);
        }
        adj
    }

    /// Exact BFS hop count between two nodes.
    pub fn shortest_path_distance(&self, a: NodeId, b: NodeId) -> Result<usize> {
        if !self.contains(a) {
            return Err(Error::UnknownNode(a));
        }
        if !self.contains(b) {
            return Err(Error::UnknownNode(b));
        }
        if a == b {
            return Ok(0);
        }
        let adj = self.adjacency();
        let mut dist: HashMap<NodeId, usize> = HashMap::new();
        dist.insert(a, 0);
        let mut queue = VecDeque::from([a]);
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            if let Some(nbrs) = adj.get(&u) {
                for &v in nbrs {
                    if !dist.contains_key(&v) {
                        if v == b {
                            return Ok(du + 1);
                        }
                        dist.insert(v, du + 1);
                        queue.push_back(v);
                    }
                }
            }
        }
        Err(Error::DisconnectedGraph)
    }

    /// The unique neighbor of `source` on the path to a leaf `target`.
    pub fn ground_truth_first_hop(&self, target: NodeId) -> Result<NodeId> {
        for b in &self.branches {
            if *b.last().expect("branches are non-empty") == target {
                return Ok(b[0]);
            }
        }
        Err(Error::TargetNotLeaf(target))
    }

    /// Check all structural invariants; used by tests and file read-back.
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.m < 2 {
            return Err(Error::InvalidDimensions {
                k: self.k,
                m: self.m,
            });
        }
        let nodes = self.nodes();
        let distinct: HashSet<_> = nodes.iter().copied().collect();
        if distinct.len() != self.k * self.m + 1 || self.branches.len() != self.k {
            return Err(Error::LayoutMismatch("node count".into()));
        }
        if self.branches.iter().any(|b| b.len() != self.m) {
            return Err(Error::LayoutMismatch("branch length".into()));
        }
        // The stored edge list must equal the union of branch edges.
        let norm = |(u, v): (NodeId, NodeId)| if u < v { (u, v) } else { (v, u) };
        let mut expected: HashSet<(NodeId, NodeId)> = HashSet::new();
        for b in &self.branches {
            expected.insert(norm((self.source, b[0])));
            for w in b.windows(2) {
                expected.insert(norm((w[0], w[1])));
            }
        }
        let stored: HashSet<_> = self.edges.iter().map(|&e| norm(e)).collect();
        if stored != expected || self.edges.len() != self.k * self.m {
            return Err(Error::LayoutMismatch("edge list".into()));
        }
        let adj = self.adjacency();
        if adj[&self.source].len() != self.k {
            return Err(Error::LayoutMismatch("source degree".into()));
        }
        for b in &self.branches {
            for (i, &n) in b.iter().enumerate() {
                let want = if i == self.m - 1 { 1 } else { 2 };
                if adj[&n].len() != want {
                    return Err(Error::LayoutMismatch("node degree".into()));
                }
            }
        }
        Ok(())
    }
}

impl TaskInstance {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        let m = self.graph.m;
        if self.answer_path.len() != m
            || self.answer_path[0] != self.target
            || self.answer_path[m - 1] != self.ground
        {
            return Err(Error::LayoutMismatch("answer path endpoints".into()));
        }
        for w in self.answer_path.windows(2) {
            if self.graph.shortest_path_distance(w[0], w[1])? != 1 {
                return Err(Error::LayoutMismatch("answer path adjacency".into()));
            }
        }
        if self.graph.ground_truth_first_hop(self.target)? != self.ground {
            return Err(Error::LayoutMismatch("ground node".into()));
        }
        Ok(())
    }
}

/// Default label pool: comfortably larger than the node count so label
/// density carries no signal.
pub fn default_id_pool(k: usize, m: usize) -> usize {
    (2 * (k * m + 1)).max(50)
}

pub fn generate_star_graph<R: Rng>(
    k: usize,
    m: usize,
    rng: &mut R,
    id_pool_size: usize,
) -> Result<StarGraph> {
    if k < 2 || m < 2 {
        return Err(Error::InvalidDimensions { k, m });
    }
    let n = k * m + 1;
    if id_pool_size < n {
        return Err(Error::PoolTooSmall {
            pool: id_pool_size,
            needed: n,
        });
    }
    // Uniformly random injection of the n abstract nodes into the label pool.
    let ids: Vec<NodeId> = rand::seq::index::sample(rng, id_pool_size, n)
        .into_iter()
        .map(|i| i as NodeId)
        .collect();
    let source = ids[0];
    let branches: Vec<Vec<NodeId>> = ids[1..].chunks(m).map(|c| c.to_vec()).collect();
    let mut edges = Vec::with_capacity(k * m);
    for b in &branches {
        edges.push((source, b[0]));
        for w in b.windows(2) {
            edges.push((w[0], w[1]));
        }
    }
    // Random endpoint orientation and a random order over the whole list.
    for e in edges.iter_mut() {
        if rng.gen::<bool>() {
            *e = (e.1, e.0);
        }
    }
    edges.shuffle(rng);
    Ok(StarGraph {
        k,
        m,
        source,
        branches,
        edges,
    })
}

pub fn sample_instance<R: Rng>(
    k: usize,
    m: usize,
    rng: &mut R,
    id_pool_size: usize,
) -> Result<TaskInstance> {
    let graph = generate_star_graph(k, m, rng, id_pool_size)?;
    let branch = rng.gen_range(0..k);
    let b = &graph.branches[branch];
    let target = *b.last().expect("branch non-empty");
    let ground = b[0];
    let answer_path: Vec<NodeId> = b.iter().rev().copied().collect();
    Ok(TaskInstance {
        graph,
        target,
        ground,
        answer_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub k: usize,
    pub m: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub id_pool_size: Option<usize>,
    #[serde(default = "default_retry_cap")]
    pub retry_cap: usize,
}

fn default_retry_cap() -> usize {
    1000
}

impl DatasetConfig {
    pub fn new(k: usize, m: usize, train: usize, val: usize, test: usize, seed: u64) -> Self {
        Self {
            k,
            m,
            train_size: train,
            val_size: val,
            test_size: test,
            seed,
            id_pool_size: None,
            retry_cap: default_retry_cap(),
        }
    }

    pub fn pool(&self) -> usize {
        self.id_pool_size
            .unwrap_or_else(|| default_id_pool(self.k, self.m))
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.pool())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.m < 2 {
            return Err(Error::InvalidDimensions {
                k: self.k,
                m: self.m,
            });
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("all split sizes must be positive".into()));
        }
        if self.pool() < self.k * self.m + 1 {
            return Err(Error::PoolTooSmall {
                pool: self.pool(),
                needed: self.k * self.m + 1,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub config: DatasetConfig,
    pub train: Vec<TaskInstance>,
    pub val: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    /// Canonical encodings of val ∪ test; the exclusion set for train.
    pub fingerprints: HashSet<Vec<u32>>,
}

/// The canonical fingerprint of an instance is the exact serialized input
/// token sequence, post shuffle and label permutation. Two instances with
/// equal fingerprints produce identical training examples.
pub fn fingerprint(instance: &TaskInstance, vocab: &Vocabulary) -> Vec<u32> {
    encode_input(instance, vocab).expect("generated instance encodes")
}

/// Build train/val/test splits with strict leakage filtering: val and test
/// are generated first, their fingerprints recorded, and every colliding
/// train candidate is discarded and regenerated.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let (k, m, pool) = (config.k, config.m, config.pool());
    let vocab = config.vocabulary();
    let mut fingerprints: HashSet<Vec<u32>> = HashSet::new();

    let gen_split = |tag_id: u64, size: usize, exclude: bool, fps: &mut HashSet<Vec<u32>>| {
        let mut out = Vec::with_capacity(size);
        for i in 0..size {
            let mut rng = stream_rng(config.seed, &[tag_id, i as u64]);
            let mut attempts = 0usize;
            loop {
                let inst = sample_instance(k, m, &mut rng, pool)?;
                let fp = fingerprint(&inst, &vocab);
                if !exclude || !fps.contains(&fp) {
                    fps.insert(fp);
                    out.push(inst);
                    break;
                }
                attempts += 1;
                if attempts >= config.retry_cap {
                    return Err(Error::GenerationExhausted { retries: attempts });
                }
            }
        }
        Ok::<_, Error>(out)
    };

    // Eval splits first; they also self-exclude so the three sets are disjoint.
    let val = gen_split(tag::VAL, config.val_size, true, &mut fingerprints)?;
    let test = gen_split(tag::TEST, config.test_size, true, &mut fingerprints)?;
    let eval_fps = fingerprints.clone();
    let mut train = Vec::with_capacity(config.train_size);
    for i in 0..config.train_size {
        let mut rng = stream_rng(config.seed, &[tag::TRAIN, i as u64]);
        let mut attempts = 0usize;
        loop {
            let inst = sample_instance(k, m, &mut rng, pool)?;
            let fp = fingerprint(&inst, &vocab);
            if !eval_fps.contains(&fp) {
                train.push(inst);
                break;
            }
            attempts += 1;
            if attempts >= config.retry_cap {
                return Err(Error::GenerationExhausted { retries: attempts });
            }
        }
    }
    Ok(DatasetBundle {
        config: config.clone(),
        train,
        val,
        test,
        fingerprints: eval_fps,
    })
}

/// Line format for dataset files: one instance per line.
#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    k: usize,
    m: usize,
    edges: Vec<[NodeId; 2]>,
    source: NodeId,
    target: NodeId,
    ground: NodeId,
    path: Vec<NodeId>,
}

impl From<&TaskInstance> for InstanceRecord {
    fn from(inst: &TaskInstance) -> Self {
        InstanceRecord {
            k: inst.graph.k,
            m: inst.graph.m,
            edges: inst.graph.edges.iter().map(|&(u, v)| [u, v]).collect(),
            source: inst.graph.source,
            target: inst.target,
            ground: inst.ground,
            path: inst.answer_path.clone(),
        }
    }
}

impl TryFrom<InstanceRecord> for TaskInstance {
    type Error = Error;

    fn try_from(rec: InstanceRecord) -> Result<Self> {
        // Branches are reconstructed by walking outward from the source;
        // branch order follows first appearance in the stored edge list.
        let mut adj: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        let mut first_seen: Vec<NodeId> = Vec::new();
        for &[u, v] in &rec.edges {
            adj.entry(u).or_default().push(v);
            adj.entry(v).or_default().push(u);
            for n in [u, v] {
                if n != rec.source && !first_seen.contains(&n) {
                    first_seen.push(n);
                }
            }
        }
        let source_nbrs = adj
            .get(&rec.source)
            .cloned()
            .ok_or(Error::UnknownNode(rec.source))?;
        let mut heads: Vec<NodeId> = first_seen
            .into_iter()
            .filter(|n| source_nbrs.contains(n))
            .collect();
        heads.truncate(rec.k);
        let mut branches = Vec::with_capacity(rec.k);
        for head in heads {
            let mut branch = vec![head];
            let mut prev = rec.source;
            let mut cur = head;
            while branch.len() < rec.m {
                let next = *adj[&cur]
                    .iter()
                    .find(|&&n| n != prev)
                    .ok_or(Error::DisconnectedGraph)?;
                branch.push(next);
                prev = cur;
                cur = next;
            }
            branches.push(branch);
        }
        let graph = StarGraph {
            k: rec.k,
            m: rec.m,
            source: rec.source,
            branches,
            edges: rec.edges.iter().map(|&[u, v]| (u, v)).collect(),
        };
        let inst = TaskInstance {
            graph,
            target: rec.target,
            ground: rec.ground,
            answer_path: rec.path,
        };
        inst.validate()?;
        Ok(inst)
    }
}

pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut f, &InstanceRecord::from(inst))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_instances(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord = serde_json::from_str(&line)?;
        out.push(TaskInstance::try_from(rec)?);
    }
    Ok(out)
}

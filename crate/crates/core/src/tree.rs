//! Binary trees addressed by breadth-first position, with a label permutation
//! on top, plus depth/distance over step DAGs.
//!
//! Positions index the full binary tree of depth `depth_max` in breadth-first
//! order: the root is `0` and the children of `q` are `2q + 1` and `2q + 2`.
//! A [`LabeledTree`] keeps an ancestor-closed subset of those positions and a
//! bijection between retained positions and labels.

use std::collections::VecDeque;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Label = u32;

/// Largest supported depth; keeps the position space comfortably in memory.
pub const MAX_DEPTH: u32 = 16;

#[inline]
pub fn parent(q: usize) -> Option<usize> {
    (q > 0).then(|| (q - 1) / 2)
}

#[inline]
pub fn position_depth(q: usize) -> u32 {
    (usize::BITS - 1) - (q + 1).leading_zeros()
}

pub fn full_size(depth: u32) -> usize {
    (1usize << (depth + 1)) - 1
}

/// An ordered label sequence. Tree validity is checked separately with
/// [`LabeledTree::validate_path`], because parsed model output may be
/// arbitrary.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Path(pub Vec<Label>);

impl Path {
    pub fn new(nodes: Vec<Label>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("path must contain at least one node".into()));
        }
        Ok(Path(nodes))
    }

    pub fn nodes(&self) -> &[Label] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of edges.
    pub fn edges(&self) -> usize {
        self.0.len().saturating_sub(1)
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledTree {
    depth_max: u32,
    /// Retained positions, ascending.
    positions: Vec<usize>,
    /// Indexed by position over the full tree; `None` for dropped positions.
    label_of: Vec<Option<Label>>,
    /// Indexed by label.
    position_of: Vec<Option<usize>>,
}

impl LabeledTree {
    /// Full tree of depth `depth` with identity labels.
    pub fn full(depth: u32) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(Error::InvalidInput(format!(
                "depth {depth} exceeds supported maximum {MAX_DEPTH}"
            )));
        }
        let n = full_size(depth);
        Ok(Self {
            depth_max: depth,
            positions: (0..n).collect(),
            label_of: (0..n as Label).map(Some).collect(),
            position_of: (0..n).map(Some).collect(),
        })
    }

    /// Builds a tree from retained positions and a label per retained
    /// position (`label_of[i]` labels `positions[i]`), checking every
    /// invariant.
    pub fn from_parts(depth_max: u32, positions: &[usize], labels: &[Label]) -> Result<Self> {
        if depth_max > MAX_DEPTH {
            return Err(Error::InvalidInput(format!("depth {depth_max} too large")));
        }
        if positions.len() != labels.len() {
            return Err(Error::DataIntegrity(format!(
                "{} positions but {} labels",
                positions.len(),
                labels.len()
            )));
        }
        let n = full_size(depth_max);
        let mut present = vec![false; n];
        for &q in positions {
            if q >= n {
                return Err(Error::DataIntegrity(format!(
                    "position {q} outside depth-{depth_max} tree"
                )));
            }
            if present[q] {
                return Err(Error::DataIntegrity(format!("duplicate position {q}")));
            }
            present[q] = true;
        }
        if !present[0] {
            return Err(Error::DataIntegrity("root position 0 missing".into()));
        }
        for &q in positions {
            if let Some(p) = parent(q) {
                if !present[p] {
                    return Err(Error::DataIntegrity(format!(
                        "position {q} retained without its parent {p}"
                    )));
                }
            }
        }
        if !positions.iter().any(|&q| position_depth(q) == depth_max) {
            return Err(Error::DataIntegrity(format!(
                "no retained position at depth {depth_max}"
            )));
        }
        let mut sorted_pos = positions.to_vec();
        sorted_pos.sort_unstable();
        let mut sorted_labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        sorted_labels.sort_unstable();
        if sorted_pos != sorted_labels {
            return Err(Error::DataIntegrity(
                "labels are not a permutation of the retained positions".into(),
            ));
        }
        let mut label_of = vec![None; n];
        let mut position_of = vec![None; n];
        for (&q, &l) in positions.iter().zip(labels) {
            label_of[q] = Some(l);
            position_of[l as usize] = Some(q);
        }
        Ok(Self {
            depth_max,
            positions: sorted_pos,
            label_of,
            position_of,
        })
    }

    /// Full tree relabeled by `perm`, where `perm[q]` is the label of
    /// position `q`.
    pub fn full_with_labels(depth: u32, perm: &[Label]) -> Result<Self> {
        let n = full_size(depth);
        if perm.len() != n {
            return Err(Error::InvalidInput(format!(
                "expected {n} labels for a depth-{depth} tree, got {}",
                perm.len()
            )));
        }
        let positions: Vec<usize> = (0..n).collect();
        Self::from_parts(depth, &positions, perm)
    }

    pub fn depth_max(&self) -> u32 {
        self.depth_max
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.positions.len() == full_size(self.depth_max)
    }

    #[inline]
    pub fn contains_position(&self, q: usize) -> bool {
        self.label_of.get(q).is_some_and(|l| l.is_some())
    }

    #[inline]
    pub fn label_of(&self, q: usize) -> Option<Label> {
        self.label_of.get(q).copied().flatten()
    }

    #[inline]
    pub fn position_of(&self, label: Label) -> Result<usize> {
        self.position_of
            .get(label as usize)
            .copied()
            .flatten()
            .ok_or_else(|| Error::UnknownLabel { label })
    }

    pub fn contains_label(&self, label: Label) -> bool {
        self.position_of(label).is_ok()
    }

    /// Label per position over the full tree, `None` where dropped.
    pub fn label_table(&self) -> &[Option<Label>] {
        &self.label_of
    }

    /// Labels in ascending order.
    pub fn labels(&self) -> Vec<Label> {
        let mut ls: Vec<Label> = self.positions.iter().filter_map(|&q| self.label_of(q)).collect();
        ls.sort_unstable();
        ls
    }

    pub fn root_label(&self) -> Label {
        self.label_of(0).expect("root is always retained")
    }

    /// Retained children of position `q`.
    pub fn children(&self, q: usize) -> impl Iterator<Item = usize> + '_ {
        [2 * q + 1, 2 * q + 2]
            .into_iter()
            .filter(move |&c| self.contains_position(c))
    }

    /// Labels adjacent to `label`, parent first then children.
    pub fn neighbors(&self, label: Label) -> Result<Vec<Label>> {
        let q = self.position_of(label)?;
        let mut out = Vec::with_capacity(3);
        if let Some(p) = parent(q) {
            out.push(self.label_of(p).expect("ancestor-closed"));
        }
        out.extend(self.children(q).map(|c| self.label_of(c).expect("retained")));
        Ok(out)
    }

    #[inline]
    pub fn node_depth(&self, label: Label) -> Result<u32> {
        Ok(position_depth(self.position_of(label)?))
    }

    pub fn lca(&self, a: Label, b: Label) -> Result<Label> {
        let (qa, qb) = (self.position_of(a)?, self.position_of(b)?);
        Ok(self.label_of(lca_position(qa, qb)).expect("ancestor-closed"))
    }

    #[inline]
    pub fn tree_distance(&self, a: Label, b: Label) -> Result<u32> {
        let (qa, qb) = (self.position_of(a)?, self.position_of(b)?);
        Ok(position_distance(qa, qb))
    }

    /// Unique shortest label path from `a` to `b`: up to the lowest common
    /// ancestor, then down.
    pub fn shortest_path(&self, a: Label, b: Label) -> Result<Path> {
        let mut out = Vec::with_capacity(2 * self.depth_max as usize + 1);
        self.shortest_path_into(a, b, &mut out)?;
        Ok(Path(out))
    }

    /// [`Self::shortest_path`] into a reused buffer.
    #[inline]
    pub fn shortest_path_into(&self, a: Label, b: Label, out: &mut Vec<Label>) -> Result<()> {
        let (qa, qb) = (self.position_of(a)?, self.position_of(b)?);
        let l = position_depth(lca_position(qa, qb));
        let (up, down) = ((position_depth(qa) - l) as usize, (position_depth(qb) - l) as usize);
        let n = up + down + 1;
        out.clear();
        out.resize(n, 0);
        let label = |q: usize| self.label_of[q].expect("ancestor-closed");
        let mut q = qa;
        for slot in &mut out[..=up] {
            *slot = label(q);
            q = q.saturating_sub(1) / 2;
        }
        let mut q = qb;
        for slot in out[up + 1..].iter_mut().rev() {
            *slot = label(q);
            q = (q - 1) / 2;
        }
        Ok(())
    }

    /// Checks that consecutive labels are distinct tree edges.
    pub fn validate_path(&self, path: &Path) -> Result<()> {
        if path.is_empty() {
            return Err(Error::DataIntegrity("empty path".into()));
        }
        for &l in path.nodes() {
            self.position_of(l)?;
        }
        for w in path.nodes().windows(2) {
            if w[0] == w[1] {
                return Err(Error::DataIntegrity(format!("immediate repeat of node {}", w[0])));
            }
            if self.tree_distance(w[0], w[1])? != 1 {
                return Err(Error::DataIntegrity(format!(
                    "{} -> {} is not a tree edge",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Keeps an ancestor-closed subset of `round(sparsity * N)` positions of a
    /// full tree. A root-to-leaf chain reaching `depth_max` is kept first;
    /// the set then grows by uniformly chosen frontier positions (dropped
    /// positions whose parent is retained).
    pub fn sparsify(&self, sparsity: f64, seed: u64) -> Result<Self> {
        if !(0.5..=1.0).contains(&sparsity) {
            return Err(Error::InvalidInput(format!(
                "sparsity {sparsity} outside [0.5, 1.0]"
            )));
        }
        if !self.is_full() {
            return Err(Error::InvalidInput("sparsify expects a full tree".into()));
        }
        let n = full_size(self.depth_max);
        let chain_len = self.depth_max as usize + 1;
        let target = ((sparsity * n as f64).round() as usize).clamp(chain_len, n);
        let mut rng = rng::child(seed, rng::stream::SPARSIFY, 0);

        let mut keep = vec![false; n];
        let mut q = 0usize;
        keep[0] = true;
        for _ in 0..self.depth_max {
            q = 2 * q + 1 + rng.random_range(0..2usize);
            keep[q] = true;
        }
        let mut count = chain_len;
        while count < target {
            let frontier: Vec<usize> = (1..n)
                .filter(|&c| !keep[c] && keep[(c - 1) / 2])
                .collect();
            let pick = frontier[rng.random_range(0..frontier.len())];
            keep[pick] = true;
            count += 1;
        }
        let positions: Vec<usize> = (0..n).filter(|&q| keep[q]).collect();
        let labels: Vec<Label> = positions
            .iter()
            .map(|&q| self.label_of(q).expect("full tree"))
            .collect();
        Self::from_parts(self.depth_max, &positions, &labels)
    }

    /// Assigns a uniformly random permutation of the retained positions as
    /// labels (Fisher-Yates over the sorted positions).
    pub fn permute_labels(&self, seed: u64) -> Self {
        let mut rng = rng::child(seed, rng::stream::PERMUTE, 0);
        let mut labels: Vec<Label> = self.positions.iter().map(|&q| q as Label).collect();
        labels.shuffle(&mut rng);
        Self::from_parts(self.depth_max, &self.positions, &labels)
            .expect("permutation of a valid tree is valid")
    }

    /// Same shape with every label replaced through `map` (old -> new).
    pub fn relabel(&self, map: impl Fn(Label) -> Label) -> Result<Self> {
        let labels: Vec<Label> = self
            .positions
            .iter()
            .map(|&q| map(self.label_of(q).expect("retained")))
            .collect();
        Self::from_parts(self.depth_max, &self.positions, &labels)
    }

    /// Pairwise edge distances between retained positions, in
    /// `positions()` order.
    pub fn distance_matrix(&self) -> Vec<Vec<u32>> {
        self.positions
            .iter()
            .map(|&a| self.positions.iter().map(|&b| position_distance(a, b)).collect())
            .collect()
    }
}

#[inline]
pub fn position_distance(qa: usize, qb: usize) -> u32 {
    let (da, db) = (position_depth(qa), position_depth(qb));
    let l = lca_position(qa, qb);
    da + db - 2 * position_depth(l)
}

/// Lowest common ancestor of two positions. In 1-based BFS numbering an
/// ancestor is a binary prefix, so after aligning depths the ancestor is the
/// common prefix of the two numbers.
#[inline]
pub fn lca_position(qa: usize, qb: usize) -> usize {
    let (da, db) = (position_depth(qa), position_depth(qb));
    let (mut a, mut b) = (qa + 1, qb + 1);
    if da > db {
        a >>= da - db;
    } else {
        b >>= db - da;
    }
    let up = usize::BITS - (a ^ b).leading_zeros();
    (a >> up) - 1
}

/// A DAG of reasoning steps; `parents[i]` lists the direct prerequisites of
/// step `i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepGraph {
    parents: Vec<Vec<usize>>,
}

/// Distance between disconnected steps.
pub const DISCONNECTED: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphMetrics {
    /// Longest directed path length from any root.
    pub depth: Vec<u32>,
    /// Undirected hop counts, [`DISCONNECTED`] when unreachable.
    pub distance: Vec<Vec<i64>>,
}

impl StepGraph {
    pub fn new(parents: Vec<Vec<usize>>) -> Result<Self> {
        let n = parents.len();
        for (i, ps) in parents.iter().enumerate() {
            for &p in ps {
                if p >= n {
                    return Err(Error::InvalidInput(format!(
                        "step {i} references missing parent {p}"
                    )));
                }
                if p == i {
                    return Err(Error::InvalidInput(format!("step {i} is its own parent")));
                }
            }
        }
        let g = Self { parents };
        g.topological_order()?;
        Ok(g)
    }

    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parents_of(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.parents.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(|p| p.len()).collect();
        let mut children = vec![Vec::new(); n];
        for (i, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                children[p].push(i);
            }
        }
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidInput("step graph contains a cycle".into()));
        }
        Ok(order)
    }

    pub fn metrics(&self) -> GraphMetrics {
        let n = self.parents.len();
        let order = self.topological_order().expect("validated at construction");
        let mut depth = vec![0u32; n];
        for &i in &order {
            depth[i] = self.parents[i]
                .iter()
                .map(|&p| depth[p] + 1)
                .max()
                .unwrap_or(0);
        }

        let mut adj = vec![Vec::new(); n];
        for (i, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                adj[i].push(p);
                adj[p].push(i);
            }
        }
        let distance = (0..n)
            .map(|s| {
                let mut d = vec![DISCONNECTED; n];
                d[s] = 0;
                let mut queue = VecDeque::from([s]);
                while let Some(u) = queue.pop_front() {
                    for &v in &adj[u] {
                        if d[v] == DISCONNECTED {
                            d[v] = d[u] + 1;
                            queue.push_back(v);
                        }
                    }
                }
                d
            })
            .collect();
        GraphMetrics { depth, distance }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_tree_sizes() {
        assert_eq!(LabeledTree::full(0).unwrap().len(), 1);
        assert_eq!(LabeledTree::full(1).unwrap().len(), 3);
        assert_eq!(LabeledTree::full(2).unwrap().len(), 7);
        let t = LabeledTree::full(2).unwrap();
        for q in 0..7 {
            assert_eq!(t.label_of(q), Some(q as Label));
        }
    }

    #[test]
    fn permutation_from_example_puts_label_five_at_root() {
        let t = LabeledTree::full_with_labels(2, &[5, 0, 3, 6, 2, 4, 1]).unwrap();
        assert_eq!(t.root_label(), 5);
        assert_eq!(t.node_depth(5).unwrap(), 0);
        assert_eq!(t.position_of(1).unwrap(), 6);
    }

    #[test]
    fn permute_round_trips() {
        let t = LabeledTree::full(3).unwrap().permute_labels(17);
        for &q in t.positions() {
            assert_eq!(t.position_of(t.label_of(q).unwrap()).unwrap(), q);
        }
        assert_eq!(t, LabeledTree::full(3).unwrap().permute_labels(17));
    }

    #[test]
    fn shortest_path_examples() {
        let t = LabeledTree::full(2).unwrap();
        assert_eq!(t.shortest_path(3, 6).unwrap().nodes(), &[3, 1, 0, 2, 6]);
        assert_eq!(t.shortest_path(4, 4).unwrap().nodes(), &[4]);
        assert_eq!(t.shortest_path(1, 3).unwrap().nodes(), &[1, 3]);
        assert_eq!(t.tree_distance(3, 6).unwrap(), 4);
        assert_eq!(t.tree_distance(3, 4).unwrap(), 2);
        assert_eq!(t.tree_distance(5, 5).unwrap(), 0);
    }

    #[test]
    fn depth_by_position() {
        let t = LabeledTree::full(2).unwrap();
        assert_eq!(t.node_depth(0).unwrap(), 0);
        assert_eq!(t.node_depth(1).unwrap(), 1);
        assert_eq!(t.node_depth(2).unwrap(), 1);
        assert_eq!(t.node_depth(6).unwrap(), 2);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let t = LabeledTree::full(1).unwrap();
        assert!(matches!(t.tree_distance(0, 9), Err(Error::UnknownLabel { label: 9 })));
        assert!(t.node_depth(3).is_err());
        assert!(t.shortest_path(7, 0).is_err());
    }

    #[test]
    fn sparsify_counts_and_closure() {
        let full = LabeledTree::full(3).unwrap();
        let s = full.sparsify(0.5, 3).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(full.sparsify(1.0, 3).unwrap().positions(), full.positions());
        assert!(full.sparsify(0.4, 0).is_err());
        assert!(full.sparsify(1.1, 0).is_err());
        assert!(s.sparsify(0.9, 0).is_err());
        for &q in s.positions() {
            if let Some(p) = parent(q) {
                assert!(s.contains_position(p));
            }
        }
        assert!(s.positions().iter().any(|&q| position_depth(q) == 3));
    }

    #[test]
    fn validate_path_catches_bad_edges() {
        let t = LabeledTree::full(2).unwrap();
        assert!(t.validate_path(&Path(vec![3, 1, 0])).is_ok());
        assert!(t.validate_path(&Path(vec![3, 3])).is_err());
        assert!(t.validate_path(&Path(vec![3, 0])).is_err());
        assert!(t.validate_path(&Path(vec![])).is_err());
    }

    #[test]
    fn from_parts_rejects_broken_closure() {
        assert!(LabeledTree::from_parts(2, &[0, 1, 5], &[0, 1, 5]).is_err());
        assert!(LabeledTree::from_parts(2, &[0, 1], &[0, 1]).is_err());
        assert!(LabeledTree::from_parts(1, &[0, 1], &[0, 2]).is_err());
        assert!(LabeledTree::from_parts(1, &[0, 2], &[2, 0]).is_ok());
    }

    #[test]
    fn chain_graph_metrics() {
        let g = StepGraph::new(vec![vec![], vec![0], vec![1]]).unwrap();
        let m = g.metrics();
        assert_eq!(m.depth, vec![0, 1, 2]);
        assert_eq!(m.distance[0][2], 2);
        assert_eq!(m.distance[2][0], 2);
    }

    #[test]
    fn two_parent_node_takes_longest_chain() {
        // 0 -> 1, and node 2 depends on both 0 (depth 0) and 1 (depth 1).
        let g = StepGraph::new(vec![vec![], vec![0], vec![0, 1]]).unwrap();
        assert_eq!(g.metrics().depth, vec![0, 1, 2]);
    }

    #[test]
    fn disconnected_roots_use_sentinel() {
        let g = StepGraph::new(vec![vec![], vec![]]).unwrap();
        assert_eq!(g.metrics().distance[0][1], DISCONNECTED);
    }

    #[test]
    fn cycles_are_rejected() {
        assert!(StepGraph::new(vec![vec![1], vec![0]]).is_err());
        assert!(StepGraph::new(vec![vec![0]]).is_err());
        assert!(StepGraph::new(vec![vec![5]]).is_err());
    }
}

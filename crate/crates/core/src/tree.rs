//! Graph-split decision trees.
//!
//! Nodes live in an append-only arena; merges tombstone the two removed
//! leaves. Samples `0..n_train` are training samples and the rest are test
//! samples; both are routed through every split so predictions never need
//! a second pass.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EdgeType;
use crate::graph::Arborescence;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("node {0} is not a leaf")]
    NotLeaf(usize),
    #[error("node {0} is not an internal node with two leaf children")]
    NotSecondGeneration(usize),
    #[error("node {0} does not exist")]
    NoSuchNode(usize),
    #[error("split of node {node} by graph {graph} edge {edge} leaves an empty training side")]
    EmptyOffspring {
        node: usize,
        graph: usize,
        edge: usize,
    },
    #[error("graph {0} does not exist")]
    NoSuchGraph(usize),
    #[error("edge {edge} is not a cuttable edge of graph {graph}")]
    BadEdge { graph: usize, edge: usize },
    #[error("edge {0} is not a valid edge for this leaf")]
    EdgeNotValid(usize),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Decision rule: cut the edge owned by vertex `edge` of candidate `graph`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphSplitRule {
    pub graph: usize,
    pub edge: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    Leaf {
        weight: f64,
    },
    Internal {
        rule: GraphSplitRule,
        left: usize,
        right: usize,
    },
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeNode {
    pub kind: NodeKind,
    pub depth: usize,
    pub parent: Option<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<TreeNode>,
    /// Live leaf ids in increasing order; a leaf's position is its column.
    leaves: Vec<usize>,
    leaf_of: Vec<usize>,
    n_train: usize,
}

impl DecisionTree {
    /// Root-only tree over `n_train` training and `n_test` test samples.
    pub fn new(n_train: usize, n_test: usize) -> Self {
        Self {
            nodes: vec![TreeNode {
                kind: NodeKind::Leaf { weight: 0.0 },
                depth: 0,
                parent: None,
            }],
            leaves: vec![0],
            leaf_of: vec![0; n_train + n_test],
            n_train,
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> Option<&TreeNode> {
        self.nodes.get(id)
    }

    /// Live leaves in column order.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    /// Column of a live leaf.
    pub fn column_of(&self, leaf: usize) -> Option<usize> {
        self.leaves.binary_search(&leaf).ok()
    }

    pub fn leaf_of(&self, sample: usize) -> usize {
        self.leaf_of[sample]
    }

    pub fn memberships(&self) -> &[usize] {
        &self.leaf_of
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn sample_count(&self) -> usize {
        self.leaf_of.len()
    }

    pub fn is_root_only(&self) -> bool {
        self.leaves.len() == 1
    }

    pub fn depth(&self, id: usize) -> usize {
        self.nodes[id].depth
    }

    /// Maps each arena id to its leaf column (or `usize::MAX`).
    pub fn column_map(&self) -> Vec<usize> {
        let mut map = vec![usize::MAX; self.nodes.len()];
        for (c, &l) in self.leaves.iter().enumerate() {
            map[l] = c;
        }
        map
    }

    /// Training samples of every live leaf, by column.
    pub fn train_groups(&self) -> Vec<Vec<usize>> {
        let cols = self.column_map();
        let mut out = vec![Vec::new(); self.leaves.len()];
        for i in 0..self.n_train {
            out[cols[self.leaf_of[i]]].push(i);
        }
        out
    }

    pub fn train_samples_of(&self, node: usize) -> Vec<usize> {
        (0..self.n_train)
            .filter(|&i| self.leaf_of[i] == node)
            .collect()
    }

    /// `v ∩ ξ_k` for every vertex `v` of `graph` and leaf column `k`,
    /// derived from the memberships. Training or test samples only.
    pub fn vertex_groups(&self, graph: &Arborescence, train: bool) -> Vec<Vec<Vec<usize>>> {
        let cols = self.column_map();
        let mut out = vec![vec![Vec::new(); self.leaves.len()]; graph.vertex_count()];
        let range = if train {
            0..self.n_train
        } else {
            self.n_train..self.leaf_of.len()
        };
        for i in range {
            out[graph.vertex_of(i)][cols[self.leaf_of[i]]].push(i);
        }
        out
    }

    pub fn leaf_weight(&self, leaf: usize) -> f64 {
        match self.nodes[leaf].kind {
            NodeKind::Leaf { weight } => weight,
            _ => f64::NAN,
        }
    }

    pub fn set_leaf_weight(&mut self, leaf: usize, w: f64) -> Result<(), TreeError> {
        match self.nodes.get_mut(leaf).map(|n| &mut n.kind) {
            Some(NodeKind::Leaf { weight }) => {
                *weight = w;
                Ok(())
            }
            Some(_) => Err(TreeError::NotLeaf(leaf)),
            None => Err(TreeError::NoSuchNode(leaf)),
        }
    }

    /// Leaf weights in column order.
    pub fn leaf_weights(&self) -> Vec<f64> {
        self.leaves.iter().map(|&l| self.leaf_weight(l)).collect()
    }

    /// Per-sample fitted value of this tree.
    pub fn fitted(&self) -> Vec<f64> {
        self.leaf_of.iter().map(|&l| self.leaf_weight(l)).collect()
    }

    /// Rules of all live internal nodes.
    pub fn rules(&self) -> Vec<GraphSplitRule> {
        self.nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::Internal { rule, .. } => Some(rule),
                _ => None,
            })
            .collect()
    }

    /// Training counts `(left, right)` of cutting `leaf` with `rule`.
    pub fn split_counts(
        &self,
        leaf: usize,
        rule: GraphSplitRule,
        graphs: &[Arborescence],
    ) -> (usize, usize) {
        let g = &graphs[rule.graph];
        let mut counts = (0, 0);
        for i in 0..self.n_train {
            if self.leaf_of[i] == leaf {
                if g.routes_right(i, rule.edge) {
                    counts.1 += 1;
                } else {
                    counts.0 += 1;
                }
            }
        }
        counts
    }

    fn check_rule(&self, rule: GraphSplitRule, graphs: &[Arborescence]) -> Result<(), TreeError> {
        let g = graphs
            .get(rule.graph)
            .ok_or(TreeError::NoSuchGraph(rule.graph))?;
        if rule.edge >= g.vertex_count() || rule.edge == g.root() {
            return Err(TreeError::BadEdge {
                graph: rule.graph,
                edge: rule.edge,
            });
        }
        Ok(())
    }

    /// Splits `leaf` into `(left, right)` leaves; returns their ids.
    pub fn apply_split(
        &mut self,
        leaf: usize,
        rule: GraphSplitRule,
        graphs: &[Arborescence],
    ) -> Result<(usize, usize), TreeError> {
        let node = *self.nodes.get(leaf).ok_or(TreeError::NoSuchNode(leaf))?;
        if !node.is_leaf() {
            return Err(TreeError::NotLeaf(leaf));
        }
        self.check_rule(rule, graphs)?;
        let (nl, nr) = self.split_counts(leaf, rule, graphs);
        if nl == 0 || nr == 0 {
            return Err(TreeError::EmptyOffspring {
                node: leaf,
                graph: rule.graph,
                edge: rule.edge,
            });
        }
        let left = self.nodes.len();
        let right = left + 1;
        let child = TreeNode {
            kind: NodeKind::Leaf { weight: 0.0 },
            depth: node.depth + 1,
            parent: Some(leaf),
        };
        self.nodes.push(child);
        self.nodes.push(child);
        self.nodes[leaf].kind = NodeKind::Internal { rule, left, right };
        let g = &graphs[rule.graph];
        for (i, l) in self.leaf_of.iter_mut().enumerate() {
            if *l == leaf {
                *l = if g.routes_right(i, rule.edge) {
                    right
                } else {
                    left
                };
            }
        }
        let pos = self.leaves.binary_search(&leaf).expect("leaf is live");
        self.leaves.remove(pos);
        // New ids exceed every existing id.
        self.leaves.push(left);
        self.leaves.push(right);
        Ok((left, right))
    }

    /// Children of `node` if both are leaves.
    pub fn leaf_children(&self, node: usize) -> Option<(usize, usize)> {
        match self.nodes.get(node)?.kind {
            NodeKind::Internal { left, right, .. }
                if self.nodes[left].is_leaf() && self.nodes[right].is_leaf() =>
            {
                Some((left, right))
            }
            _ => None,
        }
    }

    /// Collapses a second-generation internal node back into a leaf.
    pub fn apply_merge(&mut self, node: usize) -> Result<(), TreeError> {
        if node >= self.nodes.len() {
            return Err(TreeError::NoSuchNode(node));
        }
        let (left, right) = self
            .leaf_children(node)
            .ok_or(TreeError::NotSecondGeneration(node))?;
        self.nodes[left].kind = NodeKind::Dead;
        self.nodes[right].kind = NodeKind::Dead;
        self.nodes[node].kind = NodeKind::Leaf { weight: 0.0 };
        for l in self.leaf_of.iter_mut() {
            if *l == left || *l == right {
                *l = node;
            }
        }
        self.leaves.retain(|&l| l != left && l != right);
        let pos = self.leaves.binary_search(&node).unwrap_err();
        self.leaves.insert(pos, node);
        Ok(())
    }

    /// Internal nodes whose children are both leaves.
    pub fn second_generation_internals(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.leaf_children(i).is_some())
            .collect()
    }

    /// Leaf memberships recomputed from scratch by routing every sample
    /// from the root.
    pub fn replay(&self, graphs: &[Arborescence]) -> Vec<usize> {
        (0..self.leaf_of.len())
            .map(|i| self.route(i, graphs))
            .collect()
    }

    fn route(&self, sample: usize, graphs: &[Arborescence]) -> usize {
        let mut cur = 0;
        loop {
            match self.nodes[cur].kind {
                NodeKind::Internal { rule, left, right } => {
                    cur = if graphs[rule.graph].routes_right(sample, rule.edge) {
                        right
                    } else {
                        left
                    };
                }
                _ => return cur,
            }
        }
    }

    /// Re-routes every sample through the rules against `graphs`, which may
    /// bind a different sample set (for example new prediction rows).
    pub fn rebind(&self, graphs: &[Arborescence], n_train: usize) -> Self {
        let n = graphs.first().map_or(0, |g| g.sample_count());
        let mut t = Self {
            nodes: self.nodes.clone(),
            leaves: self.leaves.clone(),
            leaf_of: vec![0; n],
            n_train: n_train.min(n),
        };
        t.leaf_of = t.replay(graphs);
        t
    }

    /// Copy with tombstones removed and ids renumbered in preorder.
    pub fn compact(&self) -> Self {
        let mut map = vec![usize::MAX; self.nodes.len()];
        let mut order = Vec::new();
        let mut stack = vec![0];
        while let Some(id) = stack.pop() {
            map[id] = order.len();
            order.push(id);
            if let NodeKind::Internal { left, right, .. } = self.nodes[id].kind {
                stack.push(right);
                stack.push(left);
            }
        }
        let nodes = order
            .iter()
            .map(|&id| {
                let n = self.nodes[id];
                TreeNode {
                    kind: match n.kind {
                        NodeKind::Internal { rule, left, right } => NodeKind::Internal {
                            rule,
                            left: map[left],
                            right: map[right],
                        },
                        k => k,
                    },
                    depth: n.depth,
                    parent: n.parent.map(|p| map[p]),
                }
            })
            .collect::<Vec<_>>();
        let mut leaves: Vec<usize> = self.leaves.iter().map(|&l| map[l]).collect();
        leaves.sort_unstable();
        Self {
            nodes,
            leaves,
            leaf_of: self.leaf_of.iter().map(|&l| map[l]).collect(),
            n_train: self.n_train,
        }
    }

    /// Structural key from nested training sets; trees that partition the
    /// training data identically at every node share a key.
    pub fn canonical_key(&self) -> String {
        let mut out = String::new();
        self.key_into(0, &mut out);
        out
    }

    fn key_into(&self, id: usize, out: &mut String) {
        match self.nodes[id].kind {
            NodeKind::Internal { left, right, .. } => {
                out.push('(');
                self.key_into(left, out);
                out.push('|');
                self.key_into(right, out);
                out.push(')');
            }
            _ => {
                let s = self.train_samples_of_subtree(id);
                let _ = write!(out, "{s:?}");
            }
        }
    }

    fn train_samples_of_subtree(&self, id: usize) -> Vec<usize> {
        (0..self.n_train)
            .filter(|&i| {
                let mut cur = Some(self.leaf_of[i]);
                while let Some(c) = cur {
                    if c == id {
                        return true;
                    }
                    cur = self.nodes[c].parent;
                }
                false
            })
            .collect()
    }

    /// Line-oriented text form of the compacted tree:
    /// `<id> leaf <depth> <weight>` or
    /// `<id> split <depth> <graph> <edge> <left> <right>`.
    pub fn to_text(&self) -> String {
        let t = self.compact();
        let mut out = String::new();
        for (id, n) in t.nodes.iter().enumerate() {
            match n.kind {
                NodeKind::Leaf { weight } => {
                    let _ = writeln!(out, "{id} leaf {} {weight:?}", n.depth);
                }
                NodeKind::Internal { rule, left, right } => {
                    let _ = writeln!(
                        out,
                        "{id} split {} {} {} {left} {right}",
                        n.depth, rule.graph, rule.edge
                    );
                }
                NodeKind::Dead => unreachable!("compacted trees hold no tombstones"),
            }
        }
        out
    }

    /// Parses [`DecisionTree::to_text`] output and routes the samples bound
    /// to `graphs`, the first `n_train` of which are training samples.
    pub fn from_text(
        text: &str,
        graphs: &[Arborescence],
        n_train: usize,
    ) -> Result<Self, TreeError> {
        let mut nodes: Vec<TreeNode> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| TreeError::Parse {
                line: lineno + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |k: usize| -> Result<usize, TreeError> {
                f.get(k)
                    .ok_or_else(|| err("missing field"))?
                    .parse()
                    .map_err(|_| err("bad integer"))
            };
            if num(0)? != nodes.len() {
                return Err(err("node ids must be consecutive from 0"));
            }
            let depth = num(2)?;
            let kind = match f.get(1).copied() {
                Some("leaf") => NodeKind::Leaf {
                    weight: f
                        .get(3)
                        .ok_or_else(|| err("missing weight"))?
                        .parse()
                        .map_err(|_| err("bad weight"))?,
                },
                Some("split") => NodeKind::Internal {
                    rule: GraphSplitRule {
                        graph: num(3)?,
                        edge: num(4)?,
                    },
                    left: num(5)?,
                    right: num(6)?,
                },
                _ => return Err(err("expected 'leaf' or 'split'")),
            };
            nodes.push(TreeNode {
                kind,
                depth,
                parent: None,
            });
        }
        if nodes.is_empty() {
            return Err(TreeError::Parse {
                line: 0,
                msg: "empty tree".into(),
            });
        }
        let count = nodes.len();
        for id in 0..count {
            if let NodeKind::Internal { rule, left, right } = nodes[id].kind {
                for c in [left, right] {
                    if c >= count || c <= id || nodes[c].parent.is_some() {
                        return Err(TreeError::Parse {
                            line: id + 1,
                            msg: format!("bad child id {c}"),
                        });
                    }
                    if nodes[c].depth != nodes[id].depth + 1 {
                        return Err(TreeError::Parse {
                            line: c + 1,
                            msg: "depth must be parent depth + 1".into(),
                        });
                    }
                    nodes[c].parent = Some(id);
                }
                let g = graphs
                    .get(rule.graph)
                    .ok_or(TreeError::NoSuchGraph(rule.graph))?;
                if rule.edge >= g.vertex_count() || rule.edge == g.root() {
                    return Err(TreeError::BadEdge {
                        graph: rule.graph,
                        edge: rule.edge,
                    });
                }
            }
        }
        if (1..count).any(|id| nodes[id].parent.is_none()) || nodes[0].depth != 0 {
            return Err(TreeError::Parse {
                line: 0,
                msg: "nodes do not form a single rooted tree".into(),
            });
        }
        let leaves = (0..count).filter(|&i| nodes[i].is_leaf()).collect();
        let n = graphs.first().map_or(0, |g| g.sample_count());
        let mut t = Self {
            nodes,
            leaves,
            leaf_of: vec![0; n],
            n_train: n_train.min(n),
        };
        t.leaf_of = t.replay(graphs);
        Ok(t)
    }
}

/// Edges that induce the same training bipartition of a leaf as the valid
/// edge `chosen`: `chosen` plus the chain of redundant ancestors above it.
/// `edge_types` is the leaf's column of the graph's edge-type table.
pub fn equivalent_edge_set(
    graph: &Arborescence,
    edge_types: &[EdgeType],
    chosen: usize,
) -> Result<Vec<usize>, TreeError> {
    if edge_types.get(chosen) != Some(&EdgeType::Valid) {
        return Err(TreeError::EdgeNotValid(chosen));
    }
    let mut set = vec![chosen];
    let mut cur = chosen;
    while let Some(p) = graph.parent(cur) {
        if edge_types[p] != EdgeType::Redundant {
            break;
        }
        set.push(p);
        cur = p;
    }
    Ok(set)
}

/// Draws one member of the equivalent edge set of `chosen` uniformly.
pub fn resolve_equivalent_edge<R: Rng + ?Sized>(
    graph: &Arborescence,
    edge_types: &[EdgeType],
    chosen: usize,
    rng: &mut R,
) -> Result<usize, TreeError> {
    let set = equivalent_edge_set(graph, edge_types, chosen)?;
    Ok(set[rng.random_range(0..set.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_chain_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain3() -> Vec<Arborescence> {
        vec![build_chain_graph("x", &[0.1, 0.5, 0.9], &[0.3, 0.7]).unwrap()]
    }

    fn rule(edge: usize) -> GraphSplitRule {
        GraphSplitRule { graph: 0, edge }
    }

    #[test]
    fn split_chain_twice() {
        let g = chain3();
        let mut t = DecisionTree::new(3, 0);
        let (l, r) = t.apply_split(0, rule(1), &g).unwrap();
        assert_eq!(t.train_samples_of(l), vec![0]);
        assert_eq!(t.train_samples_of(r), vec![1, 2]);
        let (l2, r2) = t.apply_split(r, rule(2), &g).unwrap();
        assert_eq!(t.train_samples_of(l2), vec![1]);
        assert_eq!(t.train_samples_of(r2), vec![2]);
        assert_eq!(t.leaves(), &[l, l2, r2]);
        assert_eq!(t.depth(r2), 2);
        assert_eq!(t.second_generation_internals(), vec![r]);
    }

    #[test]
    fn split_errors() {
        let g = vec![build_chain_graph("x", &[0.5, 0.5], &[0.3, 0.7]).unwrap()];
        let mut t = DecisionTree::new(2, 0);
        assert!(matches!(
            t.apply_split(0, rule(2), &g),
            Err(TreeError::EmptyOffspring { .. })
        ));
        assert!(matches!(
            t.apply_split(0, rule(0), &g),
            Err(TreeError::BadEdge { .. })
        ));
        let g3 = chain3();
        let mut t = DecisionTree::new(3, 0);
        t.apply_split(0, rule(1), &g3).unwrap();
        assert_eq!(t.apply_split(0, rule(2), &g3), Err(TreeError::NotLeaf(0)));
    }

    #[test]
    fn test_samples_follow_splits() {
        let g = vec![build_chain_graph("x", &[0.1, 0.9, 0.2, 0.8], &[0.5]).unwrap()];
        let mut t = DecisionTree::new(2, 2);
        let (l, r) = t.apply_split(0, rule(1), &g).unwrap();
        assert_eq!(t.memberships(), &[l, r, l, r]);
        assert_eq!(t.replay(&g), t.memberships());
        let groups = t.vertex_groups(&g[0], false);
        assert_eq!(groups[0][0], vec![2]);
        assert_eq!(groups[1][1], vec![3]);
    }

    #[test]
    fn merge_inverts_split() {
        let g = chain3();
        let t0 = DecisionTree::new(3, 0);
        let mut t = t0.clone();
        t.apply_split(0, rule(1), &g).unwrap();
        t.apply_merge(0).unwrap();
        assert_eq!(t.compact(), t0);
    }

    #[test]
    fn merge_requires_leaf_children() {
        let g = chain3();
        let mut t = DecisionTree::new(3, 0);
        let (_, r) = t.apply_split(0, rule(1), &g).unwrap();
        t.apply_split(r, rule(2), &g).unwrap();
        assert_eq!(t.apply_merge(0), Err(TreeError::NotSecondGeneration(0)));
        assert_eq!(t.apply_merge(99), Err(TreeError::NoSuchNode(99)));
        t.apply_merge(r).unwrap();
        t.apply_merge(0).unwrap();
        assert!(t.is_root_only());
    }

    #[test]
    fn second_generation_counts() {
        let g = chain3();
        let mut t = DecisionTree::new(3, 0);
        assert!(t.second_generation_internals().is_empty());
        t.apply_split(0, rule(1), &g).unwrap();
        assert_eq!(t.second_generation_internals(), vec![0]);
    }

    #[test]
    fn text_round_trip() {
        let g = chain3();
        let mut t = DecisionTree::new(3, 0);
        let (_, r) = t.apply_split(0, rule(1), &g).unwrap();
        t.set_leaf_weight(1, 0.1 + 0.2).unwrap();
        t.set_leaf_weight(r, -1.0 / 3.0).unwrap();
        let text = t.to_text();
        let back = DecisionTree::from_text(&text, &g, 3).unwrap();
        assert_eq!(back, t.compact());
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn text_rejects_garbage() {
        let g = chain3();
        assert!(DecisionTree::from_text("", &g, 3).is_err());
        assert!(DecisionTree::from_text("0 split 0 0 1 1 2\n1 leaf 1 0\n", &g, 3).is_err());
        assert!(DecisionTree::from_text("0 split 0 0 1 1 1\n1 leaf 1 0\n", &g, 3).is_err());
        assert!(DecisionTree::from_text("0 twig 0 0\n", &g, 3).is_err());
    }

    #[test]
    fn equivalent_set_walks_redundant_ancestors() {
        // Chain 0 <- 1 <- 2 <- 3 with types: 1 redundant, 2 redundant, 3 valid.
        let g = build_chain_graph("x", &[0.0; 1], &[1.0, 2.0, 3.0]).unwrap();
        let types = [
            EdgeType::Invalid,
            EdgeType::Redundant,
            EdgeType::Redundant,
            EdgeType::Valid,
        ];
        assert_eq!(equivalent_edge_set(&g, &types, 3).unwrap(), vec![3, 2, 1]);
        assert_eq!(
            equivalent_edge_set(&g, &types, 2),
            Err(TreeError::EdgeNotValid(2))
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = [false; 4];
        for _ in 0..100 {
            seen[resolve_equivalent_edge(&g, &types, 3, &mut rng).unwrap()] = true;
        }
        assert_eq!(seen, [false, true, true, true]);
    }
}

//! Candidate arborescences: rooted spanning trees over vertex bins of samples.
//!
//! Every candidate feature graph is an [`Arborescence`]. Each vertex holds a
//! bin of sample indices and each non-root vertex `v` owns the directed edge
//! `v -> parent(v)`, so edges are identified by their child vertex. Cutting
//! the edge of `v` separates `v` and its descendants (the right side) from
//! the rest of the graph (the left side).

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("cut points must be strictly increasing (position {0})")]
    NonIncreasingCuts(usize),
    #[error("non-finite feature value at sample {0}")]
    NonFiniteValue(usize),
    #[error("need at least 2 distinct values to place cut points, found {0}")]
    TooFewDistinct(usize),
    #[error("bin count must be at least 2, got {0}")]
    BinCount(usize),
    #[error("graph is disconnected")]
    Disconnected,
    #[error("graph has no vertices")]
    Empty,
    #[error("self-loop at vertex {0}")]
    SelfLoop(usize),
    #[error("vertex {0} out of range")]
    VertexOutOfRange(usize),
    #[error("expected exactly one root, found {0}")]
    RootCount(usize),
    #[error("parent pointers contain a cycle")]
    Cycle,
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error on {path}: {msg}")]
    Io { path: String, msg: String },
}

/// A graph vertex and the samples binned into it.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexBin {
    pub id: usize,
    pub samples: Vec<usize>,
}

/// A rooted tree whose edges all point toward the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Arborescence {
    feature_label: String,
    vertices: Vec<VertexBin>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    /// Children before parents.
    postorder: Vec<usize>,
    tin: Vec<usize>,
    tout: Vec<usize>,
    vertex_of: Vec<usize>,
}

impl Arborescence {
    /// Builds an arborescence from parent pointers and a sample -> vertex map.
    pub fn new(
        feature_label: impl Into<String>,
        parent: Vec<Option<usize>>,
        vertex_of: Vec<usize>,
    ) -> Result<Self, GraphError> {
        let nv = parent.len();
        if nv == 0 {
            return Err(GraphError::Empty);
        }
        let roots: Vec<usize> = (0..nv).filter(|&v| parent[v].is_none()).collect();
        if roots.len() != 1 {
            return Err(GraphError::RootCount(roots.len()));
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); nv];
        for (v, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= nv {
                    return Err(GraphError::VertexOutOfRange(p));
                }
                if p == v {
                    return Err(GraphError::SelfLoop(v));
                }
                children[p].push(v);
            }
        }

        // Iterative DFS from the root; anything unreached sits on a cycle.
        let mut tin = vec![usize::MAX; nv];
        let mut tout = vec![0; nv];
        let mut postorder = Vec::with_capacity(nv);
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        let mut clock = 0;
        tin[root] = clock;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if *next < children[v].len() {
                let c = children[v][*next];
                *next += 1;
                if tin[c] != usize::MAX {
                    return Err(GraphError::Cycle);
                }
                clock += 1;
                tin[c] = clock;
                stack.push((c, 0));
            } else {
                tout[v] = clock;
                postorder.push(v);
                stack.pop();
            }
        }
        if postorder.len() != nv {
            return Err(GraphError::Cycle);
        }

        let mut vertices: Vec<VertexBin> = (0..nv)
            .map(|id| VertexBin {
                id,
                samples: Vec::new(),
            })
            .collect();
        for (i, &v) in vertex_of.iter().enumerate() {
            if v >= nv {
                return Err(GraphError::VertexOutOfRange(v));
            }
            vertices[v].samples.push(i);
        }

        Ok(Self {
            feature_label: feature_label.into(),
            vertices,
            parent,
            children,
            root,
            postorder,
            tin,
            tout,
            vertex_of,
        })
    }

    /// Same structure, samples re-binned with a different assignment.
    pub fn rebind(&self, vertex_of: Vec<usize>) -> Result<Self, GraphError> {
        Self::new(self.feature_label.clone(), self.parent.clone(), vertex_of)
    }

    pub fn feature_label(&self) -> &str {
        &self.feature_label
    }

    pub fn vertex_count(&self) -> usize {
        self.parent.len()
    }

    pub fn edge_count(&self) -> usize {
        self.parent.len() - 1
    }

    pub fn sample_count(&self) -> usize {
        self.vertex_of.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn vertices(&self) -> &[VertexBin] {
        &self.vertices
    }

    pub fn bin(&self, v: usize) -> &[usize] {
        &self.vertices[v].samples
    }

    pub fn vertex_of(&self, sample: usize) -> usize {
        self.vertex_of[sample]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.vertex_of
    }

    /// Vertices ordered children-first.
    pub fn postorder(&self) -> &[usize] {
        &self.postorder
    }

    /// True when `u` is `v` or one of its descendants.
    #[inline]
    pub fn in_subtree(&self, u: usize, v: usize) -> bool {
        self.tin[v] <= self.tin[u] && self.tout[u] <= self.tout[v]
    }

    /// Whether cutting the edge of `edge` puts `sample` on the right side.
    #[inline]
    pub fn routes_right(&self, sample: usize, edge: usize) -> bool {
        self.in_subtree(self.vertex_of[sample], edge)
    }

    fn check(&self, v: usize) -> Result<(), GraphError> {
        if v < self.vertex_count() {
            Ok(())
        } else {
            Err(GraphError::VertexOutOfRange(v))
        }
    }

    /// All vertices whose parent chain reaches `v`, excluding `v`.
    pub fn descendants(&self, v: usize) -> Result<BTreeSet<usize>, GraphError> {
        self.check(v)?;
        let mut out = BTreeSet::new();
        let mut stack: Vec<usize> = self.children[v].clone();
        while let Some(u) = stack.pop() {
            out.insert(u);
            stack.extend_from_slice(&self.children[u]);
        }
        Ok(out)
    }

    pub fn ancestors(&self, v: usize) -> Result<BTreeSet<usize>, GraphError> {
        self.check(v)?;
        let mut out = BTreeSet::new();
        let mut cur = self.parent[v];
        while let Some(p) = cur {
            out.insert(p);
            cur = self.parent[p];
        }
        Ok(out)
    }

    pub fn bottom_vertices(&self) -> BTreeSet<usize> {
        (0..self.vertex_count())
            .filter(|&v| self.children[v].is_empty())
            .collect()
    }

    /// Sample sets `(S_L, S_R)` obtained by cutting the edge of `edge`.
    pub fn bipartition(&self, edge: usize) -> Result<(Vec<usize>, Vec<usize>), GraphError> {
        self.check(edge)?;
        let (right, left): (Vec<usize>, Vec<usize>) =
            (0..self.sample_count()).partition(|&i| self.routes_right(i, edge));
        Ok((left, right))
    }
}

/// An undirected structural graph over vertex bins (spatial cells, network
/// communities) from which random arborescences are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralGraph {
    vertex_count: usize,
    edges: Vec<(usize, usize)>,
    bin_assignment: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
}

impl StructuralGraph {
    pub fn new(
        vertex_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        bin_assignment: Vec<usize>,
    ) -> Result<Self, GraphError> {
        if vertex_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= vertex_count {
                return Err(GraphError::VertexOutOfRange(u));
            }
            if v >= vertex_count {
                return Err(GraphError::VertexOutOfRange(v));
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            set.insert((u.min(v), u.max(v)));
        }
        if let Some(&bad) = bin_assignment.iter().find(|&&v| v >= vertex_count) {
            return Err(GraphError::VertexOutOfRange(bad));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); vertex_count];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }

        let mut seen = vec![false; vertex_count];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &w in &adjacency[u] {
                if !seen[w] {
                    seen[w] = true;
                    reached += 1;
                    queue.push_back(w);
                }
            }
        }
        if reached != vertex_count {
            return Err(GraphError::Disconnected);
        }

        Ok(Self {
            vertex_count,
            edges,
            bin_assignment,
            adjacency,
        })
    }

    /// Reads a whitespace-separated `u v` edge list and a `row vertex`
    /// bin-assignment file (0-based ids, `#` comments allowed).
    pub fn from_files(edges_path: &Path, bins_path: &Path) -> Result<Self, GraphError> {
        let edges = read_pairs(edges_path)?;
        let mut bins = read_pairs(bins_path)?;
        bins.sort_unstable();
        let mut assignment = Vec::with_capacity(bins.len());
        for (k, &(row, v)) in bins.iter().enumerate() {
            if row != k {
                return Err(GraphError::Parse {
                    path: bins_path.display().to_string(),
                    line: 0,
                    msg: format!("rows must cover 0..n exactly once; missing or repeated row {k}"),
                });
            }
            assignment.push(v);
        }
        let vertex_count = edges
            .iter()
            .flat_map(|&(u, v)| [u, v])
            .chain(assignment.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        Self::new(vertex_count, edges, assignment)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn bin_assignment(&self) -> &[usize] {
        &self.bin_assignment
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>, GraphError> {
    let text = fs::read_to_string(path).map_err(|e| GraphError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| GraphError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let mut it = line.split_whitespace();
        let mut next = || -> Result<usize, GraphError> {
            let tok = it
                .next()
                .ok_or_else(|| parse_err("expected two integers".into()))?;
            tok.parse()
                .map_err(|_| parse_err(format!("not a vertex id: {tok:?}")))
        };
        let a = next()?;
        let b = next()?;
        out.push((a, b));
    }
    Ok(out)
}

/// Chain graph over ordered bins of a numeric feature.
///
/// Vertex `k` holds samples with `c_{k-1} < x <= c_k` (ties at a cut point
/// fall left), and vertex `k` points to `k - 1`, so the lowest-value bin is
/// the root. Cutting the edge of vertex `k` is the threshold rule `x > c_{k-1}`.
pub fn build_chain_graph(
    label: impl Into<String>,
    values: &[f64],
    cut_points: &[f64],
) -> Result<Arborescence, GraphError> {
    for (k, w) in cut_points.windows(2).enumerate() {
        if !(w[0] < w[1]) {
            return Err(GraphError::NonIncreasingCuts(k + 1));
        }
    }
    if let Some(k) = cut_points.iter().position(|c| !c.is_finite()) {
        return Err(GraphError::NonIncreasingCuts(k));
    }
    let vertex_of = values
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if x.is_finite() {
                Ok(chain_bin(cut_points, x))
            } else {
                Err(GraphError::NonFiniteValue(i))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let parent = (0..=cut_points.len()).map(|k| k.checked_sub(1)).collect();
    Arborescence::new(label, parent, vertex_of)
}

/// Index of the chain bin `(c_{k-1}, c_k]` containing `x`.
pub fn chain_bin(cut_points: &[f64], x: f64) -> usize {
    cut_points.partition_point(|&c| c < x)
}

/// Quantile cut points over the distinct values of a feature.
///
/// Uses linear interpolation between order statistics of the sorted distinct
/// values (`h = (m - 1) p`), at `p = k / bin_count` for `k = 1..bin_count`.
pub fn default_cut_points(values: &[f64], bin_count: usize) -> Result<Vec<f64>, GraphError> {
    if bin_count < 2 {
        return Err(GraphError::BinCount(bin_count));
    }
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(GraphError::NonFiniteValue(i));
    }
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let m = distinct.len();
    if m < 2 {
        return Err(GraphError::TooFewDistinct(m));
    }
    let mut cuts: Vec<f64> = Vec::with_capacity(bin_count - 1);
    for k in 1..bin_count {
        let h = (m - 1) as f64 * k as f64 / bin_count as f64;
        let lo = h.floor() as usize;
        let frac = h - lo as f64;
        let c = if lo + 1 < m {
            distinct[lo] + frac * (distinct[lo + 1] - distinct[lo])
        } else {
            distinct[m - 1]
        };
        if cuts.last().is_none_or(|&last| c > last) {
            cuts.push(c);
        }
    }
    Ok(cuts)
}

/// Uniform random spanning tree of `g` (Wilson's loop-erased random walk),
/// oriented toward a uniformly chosen root.
pub fn sample_arborescence<R: Rng + ?Sized>(
    label: impl Into<String>,
    g: &StructuralGraph,
    rng: &mut R,
) -> Result<Arborescence, GraphError> {
    let nv = g.vertex_count();
    let root = rng.random_range(0..nv);
    let mut in_tree = vec![false; nv];
    let mut next: Vec<Option<usize>> = vec![None; nv];
    in_tree[root] = true;
    for start in 0..nv {
        let mut u = start;
        while !in_tree[u] {
            let nbrs = g.neighbors(u);
            if nbrs.is_empty() {
                return Err(GraphError::Disconnected);
            }
            let w = nbrs[rng.random_range(0..nbrs.len())];
            next[u] = Some(w);
            u = w;
        }
        // Retrace the loop-erased path (later visits overwrote `next`).
        let mut u = start;
        while !in_tree[u] {
            in_tree[u] = true;
            u = next[u].expect("walk recorded a successor");
        }
    }
    next[root] = None;
    Arborescence::new(label, next, g.bin_assignment().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain3() -> Arborescence {
        build_chain_graph("x", &[0.1, 0.5, 0.9], &[0.3, 0.7]).unwrap()
    }

    #[test]
    fn chain_bins_and_orientation() {
        let g = chain3();
        assert_eq!(g.vertex_count(), 3);
        assert_eq!(g.bin(0), &[0]);
        assert_eq!(g.bin(1), &[1]);
        assert_eq!(g.bin(2), &[2]);
        assert_eq!(g.root(), 0);
        assert_eq!(g.parent(2), Some(1));
        assert_eq!(g.parent(1), Some(0));
    }

    #[test]
    fn chain_ties_share_a_bin() {
        let g = build_chain_graph("x", &[0.5, 0.5], &[0.3]).unwrap();
        assert_eq!(g.vertex_count(), 2);
        assert_eq!(g.bin(0), &[] as &[usize]);
        assert_eq!(g.bin(1), &[0, 1]);
        // a value equal to a cut point lands left
        let g = build_chain_graph("x", &[0.3], &[0.3]).unwrap();
        assert_eq!(g.vertex_of(0), 0);
    }

    #[test]
    fn chain_cut_is_threshold_rule() {
        let g = chain3();
        let (left, right) = g.bipartition(1).unwrap();
        assert_eq!(left, vec![0]);
        assert_eq!(right, vec![1, 2]);
    }

    #[test]
    fn chain_rejects_bad_input() {
        assert_eq!(
            build_chain_graph("x", &[0.1], &[0.5, 0.5]).unwrap_err(),
            GraphError::NonIncreasingCuts(1)
        );
        assert_eq!(
            build_chain_graph("x", &[f64::NAN], &[0.5]).unwrap_err(),
            GraphError::NonFiniteValue(0)
        );
    }

    #[test]
    fn quantile_cuts() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let cuts = default_cut_points(&values, 4).unwrap();
        assert_eq!(cuts, vec![25.75, 50.5, 75.25]);

        let cuts = default_cut_points(&[0.0, 1.0], 2).unwrap();
        assert_eq!(cuts.len(), 1);
        assert!(cuts[0] > 0.0 && cuts[0] < 1.0);

        assert_eq!(
            default_cut_points(&[2.0; 5], 4).unwrap_err(),
            GraphError::TooFewDistinct(1)
        );
        assert_eq!(
            default_cut_points(&[0.0, 1.0], 1).unwrap_err(),
            GraphError::BinCount(1)
        );
    }

    #[test]
    fn quantile_cuts_dedupe_when_bins_exceed_values() {
        let cuts = default_cut_points(&[0.0, 1.0, 2.0], 10).unwrap();
        assert!(cuts.windows(2).all(|w| w[0] < w[1]));
        assert!(cuts.len() <= 9);
    }

    #[test]
    fn descendants_and_bottoms() {
        let g = chain3();
        assert_eq!(g.descendants(0).unwrap(), BTreeSet::from([1, 2]));
        assert!(g.descendants(2).unwrap().is_empty());
        assert_eq!(g.bottom_vertices(), BTreeSet::from([2]));
        assert_eq!(
            g.descendants(7).unwrap_err(),
            GraphError::VertexOutOfRange(7)
        );

        // star rooted at 0 with leaves 1, 2
        let star = Arborescence::new("s", vec![None, Some(0), Some(0)], vec![]).unwrap();
        assert_eq!(star.descendants(0).unwrap(), BTreeSet::from([1, 2]));
        assert_eq!(star.bottom_vertices(), BTreeSet::from([1, 2]));

        let single = Arborescence::new("s", vec![None], vec![0, 0]).unwrap();
        assert_eq!(single.bottom_vertices(), BTreeSet::from([0]));
    }

    #[test]
    fn malformed_parent_maps() {
        assert_eq!(
            Arborescence::new("c", vec![Some(1), Some(0)], vec![]).unwrap_err(),
            GraphError::RootCount(0)
        );
        assert_eq!(
            Arborescence::new("c", vec![None, Some(2), Some(1)], vec![]).unwrap_err(),
            GraphError::Cycle
        );
        assert_eq!(
            Arborescence::new("c", vec![None, None], vec![]).unwrap_err(),
            GraphError::RootCount(2)
        );
    }

    #[test]
    fn structural_graph_validation() {
        assert_eq!(
            StructuralGraph::new(3, [(0, 1)], vec![]).unwrap_err(),
            GraphError::Disconnected
        );
        assert_eq!(
            StructuralGraph::new(2, [(1, 1)], vec![]).unwrap_err(),
            GraphError::SelfLoop(1)
        );
        let g = StructuralGraph::new(3, [(0, 1), (1, 0), (1, 2)], vec![0, 2]).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn tree_input_returns_same_tree() {
        let g = StructuralGraph::new(4, [(0, 1), (1, 2), (1, 3)], vec![0, 1, 2, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = sample_arborescence("g", &g, &mut rng).unwrap();
            let mut undirected: Vec<(usize, usize)> = (0..4)
                .filter_map(|v| a.parent(v).map(|p| (v.min(p), v.max(p))))
                .collect();
            undirected.sort();
            assert_eq!(undirected, vec![(0, 1), (1, 2), (1, 3)]);
        }
    }

    #[test]
    fn path_rooted_in_middle() {
        // Force the root by trying seeds until the root is 1.
        let g = StructuralGraph::new(3, [(0, 1), (1, 2)], vec![]).unwrap();
        let a = (0..100)
            .map(|s| sample_arborescence("p", &g, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
            .find(|a| a.root() == 1)
            .unwrap();
        assert_eq!(a.parent(0), Some(1));
        assert_eq!(a.parent(2), Some(1));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = dir.path().join("g.txt");
        let b = dir.path().join("b.txt");
        fs::write(&e, "0 1\n1 2 # comment\n\n").unwrap();
        fs::write(&b, "1 2\n0 0\n2 1\n").unwrap();
        let g = StructuralGraph::from_files(&e, &b).unwrap();
        assert_eq!(g.vertex_count(), 3);
        assert_eq!(g.bin_assignment(), &[0, 2, 1]);
    }
}

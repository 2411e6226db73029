//! One bottom-up pass per candidate graph yielding, for every (edge, leaf)
//! cell, the split log-ratio and whether the cut is valid, invalid or a
//! redundant copy of a cut further down.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::Arborescence;
use crate::likelihood::{LeafStats, PriorConfig, SplitBase};
use crate::tree::DecisionTree;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("graph {graph}: vertex statistics have {got} cells, expected {expected}")]
    Shape {
        graph: usize,
        got: usize,
        expected: usize,
    },
    #[error("graph {graph}: {msg}")]
    Graph { graph: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeType {
    /// Both sides hold training samples and no lower edge gives the same cut.
    Valid,
    /// One side holds no training samples (also used for the root row).
    Invalid,
    /// Same training cut as the single nonempty child edge below it.
    Redundant,
}

impl EdgeType {
    pub fn code(self) -> i8 {
        match self {
            Self::Valid => 1,
            Self::Invalid => -1,
            Self::Redundant => 0,
        }
    }
}

/// Per-vertex, per-leaf J/H/count statistics, row-major `v * leaves + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexStats {
    pub vertices: usize,
    pub leaves: usize,
    pub cells: Vec<LeafStats>,
}

impl VertexStats {
    pub fn get(&self, v: usize, k: usize) -> LeafStats {
        self.cells[v * self.leaves + k]
    }

    /// Leaf-level totals (sum over vertices).
    pub fn totals(&self) -> Vec<LeafStats> {
        let mut out = vec![LeafStats::default(); self.leaves];
        for row in self.cells.chunks(self.leaves.max(1)) {
            for (o, c) in out.iter_mut().zip(row) {
                *o = *o + *c;
            }
        }
        out
    }
}

/// Per-sample J and H contributions, `ldot - phi_t * lddot` and `-lddot`.
#[derive(Debug, Clone, Default)]
pub struct SampleTerms {
    pub j: Vec<f64>,
    pub h: Vec<f64>,
}

impl SampleTerms {
    pub fn from_table(g: &crate::likelihood::GradientTable) -> Self {
        Self {
            j: (0..g.len()).map(|i| g.j_term(i)).collect(),
            h: g.lddot.iter().map(|d| -d).collect(),
        }
    }

    pub fn stats(&self, indices: &[usize]) -> LeafStats {
        indices
            .iter()
            .fold(LeafStats::default(), |acc, &i| LeafStats {
                j: acc.j + self.j[i],
                h: acc.h + self.h[i],
                count: acc.count + 1,
            })
    }
}

/// Split log-ratios and edge types for one graph, row-major `v * leaves + k`.
/// Ratios are `-inf` wherever the edge type is not valid.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTable {
    pub vertices: usize,
    pub leaves: usize,
    pub ratio: Vec<f64>,
    pub edge_type: Vec<EdgeType>,
    /// Number of valid edges per leaf.
    pub valid_count: Vec<usize>,
}

impl SplitTable {
    pub fn ratio(&self, v: usize, k: usize) -> f64 {
        self.ratio[v * self.leaves + k]
    }

    pub fn edge_type(&self, v: usize, k: usize) -> EdgeType {
        self.edge_type[v * self.leaves + k]
    }

    /// Edge types of leaf column `k`, indexed by vertex.
    pub fn column_types(&self, k: usize) -> Vec<EdgeType> {
        (0..self.vertices).map(|v| self.edge_type(v, k)).collect()
    }

    /// Valid edges of leaf column `k` in vertex order.
    pub fn valid_edges(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.vertices).filter(move |&v| self.edge_type(v, k) == EdgeType::Valid)
    }

    /// Tab-separated dump: `vertex leaf type ratio`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("vertex\tleaf\ttype\tratio\n");
        for v in 0..self.vertices {
            for k in 0..self.leaves {
                let r = self.ratio(v, k);
                let r = if r.is_finite() {
                    format!("{r}")
                } else {
                    "-inf".into()
                };
                s.push_str(&format!("{v}\t{k}\t{}\t{r}\n", self.edge_type(v, k).code()));
            }
        }
        s
    }
}

/// Per-vertex, per-leaf statistics of the training samples.
pub fn compute_vertex_stats(
    graph: &Arborescence,
    tree: &DecisionTree,
    terms: &SampleTerms,
) -> VertexStats {
    let l = tree.leaf_count();
    let cols = tree.column_map();
    let mut cells = vec![LeafStats::default(); graph.vertex_count() * l];
    for i in 0..tree.n_train() {
        let c = &mut cells[graph.vertex_of(i) * l + cols[tree.leaf_of(i)]];
        c.j += terms.j[i];
        c.h += terms.h[i];
        c.count += 1;
    }
    VertexStats {
        vertices: graph.vertex_count(),
        leaves: l,
        cells,
    }
}

/// Bottom-up scan accumulating right-side statistics for every edge.
///
/// The right side of edge `v` is `v` plus its descendants, so its stats are
/// the vertex's own stats plus those of its children's right sides; the
/// left side follows by subtraction from the leaf totals. Children-first
/// order comes from the graph's precomputed postorder, so no recursion.
pub fn recursive_split_scan(
    graph: &Arborescence,
    stats: &VertexStats,
    totals: &[LeafStats],
    prior: &PriorConfig,
) -> SplitTable {
    let nv = graph.vertex_count();
    let l = stats.leaves;
    let mut right = stats.cells.clone();
    // Number of children whose right side holds training samples.
    let mut nonempty_children = vec![0u32; nv * l];
    let mut ratio = vec![f64::NEG_INFINITY; nv * l];
    let mut edge_type = vec![EdgeType::Invalid; nv * l];
    let mut valid_count = vec![0usize; l];
    let bases: Vec<SplitBase> = totals.iter().map(|&t| SplitBase::new(t, prior)).collect();

    for &v in graph.postorder() {
        let row = v * l;
        let Some(p) = graph.parent(v) else {
            continue;
        };
        let prow = p * l;
        for k in 0..l {
            let r = right[row + k];
            let total = totals[k];
            if r.count > 0 {
                nonempty_children[prow + k] += 1;
            }
            right[prow + k] = right[prow + k] + r;
            if r.count == 0 || r.count == total.count {
                continue;
            }
            if nonempty_children[row + k] == 1 && stats.cells[row + k].count == 0 {
                edge_type[row + k] = EdgeType::Redundant;
            } else {
                edge_type[row + k] = EdgeType::Valid;
                valid_count[k] += 1;
                ratio[row + k] = bases[k].ratio(total - r, r);
            }
        }
    }
    SplitTable {
        vertices: nv,
        leaves: l,
        ratio,
        edge_type,
        valid_count,
    }
}

/// Vertex stats plus scan for one graph.
pub fn scan_graph(
    graph: &Arborescence,
    tree: &DecisionTree,
    terms: &SampleTerms,
    prior: &PriorConfig,
) -> SplitTable {
    let stats = compute_vertex_stats(graph, tree, terms);
    let totals = stats.totals();
    recursive_split_scan(graph, &stats, &totals, prior)
}

/// Scans every candidate graph. With `parallel` the graphs fan out over the
/// rayon pool; results are identical to the sequential scan.
pub fn scan_all_graphs(
    graphs: &[Arborescence],
    tree: &DecisionTree,
    terms: &SampleTerms,
    prior: &PriorConfig,
    parallel: bool,
) -> Vec<SplitTable> {
    if parallel && graphs.len() > 1 {
        graphs
            .par_iter()
            .map(|g| scan_graph(g, tree, terms, prior))
            .collect()
    } else {
        graphs
            .iter()
            .map(|g| scan_graph(g, tree, terms, prior))
            .collect()
    }
}

/// Split ratios and edge types of one leaf in one graph, indexed by vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafColumn {
    pub ratio: Vec<f64>,
    pub edge_type: Vec<EdgeType>,
    pub valid_count: usize,
}

/// Scans a single leaf, given its training samples. Matches the
/// corresponding column of [`scan_graph`].
pub fn scan_leaf_column(
    graph: &Arborescence,
    samples: &[usize],
    terms: &SampleTerms,
    prior: &PriorConfig,
) -> LeafColumn {
    let nv = graph.vertex_count();
    let mut right = vec![LeafStats::default(); nv];
    for &i in samples {
        let c = &mut right[graph.vertex_of(i)];
        c.j += terms.j[i];
        c.h += terms.h[i];
        c.count += 1;
    }
    // Own counts are needed for the redundancy test once `right` has
    // absorbed the children.
    let own: Vec<usize> = right.iter().map(|c| c.count).collect();
    let total = right.iter().fold(LeafStats::default(), |a, &c| a + c);
    let base = SplitBase::new(total, prior);
    let mut nonempty_children = vec![0u32; nv];
    let mut ratio = vec![f64::NEG_INFINITY; nv];
    let mut edge_type = vec![EdgeType::Invalid; nv];
    let mut valid_count = 0;
    for &v in graph.postorder() {
        let Some(p) = graph.parent(v) else {
            continue;
        };
        let r = right[v];
        if r.count > 0 {
            nonempty_children[p] += 1;
        }
        right[p] = right[p] + r;
        if r.count == 0 || r.count == total.count {
            continue;
        }
        if nonempty_children[v] == 1 && own[v] == 0 {
            edge_type[v] = EdgeType::Redundant;
        } else {
            edge_type[v] = EdgeType::Valid;
            valid_count += 1;
            ratio[v] = base.ratio(total - r, r);
        }
    }
    LeafColumn {
        ratio,
        edge_type,
        valid_count,
    }
}

impl SplitTable {
    /// Assembles a table from per-leaf columns in leaf order.
    pub fn from_columns(vertices: usize, columns: &[&LeafColumn]) -> Self {
        let l = columns.len();
        let mut ratio = vec![f64::NEG_INFINITY; vertices * l];
        let mut edge_type = vec![EdgeType::Invalid; vertices * l];
        for (k, c) in columns.iter().enumerate() {
            for v in 0..vertices {
                ratio[v * l + k] = c.ratio[v];
                edge_type[v * l + k] = c.edge_type[v];
            }
        }
        Self {
            vertices,
            leaves: l,
            ratio,
            edge_type,
            valid_count: columns.iter().map(|c| c.valid_count).collect(),
        }
    }
}

/// Number of valid edges of `graph` for a single training-sample set.
pub fn valid_edge_count(graph: &Arborescence, indices: &[usize]) -> usize {
    let nv = graph.vertex_count();
    let mut own = vec![0usize; nv];
    for &i in indices {
        own[graph.vertex_of(i)] += 1;
    }
    let total = indices.len();
    let mut right = own.clone();
    let mut nonempty_children = vec![0u32; nv];
    let mut valid = 0;
    for &v in graph.postorder() {
        let Some(p) = graph.parent(v) else {
            continue;
        };
        let r = right[v];
        if r > 0 {
            nonempty_children[p] += 1;
        }
        right[p] += r;
        if r > 0 && r < total && !(nonempty_children[v] == 1 && own[v] == 0) {
            valid += 1;
        }
    }
    valid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_chain_graph;
    use crate::likelihood::{split_log_ratio, GradientTable, ResponseModel};
    use crate::tree::GraphSplitRule;

    fn terms(y: &[f64]) -> SampleTerms {
        let z = vec![0.0; y.len()];
        let g = GradientTable::build(&ResponseModel::Normal { sigma: 1.0 }, y, &z, &z).unwrap();
        SampleTerms::from_table(&g)
    }

    #[test]
    fn vertex_stats_on_chain() {
        let g = build_chain_graph("x", &[0.1, 0.5, 0.9], &[0.3, 0.7]).unwrap();
        let t = DecisionTree::new(3, 0);
        let s = compute_vertex_stats(&g, &t, &terms(&[1.0, 0.0, -1.0]));
        let js: Vec<f64> = (0..3).map(|v| s.get(v, 0).j).collect();
        assert_eq!(js, vec![1.0, 0.0, -1.0]);
        assert!((0..3).all(|v| s.get(v, 0).h == 1.0));
        let tot = s.totals()[0];
        assert_eq!((tot.j, tot.h, tot.count), (0.0, 3.0, 3));
    }

    #[test]
    fn chain_scan_matches_direct_ratio() {
        let y = [1.0, 0.0, -1.0];
        let g = build_chain_graph("x", &[0.1, 0.5, 0.9], &[0.3, 0.7]).unwrap();
        let t = DecisionTree::new(3, 0);
        let st = terms(&y);
        let prior = PriorConfig::default();
        let table = scan_graph(&g, &t, &st, &prior);
        assert_eq!(table.edge_type(0, 0), EdgeType::Invalid);
        assert_eq!(table.ratio(0, 0), f64::NEG_INFINITY);
        for e in 1..3 {
            assert_eq!(table.edge_type(e, 0), EdgeType::Valid);
            let (l, r) = g.bipartition(e).unwrap();
            let want =
                split_log_ratio(st.stats(&[0, 1, 2]), st.stats(&l), st.stats(&r), &prior).unwrap();
            assert!((table.ratio(e, 0) - want).abs() < 1e-12);
        }
        assert_eq!(table.valid_count, vec![2]);
        assert_eq!(valid_edge_count(&g, &[0, 1, 2]), 2);
    }

    #[test]
    fn empty_vertex_with_one_child_is_redundant() {
        // Bins: {0}, {}, {1}; vertex 1 is empty and has one nonempty child.
        let g = build_chain_graph("x", &[0.0, 2.5], &[1.0, 2.0]).unwrap();
        let t = DecisionTree::new(2, 0);
        let table = scan_graph(&g, &t, &terms(&[0.3, -0.2]), &PriorConfig::default());
        assert_eq!(table.edge_type(1, 0), EdgeType::Redundant);
        assert_eq!(table.edge_type(2, 0), EdgeType::Valid);
        assert_eq!(valid_edge_count(&g, &[0, 1]), 1);
    }

    #[test]
    fn edge_isolating_no_leaf_samples_is_invalid() {
        let g = build_chain_graph("x", &[0.1, 0.5, 0.9], &[0.3, 0.7]).unwrap();
        let mut t = DecisionTree::new(3, 0);
        let (l, _) = t
            .apply_split(
                0,
                GraphSplitRule { graph: 0, edge: 1 },
                std::slice::from_ref(&g),
            )
            .unwrap();
        let table = scan_graph(&g, &t, &terms(&[1.0, 2.0, 3.0]), &PriorConfig::default());
        let k = t.column_of(l).unwrap();
        assert_eq!(table.edge_type(2, k), EdgeType::Invalid);
        assert_eq!(table.ratio(2, k), f64::NEG_INFINITY);
        assert_eq!(table.valid_count[k], 0);
    }

    #[test]
    fn parallel_matches_sequential() {
        let x: Vec<f64> = (0..40).map(|i| ((i * 37) % 40) as f64).collect();
        let graphs: Vec<_> = (2..6)
            .map(|b| {
                let cuts = crate::graph::default_cut_points(&x, b * 3).unwrap();
                build_chain_graph("x", &x, &cuts).unwrap()
            })
            .collect();
        let y: Vec<f64> = x.iter().map(|v| (v / 7.0).sin()).collect();
        let mut t = DecisionTree::new(40, 0);
        t.apply_split(0, GraphSplitRule { graph: 1, edge: 2 }, &graphs)
            .unwrap();
        let st = terms(&y);
        let prior = PriorConfig::default();
        let a = scan_all_graphs(&graphs, &t, &st, &prior, false);
        let b = scan_all_graphs(&graphs, &t, &st, &prior, true);
        assert_eq!(a, b);
    }

    #[test]
    fn tsv_dump_has_one_row_per_cell() {
        let g = build_chain_graph("x", &[0.1, 0.5, 0.9], &[0.3, 0.7]).unwrap();
        let t = DecisionTree::new(3, 0);
        let tsv = scan_graph(&g, &t, &terms(&[1.0, 0.0, -1.0]), &PriorConfig::default()).to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.lines().nth(1).unwrap().ends_with("-1\t-inf"));
    }

    #[test]
    fn leaf_columns_rebuild_the_full_table() {
        let x: Vec<f64> = (0..12).map(f64::from).collect();
        let g = build_chain_graph("x", &x, &[0.5, 2.5, 3.0, 6.5, 9.5]).unwrap();
        let graphs = vec![g];
        let mut t = DecisionTree::new(12, 0);
        t.apply_split(
            0,
            crate::tree::GraphSplitRule { graph: 0, edge: 3 },
            &graphs,
        )
        .unwrap();
        let st = terms(&x.iter().map(|v| (v * 0.7).sin()).collect::<Vec<_>>());
        let prior = PriorConfig::default();
        let full = scan_graph(&graphs[0], &t, &st, &prior);
        let cols: Vec<LeafColumn> = t
            .train_groups()
            .iter()
            .map(|s| scan_leaf_column(&graphs[0], s, &st, &prior))
            .collect();
        let refs: Vec<&LeafColumn> = cols.iter().collect();
        assert_eq!(
            SplitTable::from_columns(graphs[0].vertex_count(), &refs),
            full
        );
    }
}

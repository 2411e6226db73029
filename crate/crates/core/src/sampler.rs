//! Rejection-free informed importance tempering over tree structures, and
//! the backfitting Gibbs loop around it.
//!
//! Every step scores the full split/merge neighborhood of the current tree
//! with `eta = q_f * h(ratio * q_b / q_f)`, `h = sqrt`, moves to a neighbor
//! with probability `eta / Z`, and records the new state with importance
//! weight `1 / Z`. After `K` steps one visited state is resampled, with an
//! extra `L / L_hat` factor for non-Gaussian responses so the draw targets
//! the exact conditional posterior rather than its quadratic surrogate.

use std::collections::HashMap;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{scan_leaf_column, valid_edge_count, LeafColumn, SampleTerms, SplitTable};
use crate::graph::Arborescence;
use crate::likelihood::{
    calibrate_lambda, merge_log_ratio, sample_leaf_weight, sample_sigma_mu, sample_sigma_normal,
    GradientTable, LeafStats, ModelError, ModelKind, PriorConfig, ResponseModel,
};
use crate::tree::{resolve_equivalent_edge, DecisionTree, GraphSplitRule, TreeError};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("no split or merge move is available from this tree")]
    EmptyNeighborhood,
    #[error("number of informed steps must be at least 1")]
    ZeroSteps,
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MoveKind {
    Split { leaf: usize, rule: GraphSplitRule },
    Merge { node: usize },
}

/// One neighbor of the current tree with its log-scale components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Move {
    pub kind: MoveKind,
    pub log_lik_ratio: f64,
    pub log_prior_ratio: f64,
    pub log_q_forward: f64,
    pub log_q_backward: f64,
    pub log_eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    pub moves: Vec<Move>,
    pub log_z: f64,
    /// `eta` of every move relative to the largest one.
    weights: Vec<f64>,
}

impl Neighborhood {
    pub fn new(moves: Vec<Move>) -> Self {
        let max = moves
            .iter()
            .map(|m| m.log_eta)
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = moves.iter().map(|m| (m.log_eta - max).exp()).collect();
        let log_z = if max == f64::NEG_INFINITY {
            max
        } else {
            max + weights.iter().sum::<f64>().ln()
        };
        Self {
            moves,
            log_z,
            weights,
        }
    }
}

/// Everything a single-tree update reads but never writes.
#[derive(Debug, Clone, Copy)]
pub struct TreeContext<'a> {
    pub graphs: &'a [Arborescence],
    pub terms: &'a SampleTerms,
    pub prior: &'a PriorConfig,
    pub depth_cap: usize,
    pub parallel: bool,
}

/// Structure prior ratio of splitting a leaf at `depth` with rule
/// probabilities `pi_g`, `pi_e`.
pub fn prior_ratio_split(depth: usize, pi_g: f64, pi_e: f64, alpha: f64, beta: f64) -> f64 {
    let d = depth as f64;
    let tail = 1.0 - alpha / (2.0 + d).powf(beta);
    alpha * tail * tail * pi_g * pi_e / ((1.0 + d).powf(beta) - alpha)
}

/// `log eta` for a move with `h(x) = sqrt(x)`.
pub fn informed_weight(m: &Move) -> f64 {
    0.5 * (m.log_q_forward + m.log_q_backward + m.log_lik_ratio + m.log_prior_ratio)
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Whether a training set can be split by some graph: it must occupy at
/// least two vertices of one graph (then some edge separates them).
fn spans_two_vertices(graphs: &[Arborescence], samples: impl Iterator<Item = usize>) -> bool {
    let mut first: Vec<Option<usize>> = vec![None; graphs.len()];
    for i in samples {
        for (g, f) in graphs.iter().zip(first.iter_mut()) {
            let v = g.vertex_of(i);
            match *f {
                None => *f = Some(v),
                Some(u) if u != v => return true,
                _ => {}
            }
        }
    }
    false
}

/// Occupied vertices in the subtree of every vertex, and in total, for one
/// training set.
fn occupied_below(graph: &Arborescence, samples: &[usize]) -> (Vec<u32>, u32) {
    let mut below = vec![0u32; graph.vertex_count()];
    for &i in samples {
        below[graph.vertex_of(i)] = 1;
    }
    let total = below.iter().sum();
    for &v in graph.postorder() {
        if let Some(p) = graph.parent(v) {
            below[p] += below[v];
        }
    }
    (below, total)
}

fn log_p_split(root_only: bool, splittable: usize) -> f64 {
    if root_only {
        0.0
    } else if splittable == 0 {
        f64::NEG_INFINITY
    } else {
        0.5f64.ln()
    }
}

fn log_p_merge(root_only: bool, splittable: usize) -> f64 {
    if root_only {
        f64::NEG_INFINITY
    } else if splittable == 0 {
        0.0
    } else {
        0.5f64.ln()
    }
}

/// All split and merge moves out of `tree`, scored against `tables`.
pub fn enumerate_moves(
    tree: &DecisionTree,
    tables: &[SplitTable],
    ctx: &TreeContext,
) -> Result<Neighborhood, SamplerError> {
    enumerate_with_cache(tree, &tree.train_groups(), tables, ctx, &HashMap::new())
}

/// As [`enumerate_moves`]; `columns` may hold the scans of internal nodes
/// from when they were leaves, which give the post-merge edge counts.
fn enumerate_with_cache(
    tree: &DecisionTree,
    groups: &[Vec<usize>],
    tables: &[SplitTable],
    ctx: &TreeContext,
    columns: &HashMap<usize, LeafColumns>,
) -> Result<Neighborhood, SamplerError> {
    let prior = ctx.prior;
    let leaves = tree.leaves();
    let stats: Vec<LeafStats> = groups.iter().map(|g| ctx.terms.stats(g)).collect();
    let graphs_with_valid: Vec<usize> = (0..leaves.len())
        .map(|k| tables.iter().filter(|t| t.valid_count[k] > 0).count())
        .collect();
    let splittable: Vec<bool> = (0..leaves.len())
        .map(|k| tree.depth(leaves[k]) < ctx.depth_cap && graphs_with_valid[k] > 0)
        .collect();
    let n_splittable = splittable.iter().filter(|&&s| s).count();
    let second_gen = tree.second_generation_internals();
    let root_only = tree.is_root_only();
    let lp_split = log_p_split(root_only, n_splittable);
    let lp_merge = log_p_merge(root_only, n_splittable);
    let cols = tree.column_map();

    let capacity = second_gen.len()
        + (0..leaves.len())
            .filter(|&k| splittable[k])
            .map(|k| tables.iter().map(|t| t.valid_count[k]).sum::<usize>())
            .sum::<usize>();
    let mut moves = Vec::with_capacity(capacity);
    for (k, &leaf) in leaves.iter().enumerate() {
        if !splittable[k] {
            continue;
        }
        let depth = tree.depth(leaf);
        let pi_g = 1.0 / graphs_with_valid[k] as f64;
        let parent_second_gen = tree
            .node(leaf)
            .and_then(|n| n.parent)
            .is_some_and(|p| tree.leaf_children(p).is_some());
        let w2_after = second_gen.len() + 1 - usize::from(parent_second_gen);
        let others_splittable = n_splittable > 1;
        let children_can_split = depth + 1 < ctx.depth_cap;
        for (g, table) in tables.iter().enumerate() {
            let nvalid = table.valid_count[k];
            if nvalid == 0 {
                continue;
            }
            let pi_e = 1.0 / nvalid as f64;
            let log_q_forward = lp_split - (n_splittable as f64).ln() + pi_g.ln() + pi_e.ln();
            let log_prior_ratio =
                prior_ratio_split(depth, pi_g, pi_e, prior.alpha, prior.beta).ln();
            let graph = &ctx.graphs[g];
            let occupied = (!others_splittable && children_can_split)
                .then(|| occupied_below(graph, &groups[k]));
            for edge in table.valid_edges(k) {
                // Merge probability in the post-split tree depends on whether
                // anything remains splittable there.
                let after_split_has_splittable = others_splittable
                    || (children_can_split && {
                        let (below, total) = occupied.as_ref().expect("computed above");
                        // A side over two or more occupied vertices of this
                        // graph can be split again; otherwise check all graphs.
                        below[edge] >= 2 || total - below[edge] >= 2 || {
                            let (l, r): (Vec<usize>, Vec<usize>) = groups[k]
                                .iter()
                                .partition(|&&i| !graph.routes_right(i, edge));
                            (l.len() > 1 && spans_two_vertices(ctx.graphs, l.into_iter()))
                                || (r.len() > 1 && spans_two_vertices(ctx.graphs, r.into_iter()))
                        }
                    });
                let lp_merge_after = if after_split_has_splittable {
                    0.5f64.ln()
                } else {
                    0.0
                };
                let mut m = Move {
                    kind: MoveKind::Split {
                        leaf,
                        rule: GraphSplitRule { graph: g, edge },
                    },
                    log_lik_ratio: table.ratio(edge, k),
                    log_prior_ratio,
                    log_q_forward,
                    log_q_backward: lp_merge_after - (w2_after as f64).ln(),
                    log_eta: 0.0,
                };
                m.log_eta = informed_weight(&m);
                moves.push(m);
            }
        }
    }

    for &node in &second_gen {
        let (a, b) = tree.leaf_children(node).expect("second-generation node");
        let (ca, cb) = (cols[a], cols[b]);
        let NodeRule { graph, depth } = node_rule(tree, node);
        let counts: Vec<usize> = match columns.get(&node) {
            Some(c) => c.iter().map(|c| c.valid_count).collect(),
            None => {
                let merged: Vec<usize> = groups[ca].iter().chain(&groups[cb]).copied().collect();
                ctx.graphs
                    .iter()
                    .map(|g| valid_edge_count(g, &merged))
                    .collect()
            }
        };
        let n_graphs = counts.iter().filter(|&&c| c > 0).count();
        let pi_g = 1.0 / n_graphs as f64;
        let pi_e = 1.0 / counts[graph] as f64;
        let splittable_after =
            n_splittable + 1 - usize::from(splittable[ca]) - usize::from(splittable[cb]);
        let lp_split_after = if node == 0 { 0.0 } else { 0.5f64.ln() };
        let mut m = Move {
            kind: MoveKind::Merge { node },
            log_lik_ratio: merge_log_ratio(stats[ca], stats[cb], prior),
            log_prior_ratio: -prior_ratio_split(depth, pi_g, pi_e, prior.alpha, prior.beta).ln(),
            log_q_forward: lp_merge - (second_gen.len() as f64).ln(),
            log_q_backward: lp_split_after - (splittable_after as f64).ln() + pi_g.ln() + pi_e.ln(),
            log_eta: 0.0,
        };
        m.log_eta = informed_weight(&m);
        moves.push(m);
    }

    if moves.is_empty() {
        return Err(SamplerError::EmptyNeighborhood);
    }
    Ok(Neighborhood::new(moves))
}

struct NodeRule {
    graph: usize,
    depth: usize,
}

fn node_rule(tree: &DecisionTree, node: usize) -> NodeRule {
    let n = tree.node(node).expect("node exists");
    match n.kind {
        crate::tree::NodeKind::Internal { rule, .. } => NodeRule {
            graph: rule.graph,
            depth: n.depth,
        },
        _ => unreachable!("merge target is internal"),
    }
}

/// Split columns of one leaf, one per candidate graph.
type LeafColumns = Arc<Vec<LeafColumn>>;

/// Current tree, its split tables and scored neighborhood.
///
/// Columns are cached by node id. Ids are never reused and a node's
/// training set is fixed by its path, so an entry stays valid for the whole
/// walk: surviving leaves keep theirs, and merges read the scan the node
/// had as a leaf.
#[derive(Debug, Clone)]
pub struct IITState {
    pub tree: DecisionTree,
    pub tables: Vec<SplitTable>,
    pub neighborhood: Neighborhood,
    columns: HashMap<usize, LeafColumns>,
}

impl IITState {
    pub fn new(tree: DecisionTree, ctx: &TreeContext) -> Result<Self, SamplerError> {
        Self::with_cache(tree, ctx, HashMap::new())
    }

    fn with_cache(
        tree: DecisionTree,
        ctx: &TreeContext,
        mut columns: HashMap<usize, LeafColumns>,
    ) -> Result<Self, SamplerError> {
        let groups = tree.train_groups();
        let scan = |samples: &[usize]| -> LeafColumns {
            let cols = if ctx.parallel && ctx.graphs.len() > 1 {
                ctx.graphs
                    .par_iter()
                    .map(|g| scan_leaf_column(g, samples, ctx.terms, ctx.prior))
                    .collect()
            } else {
                ctx.graphs
                    .iter()
                    .map(|g| scan_leaf_column(g, samples, ctx.terms, ctx.prior))
                    .collect()
            };
            Arc::new(cols)
        };
        for (&leaf, samples) in tree.leaves().iter().zip(&groups) {
            columns.entry(leaf).or_insert_with(|| scan(samples));
        }
        let ordered: Vec<&LeafColumns> = tree.leaves().iter().map(|l| &columns[l]).collect();
        let tables: Vec<SplitTable> = ctx
            .graphs
            .iter()
            .enumerate()
            .map(|(g, graph)| {
                let cols: Vec<&LeafColumn> = ordered.iter().map(|c| &c[g]).collect();
                SplitTable::from_columns(graph.vertex_count(), &cols)
            })
            .collect();
        let neighborhood = enumerate_with_cache(&tree, &groups, &tables, ctx, &columns)?;
        Ok(Self {
            tree,
            tables,
            neighborhood,
            columns,
        })
    }
}

/// Index of a move drawn with probability `eta / Z`.
pub fn choose_move<R: Rng + ?Sized>(nb: &Neighborhood, rng: &mut R) -> usize {
    let total: f64 = nb.weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in nb.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    nb.moves.len() - 1
}

/// Applies a move, resolving equivalent edges for splits.
pub fn apply_move<R: Rng + ?Sized>(
    tree: &mut DecisionTree,
    mv: &Move,
    tables: &[SplitTable],
    graphs: &[Arborescence],
    rng: &mut R,
) -> Result<(), SamplerError> {
    match mv.kind {
        MoveKind::Split { leaf, rule } => {
            let k = tree.column_of(leaf).ok_or(TreeError::NotLeaf(leaf))?;
            let types = tables[rule.graph].column_types(k);
            let edge = resolve_equivalent_edge(&graphs[rule.graph], &types, rule.edge, rng)?;
            tree.apply_split(
                leaf,
                GraphSplitRule {
                    graph: rule.graph,
                    edge,
                },
                graphs,
            )?;
        }
        MoveKind::Merge { node } => tree.apply_merge(node)?,
    }
    Ok(())
}

/// One rejection-free step.
pub fn iit_step<R: Rng + ?Sized>(
    state: IITState,
    ctx: &TreeContext,
    rng: &mut R,
) -> Result<IITState, SamplerError> {
    if state.neighborhood.moves.is_empty() {
        return Err(SamplerError::EmptyNeighborhood);
    }
    let i = choose_move(&state.neighborhood, rng);
    let mut tree = state.tree;
    apply_move(
        &mut tree,
        &state.neighborhood.moves[i],
        &state.tables,
        ctx.graphs,
        rng,
    )?;
    IITState::with_cache(tree, ctx, state.columns)
}

/// Draws every leaf weight of `tree` from its conditional posterior.
pub fn draw_leaf_weights<R: Rng + ?Sized>(
    tree: &mut DecisionTree,
    terms: &SampleTerms,
    prior: &PriorConfig,
    rng: &mut R,
) {
    let groups = tree.train_groups();
    let leaves = tree.leaves().to_vec();
    for (k, leaf) in leaves.into_iter().enumerate() {
        let w = sample_leaf_weight(terms.stats(&groups[k]), prior, rng);
        tree.set_leaf_weight(leaf, w).expect("live leaf");
    }
}

/// Inputs specific to the response model for one tree update.
pub struct TreeTarget<'a> {
    pub model: &'a ResponseModel,
    /// Training responses.
    pub y: &'a [f64],
    pub grad: &'a GradientTable,
}

/// `log L(M) - log L_hat(M)` over training samples for the weights stored
/// in `tree`.
fn exact_correction(tree: &DecisionTree, target: &TreeTarget) -> Result<f64, ModelError> {
    let g = target.grad;
    let mut s = 0.0;
    for i in 0..target.y.len() {
        let mu = tree.leaf_weight(tree.leaf_of(i));
        let phi = g.phi_hat[i] - g.phi_t_hat[i] + mu;
        s += target.model.log_likelihood(target.y[i], phi)? - g.quadratic_loglik(i, mu);
    }
    Ok(s)
}

/// Regrows one tree from the root with `k` informed steps and returns an
/// importance-resampled visited state with drawn leaf weights.
pub fn sample_tree<R: Rng + ?Sized>(
    n_test: usize,
    k: usize,
    ctx: &TreeContext,
    target: &TreeTarget,
    rng: &mut R,
) -> Result<DecisionTree, SamplerError> {
    if k < 1 {
        return Err(SamplerError::ZeroSteps);
    }
    let root = DecisionTree::new(target.y.len(), n_test);
    let mut state = match IITState::new(root.clone(), ctx) {
        Ok(s) => s,
        Err(SamplerError::EmptyNeighborhood) => {
            let mut t = root;
            draw_leaf_weights(&mut t, ctx.terms, ctx.prior, rng);
            return Ok(t);
        }
        Err(e) => return Err(e),
    };
    let gaussian = matches!(target.model, ResponseModel::Normal { .. });
    let mut visited: Vec<DecisionTree> = Vec::with_capacity(k);
    let mut log_w: Vec<f64> = Vec::with_capacity(k);
    for _ in 0..k {
        state = iit_step(state, ctx, rng)?;
        let mut t = state.tree.clone();
        let mut lw = -state.neighborhood.log_z;
        if !gaussian {
            draw_leaf_weights(&mut t, ctx.terms, ctx.prior, rng);
            lw += exact_correction(&t, target)?;
        }
        visited.push(t);
        log_w.push(lw);
    }
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let pick = WeightedIndex::new(&w)
        .expect("weights are finite and positive")
        .sample(rng);
    let mut tree = visited.swap_remove(pick);
    if gaussian {
        draw_leaf_weights(&mut tree, ctx.terms, ctx.prior, rng);
    }
    Ok(tree)
}

/// Data a fit conditions on. Training samples come first.
#[derive(Debug, Clone, PartialEq)]
pub struct FitData {
    pub kind: ModelKind,
    /// Training responses (already rescaled for normal models).
    pub y: Vec<f64>,
    /// Additive offset inside the linear predictor, training then test.
    pub offset: Vec<f64>,
    pub n_test: usize,
}

impl FitData {
    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn n_total(&self) -> usize {
        self.y.len() + self.n_test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub trees: usize,
    pub sweeps: usize,
    pub burn_in: usize,
    pub steps: usize,
    pub depth_cap: usize,
    pub parallel: bool,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            trees: 50,
            sweeps: 215,
            burn_in: 15,
            steps: 20,
            depth_cap: 10,
            parallel: false,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: &str| Err(SamplerError::Schedule(m.into()));
        if self.trees == 0 {
            return bad("tree count must be positive");
        }
        if self.steps == 0 {
            return Err(SamplerError::ZeroSteps);
        }
        if self.burn_in > self.sweeps {
            return bad("burn-in exceeds the number of sweeps");
        }
        if self.depth_cap == 0 {
            return bad("depth cap must be positive");
        }
        Ok(())
    }
}

/// Mutable state of the backfitting loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub trees: Vec<DecisionTree>,
    /// Per-tree fitted values over all samples.
    pub contributions: Vec<Vec<f64>>,
    /// `sum_t contributions[t]`, excluding the offset.
    pub phi: Vec<f64>,
    pub sigma: f64,
    pub sigma_mu2: f64,
    /// `lambda` of the residual-variance prior (normal model).
    pub lambda: f64,
    pub sweep: usize,
}

impl SamplerState {
    /// Root-only trees with zero weights.
    pub fn init(data: &FitData, trees: usize, sigma: f64, sigma_mu2: f64, lambda: f64) -> Self {
        let n = data.n_total();
        Self {
            trees: (0..trees)
                .map(|_| DecisionTree::new(data.n_train(), data.n_test))
                .collect(),
            contributions: vec![vec![0.0; n]; trees],
            phi: vec![0.0; n],
            sigma,
            sigma_mu2,
            lambda,
            sweep: 0,
        }
    }

    pub fn response_model(&self, kind: ModelKind) -> ResponseModel {
        match kind {
            ModelKind::Normal => ResponseModel::Normal { sigma: self.sigma },
            ModelKind::Count => ResponseModel::CountVariance,
            ModelKind::Classification => ResponseModel::BinaryLogistic,
        }
    }

    /// Linear predictor including the offset.
    pub fn linear_predictor(&self, data: &FitData) -> Vec<f64> {
        self.phi
            .iter()
            .zip(&data.offset)
            .map(|(p, o)| p + o)
            .collect()
    }

    fn resum(&mut self) {
        self.phi.iter_mut().for_each(|p| *p = 0.0);
        for c in &self.contributions {
            for (p, v) in self.phi.iter_mut().zip(c) {
                *p += v;
            }
        }
    }
}

/// One deterministic sweep over all trees, then `sigma_mu^2` and (normal
/// model) `sigma`. `graphs[t]` is the candidate set of tree `t`.
// The tree index addresses graphs, contributions and trees together.
#[allow(clippy::needless_range_loop)]
pub fn gibbs_sweep<R: Rng + ?Sized>(
    state: &mut SamplerState,
    data: &FitData,
    graphs: &[Vec<Arborescence>],
    prior: &PriorConfig,
    schedule: &Schedule,
    rng: &mut R,
) -> Result<(), SamplerError> {
    let n_train = data.n_train();
    let prior = PriorConfig {
        sigma_mu2: state.sigma_mu2,
        ..prior.clone()
    };
    let model = state.response_model(data.kind);
    for t in 0..state.trees.len() {
        let phi_hat: Vec<f64> = (0..n_train)
            .map(|i| state.phi[i] + data.offset[i])
            .collect();
        let grad = GradientTable::build(
            &model,
            &data.y,
            &phi_hat,
            &state.contributions[t][..n_train],
        )?;
        let terms = SampleTerms::from_table(&grad);
        let ctx = TreeContext {
            graphs: &graphs[t],
            terms: &terms,
            prior: &prior,
            depth_cap: schedule.depth_cap,
            parallel: schedule.parallel,
        };
        let target = TreeTarget {
            model: &model,
            y: &data.y,
            grad: &grad,
        };
        let tree = sample_tree(data.n_test, schedule.steps, &ctx, &target, rng)?;
        let fitted = tree.fitted();
        for ((p, new), old) in state
            .phi
            .iter_mut()
            .zip(&fitted)
            .zip(&state.contributions[t])
        {
            *p += new - old;
        }
        state.contributions[t] = fitted;
        state.trees[t] = tree;
    }
    state.resum();

    let weights: Vec<f64> = state.trees.iter().flat_map(|t| t.leaf_weights()).collect();
    state.sigma_mu2 = sample_sigma_mu(&weights, &prior, rng);
    if data.kind == ModelKind::Normal {
        let resid: Vec<f64> = (0..n_train)
            .map(|i| data.y[i] - state.phi[i] - data.offset[i])
            .collect();
        let s2 = sample_sigma_normal(&model, &resid, prior.nu, state.lambda, rng)?;
        state.sigma = s2.sqrt();
    }
    state.sweep += 1;
    Ok(())
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub sweep: usize,
    pub trees: Vec<DecisionTree>,
    /// Ensemble fit over all samples, excluding the offset.
    pub phi: Vec<f64>,
    pub sigma: f64,
    pub sigma_mu2: f64,
}

/// Per-sweep fit summary in model units: mean squared error for normal
/// responses, mean log-likelihood otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub sweep: usize,
    pub train: f64,
    pub test: Option<f64>,
    pub sigma: f64,
    pub sigma_mu2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub draws: Vec<Draw>,
    pub trace: Vec<TracePoint>,
    /// Split counts per candidate-graph feature label over retained draws.
    pub importance: Vec<(String, usize)>,
    pub state: SamplerState,
}

/// Initial sampler settings derived from the data and model.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSettings {
    pub sigma: f64,
    pub sigma_mu2: f64,
    pub lambda: f64,
}

impl InitSettings {
    /// Sample-variance based `sigma` and calibrated `lambda` for normal
    /// responses; unit values otherwise.
    pub fn for_data(data: &FitData, sigma_mu: f64, nu: f64) -> Self {
        let (sigma, lambda) = if data.kind == ModelKind::Normal {
            let n = data.y.len() as f64;
            let mean = data.y.iter().sum::<f64>() / n;
            let var = data.y.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let sd = var.sqrt().max(1e-6);
            (sd, calibrate_lambda(sd, nu, 0.9))
        } else {
            (1.0, 1.0)
        };
        Self {
            sigma,
            sigma_mu2: sigma_mu * sigma_mu,
            lambda,
        }
    }
}

fn trace_metric(model: &ResponseModel, kind: ModelKind, y: &[f64], lin: &[f64]) -> f64 {
    let n = y.len().max(1) as f64;
    match kind {
        ModelKind::Normal => y.iter().zip(lin).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n,
        _ => {
            y.iter()
                .zip(lin)
                .map(|(&a, &b)| model.log_likelihood(a, b).unwrap_or(f64::NEG_INFINITY))
                .sum::<f64>()
                / n
        }
    }
}

/// Runs the full backfitting loop. `test_y`, when given, is used only for
/// the trace.
pub fn run<R: Rng + ?Sized>(
    data: &FitData,
    graphs: &[Vec<Arborescence>],
    prior: &PriorConfig,
    schedule: &Schedule,
    init: &InitSettings,
    test_y: Option<&[f64]>,
    rng: &mut R,
) -> Result<FitResult, SamplerError> {
    schedule.validate()?;
    prior.validate()?;
    if graphs.len() != schedule.trees {
        return Err(SamplerError::Schedule(format!(
            "{} candidate sets for {} trees",
            graphs.len(),
            schedule.trees
        )));
    }
    let mut state = SamplerState::init(
        data,
        schedule.trees,
        init.sigma,
        init.sigma_mu2,
        init.lambda,
    );
    let mut draws = Vec::new();
    let mut trace = Vec::with_capacity(schedule.sweeps);
    let mut labels: Vec<String> = Vec::new();
    for g in graphs.iter().flatten() {
        if !labels.iter().any(|l| l == g.feature_label()) {
            labels.push(g.feature_label().to_string());
        }
    }
    let mut counts = vec![0usize; labels.len()];
    let n_train = data.n_train();
    for sweep in 0..schedule.sweeps {
        gibbs_sweep(&mut state, data, graphs, prior, schedule, rng)?;
        let model = state.response_model(data.kind);
        let lin = state.linear_predictor(data);
        trace.push(TracePoint {
            sweep,
            train: trace_metric(&model, data.kind, &data.y, &lin[..n_train]),
            test: test_y.map(|ty| trace_metric(&model, data.kind, ty, &lin[n_train..])),
            sigma: state.sigma,
            sigma_mu2: state.sigma_mu2,
        });
        if sweep >= schedule.burn_in {
            for (t, tree) in state.trees.iter().enumerate() {
                for rule in tree.rules() {
                    let label = graphs[t][rule.graph].feature_label();
                    let pos = labels
                        .iter()
                        .position(|l| l == label)
                        .expect("label registered");
                    counts[pos] += 1;
                }
            }
            draws.push(Draw {
                sweep,
                trees: state.trees.iter().map(DecisionTree::compact).collect(),
                phi: state.phi.clone(),
                sigma: state.sigma,
                sigma_mu2: state.sigma_mu2,
            });
        }
    }
    Ok(FitResult {
        draws,
        trace,
        importance: labels.into_iter().zip(counts).collect(),
        state,
    })
}

//! Bayesian additive decision trees whose split rules cut edges of candidate
//! arborescences, fitted with a rejection-free informed importance-tempering
//! sampler.
//!
//! Layers, bottom-up: [`graph`] builds candidate arborescences, [`tree`]
//! holds graph-split decision trees, [`likelihood`] scores leaves, [`engine`]
//! computes split tables in one pass per graph, [`sampler`] runs the
//! informed sampler inside backfitting, and [`pipeline`] handles files.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod graph;
pub mod likelihood;
pub mod pipeline;
pub mod sampler;
pub mod tree;

pub use engine::{EdgeType, SplitTable, VertexStats};
pub use graph::{Arborescence, GraphError, StructuralGraph, VertexBin};
pub use likelihood::{GradientTable, LeafStats, ModelError, ModelKind, PriorConfig, ResponseModel};
pub use pipeline::PipelineError;
pub use sampler::{SamplerError, SamplerState, Schedule};
pub use tree::{DecisionTree, GraphSplitRule, TreeError};

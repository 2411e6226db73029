//! Persisted posterior: candidate-graph recipes plus retained tree draws.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::FitConfig;
use super::data::Dataset;
use super::PipelineError;
use crate::graph::{build_chain_graph, Arborescence};
use crate::likelihood::ModelKind;
use crate::sampler::TracePoint;

pub const STORE_FORMAT: u32 = 1;

/// Chain graph over a numeric column; rebuilt for any dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSource {
    pub column: String,
    pub cuts: Vec<f64>,
    /// Training range of the column.
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralSource {
    pub name: String,
    /// Data column holding vertex ids, when the schema used one.
    pub column: Option<String>,
    /// Vertex of every row of the training file (original row order).
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredArborescence {
    /// Index into `structural`.
    pub source: usize,
    pub parent: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDraw {
    pub sweep: usize,
    /// One line-oriented tree text per weak learner.
    pub trees: Vec<String>,
    pub sigma: f64,
    pub sigma_mu2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredFit {
    /// Class label for classification fits.
    pub label: Option<String>,
    pub draws: Vec<StoredDraw>,
    pub trace: Vec<TracePoint>,
    pub importance: Vec<(String, usize)>,
}

/// Affine map between original and fitted response units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub min: f64,
    pub range: f64,
}

impl Scale {
    pub fn from_values(y: &[f64]) -> Self {
        let min = y.iter().copied().fold(f64::INFINITY, f64::min);
        let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = if max > min { max - min } else { 1.0 };
        Self { min, range }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.min) / self.range - 0.5
    }

    pub fn inverse(&self, z: f64) -> f64 {
        (z + 0.5) * self.range + self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorStore {
    pub format: u32,
    pub model: ModelKind,
    pub config: FitConfig,
    pub response: String,
    pub offset_column: Option<String>,
    pub chains: Vec<ChainSource>,
    pub structural: Vec<StructuralSource>,
    /// Per-tree random arborescences, appended after the shared chains.
    pub arborescences: Vec<Vec<StoredArborescence>>,
    /// Normal responses: fitted units are `(y - min) / range - 0.5`.
    pub scale: Option<Scale>,
    /// Count responses: log-rate intercept folded into the offset.
    pub intercept: f64,
    pub fits: Vec<StoredFit>,
}

impl PosteriorStore {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string(self).map_err(|e| PipelineError::Store(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let s: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Store(format!("{}: {e}", path.display())))?;
        if s.format != STORE_FORMAT {
            return Err(PipelineError::Store(format!(
                "unsupported store format {}",
                s.format
            )));
        }
        Ok(s)
    }

    pub fn draw_count(&self) -> usize {
        self.fits.first().map_or(0, |f| f.draws.len())
    }

    pub fn classes(&self) -> Vec<String> {
        self.fits.iter().filter_map(|f| f.label.clone()).collect()
    }

    /// Candidate graphs of every tree bound to the rows of `data`.
    pub fn bind_graphs(&self, data: &Dataset) -> Result<Vec<Vec<Arborescence>>, PipelineError> {
        let chains = self
            .chains
            .iter()
            .map(|c| {
                let values = data
                    .feature(&c.column)
                    .ok_or_else(|| PipelineError::MissingColumn(c.column.clone()))?;
                Ok(build_chain_graph(c.column.clone(), values, &c.cuts)?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let assignments = self
            .structural
            .iter()
            .map(|s| {
                if let Some(l) = data.structural.iter().find(|l| l.name == s.name) {
                    return Ok(l.graph.bin_assignment().to_vec());
                }
                if s.assignment.len() == data.rows {
                    return Ok(s.assignment.clone());
                }
                Err(PipelineError::Schema(format!(
                    "no vertex assignment for structural graph {:?} on this data",
                    s.name
                )))
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        self.arborescences
            .iter()
            .map(|arbs| {
                let mut set = chains.clone();
                for a in arbs {
                    let src = &self.structural[a.source];
                    set.push(Arborescence::new(
                        src.name.clone(),
                        a.parent.clone(),
                        assignments[a.source].clone(),
                    )?);
                }
                Ok(set)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_round_trip() {
        let s = Scale::from_values(&[2.0, 6.0, 4.0]);
        assert_eq!(s.forward(2.0), -0.5);
        assert_eq!(s.forward(6.0), 0.5);
        assert!((s.inverse(s.forward(3.3)) - 3.3).abs() < 1e-12);
        assert_eq!(Scale::from_values(&[1.0, 1.0]).range, 1.0);
    }
}

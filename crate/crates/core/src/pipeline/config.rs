//! Training configuration (TOML).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::likelihood::ModelKind;
use crate::sampler::Schedule;

/// Environment variable consulted for the worker count when the config
/// leaves it unset.
pub const WORKERS_ENV: &str = "GSBART_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub model: ModelKind,
    pub trees: usize,
    pub sweeps: usize,
    pub burn_in: usize,
    /// Informed steps per tree update.
    pub steps: usize,
    pub depth_cap: usize,
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    /// Leaf-variance hyperprior scale; model-dependent default when unset.
    pub b: Option<f64>,
    pub nu: f64,
    pub seed: u64,
    pub workers: Option<usize>,
    /// Default chain-graph vertex count per numeric feature.
    pub bins: usize,
    /// Per-feature overrides of `bins`.
    pub feature_bins: BTreeMap<String, usize>,
    /// Random arborescences per structural graph per tree.
    pub arborescences: usize,
    /// Held-out share when the schema has no split column.
    pub test_fraction: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Normal,
            trees: 50,
            sweeps: 215,
            burn_in: 15,
            steps: 20,
            depth_cap: 10,
            alpha: 0.95,
            beta: 2.0,
            a: 3.0,
            b: None,
            nu: 3.0,
            seed: 1,
            workers: None,
            bins: 100,
            feature_bins: BTreeMap::new(),
            arborescences: 10,
            test_fraction: 0.0,
        }
    }
}

impl FitConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let c: Self = toml::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut problems = Vec::new();
        if self.trees == 0 {
            problems.push("trees must be positive".to_string());
        }
        if self.steps == 0 {
            problems.push("steps must be positive".to_string());
        }
        if self.burn_in > self.sweeps {
            problems.push("burn_in exceeds sweeps".to_string());
        }
        if self.depth_cap == 0 {
            problems.push("depth_cap must be positive".to_string());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            problems.push("alpha must lie in (0, 1)".to_string());
        }
        if !(self.beta >= 0.0) {
            problems.push("beta must be non-negative".to_string());
        }
        if !(self.a > 0.0) {
            problems.push("a must be positive".to_string());
        }
        if let Some(b) = self.b {
            if !(b > 0.0) {
                problems.push("b must be positive".to_string());
            }
        }
        if !(self.nu > 0.0) {
            problems.push("nu must be positive".to_string());
        }
        if self.bins < 2 || self.feature_bins.values().any(|&b| b < 2) {
            problems.push("bins must be at least 2".to_string());
        }
        if self.arborescences == 0 {
            problems.push("arborescences must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            problems.push("test_fraction must lie in [0, 1)".to_string());
        }
        if self.workers == Some(0) {
            problems.push("workers must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(problems.join("; ")))
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            trees: self.trees,
            sweeps: self.sweeps,
            burn_in: self.burn_in,
            steps: self.steps,
            depth_cap: self.depth_cap,
            parallel: self.resolved_workers() > 1,
        }
    }

    /// Config value, else the environment variable, else 1.
    pub fn resolved_workers(&self) -> usize {
        self.workers
            .or_else(|| std::env::var(WORKERS_ENV).ok()?.parse().ok())
            .unwrap_or(1)
            .max(1)
    }

    pub fn bins_for(&self, feature: &str) -> usize {
        self.feature_bins.get(feature).copied().unwrap_or(self.bins)
    }
}

//! Synthetic benchmark generators.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    Friedman,
    ChainStep,
    GraphStep,
}

impl std::str::FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "friedman" => Ok(Self::Friedman),
            "chain-step" => Ok(Self::ChainStep),
            "graph-step" => Ok(Self::GraphStep),
            o => Err(format!(
                "unknown synthetic kind {o:?} (friedman, chain-step, graph-step)"
            )),
        }
    }
}

/// Levels of the chain-step function on `(-inf, .25], (.25, .5], (.5, .75], (.75, inf)`.
pub const CHAIN_STEP_LEVELS: [f64; 4] = [0.0, 1.0, -0.5, 0.5];
/// Region levels of the graph-step function.
pub const GRAPH_STEP_LEVELS: [f64; 4] = [-1.0, -0.3, 0.4, 1.0];
/// Side of the square lattice used by the graph-step generator.
pub const GRID_SIDE: usize = 8;

/// `10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4`; a fifth covariate is noise.
pub fn friedman(x: &[f64]) -> f64 {
    10.0 * (PI * x[0] * x[1]).sin() + 20.0 * (x[2] - 0.5).powi(2) + 10.0 * x[3]
}

pub fn chain_step(x: f64) -> f64 {
    let k = [0.25, 0.5, 0.75].iter().filter(|&&c| x > c).count();
    CHAIN_STEP_LEVELS[k]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub kind: SynthKind,
    /// `y`, `f` (noiseless truth), `test` (0/1), then covariates.
    pub columns: Vec<(String, Vec<f64>)>,
    /// Lattice edges (graph-step only).
    pub edges: Vec<(usize, usize)>,
}

impl SyntheticData {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.1.len())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = self
            .columns
            .iter()
            .map(|c| c.0.as_str())
            .collect::<Vec<_>>()
            .join("\t");
        s.push('\n');
        for r in 0..self.rows() {
            let row: Vec<String> = self.columns.iter().map(|c| format!("{}", c.1[r])).collect();
            s.push_str(&row.join("\t"));
            s.push('\n');
        }
        s
    }

    /// Schema for the written files; graph paths are relative to `stem`.
    pub fn schema_toml(&self, stem: &str) -> String {
        let features: Vec<String> = self.columns[3..]
            .iter()
            .filter(|c| c.0 != "cell")
            .map(|c| format!("{:?}", c.0))
            .collect();
        let mut s = format!(
            "response = \"y\"\ntruth = \"f\"\nsplit = \"test\"\nfeatures = [{}]\n",
            features.join(", ")
        );
        if self.kind == SynthKind::GraphStep {
            let _ = write!(
                s,
                "\n[[structural]]\nname = \"grid\"\nedges = \"{stem}.edges\"\ncolumn = \"cell\"\n"
            );
        }
        s
    }

    /// Writes `<out>` (TSV), `<out>.schema.toml`, and for graph-step data
    /// `<out>.edges`.
    pub fn write(&self, out: &Path) -> Result<(), PipelineError> {
        std::fs::write(out, self.to_tsv()).map_err(|e| PipelineError::io(out, e))?;
        let stem = out
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        let schema = out.with_file_name(format!("{stem}.schema.toml"));
        std::fs::write(&schema, self.schema_toml(&stem))
            .map_err(|e| PipelineError::io(&schema, e))?;
        if self.kind == SynthKind::GraphStep {
            let ep = out.with_file_name(format!("{stem}.edges"));
            let text: String = self
                .edges
                .iter()
                .map(|(u, v)| format!("{u} {v}\n"))
                .collect();
            std::fs::write(&ep, text).map_err(|e| PipelineError::io(&ep, e))?;
        }
        Ok(())
    }
}

fn lattice_edges(side: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for r in 0..side {
        for c in 0..side {
            let v = r * side + c;
            if c + 1 < side {
                e.push((v, v + 1));
            }
            if r + 1 < side {
                e.push((v, v + side));
            }
        }
    }
    e
}

/// Multi-source breadth-first regions over the lattice.
fn lattice_regions(side: usize, seeds: &[usize]) -> Vec<usize> {
    let nv = side * side;
    let mut adj = vec![Vec::new(); nv];
    for (u, v) in lattice_edges(side) {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut region = vec![usize::MAX; nv];
    let mut q = VecDeque::new();
    for (k, &s) in seeds.iter().enumerate() {
        region[s] = k;
        q.push_back(s);
    }
    while let Some(u) = q.pop_front() {
        for &w in &adj[u] {
            if region[w] == usize::MAX {
                region[w] = region[u];
                q.push_back(w);
            }
        }
    }
    region
}

/// Generates `n` rows with Gaussian noise `sigma`; a seeded `test_fraction`
/// of rows is flagged in the `test` column.
pub fn generate_synthetic(
    kind: SynthKind,
    n: usize,
    sigma: f64,
    seed: u64,
    test_fraction: f64,
) -> Result<SyntheticData, PipelineError> {
    if n < 10 {
        return Err(PipelineError::Config(format!(
            "synthetic data needs n >= 10, got {n}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(PipelineError::Config(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(PipelineError::Config(
            "test fraction must lie in [0, 1)".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut covs: Vec<(String, Vec<f64>)> = Vec::new();
    let mut edges = Vec::new();
    let f: Vec<f64> = match kind {
        SynthKind::Friedman => {
            let x: Vec<[f64; 5]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
                .collect();
            for j in 0..5 {
                covs.push((format!("x{}", j + 1), x.iter().map(|r| r[j]).collect()));
            }
            x.iter().map(|r| friedman(r)).collect()
        }
        SynthKind::ChainStep => {
            let x: Vec<[f64; 3]> = (0..n)
                .map(|_| std::array::from_fn(|_| rng.random::<f64>()))
                .collect();
            for j in 0..3 {
                covs.push((format!("x{}", j + 1), x.iter().map(|r| r[j]).collect()));
            }
            x.iter().map(|r| chain_step(r[0])).collect()
        }
        SynthKind::GraphStep => {
            let side = GRID_SIDE;
            let mut cells: Vec<usize> = (0..side * side).collect();
            cells.shuffle(&mut rng);
            let region = lattice_regions(side, &cells[..GRAPH_STEP_LEVELS.len()]);
            edges = lattice_edges(side);
            let uv: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
            let cell: Vec<usize> = uv
                .iter()
                .map(|&(u, v)| {
                    let r = ((u * side as f64) as usize).min(side - 1);
                    let c = ((v * side as f64) as usize).min(side - 1);
                    r * side + c
                })
                .collect();
            covs.push(("u".into(), uv.iter().map(|p| p.0).collect()));
            covs.push(("v".into(), uv.iter().map(|p| p.1).collect()));
            covs.push(("cell".into(), cell.iter().map(|&c| c as f64).collect()));
            cell.iter().map(|&c| GRAPH_STEP_LEVELS[region[c]]).collect()
        }
    };
    let y: Vec<f64> = f
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + sigma * z
        })
        .collect();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut test = vec![0.0; n];
    for &i in &idx[..n_test] {
        test[i] = 1.0;
    }
    let mut columns = vec![
        ("y".to_string(), y),
        ("f".to_string(), f),
        ("test".to_string(), test),
    ];
    columns.extend(covs);
    Ok(SyntheticData {
        kind,
        columns,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn friedman_at_center() {
        let v = friedman(&[0.5; 5]);
        assert!((v - 12.0710678).abs() < 1e-7, "{v}");
    }

    #[test]
    fn chain_step_left_of_jumps() {
        assert_eq!(chain_step(0.1), CHAIN_STEP_LEVELS[0]);
        assert_eq!(chain_step(0.25), CHAIN_STEP_LEVELS[0]);
        assert_eq!(chain_step(0.9), CHAIN_STEP_LEVELS[3]);
    }

    #[test]
    fn zero_noise_has_zero_residuals() {
        for kind in [
            SynthKind::Friedman,
            SynthKind::ChainStep,
            SynthKind::GraphStep,
        ] {
            let d = generate_synthetic(kind, 50, 0.0, 3, 0.2).unwrap();
            assert_eq!(d.column("y"), d.column("f"));
            let tests = d
                .column("test")
                .unwrap()
                .iter()
                .filter(|&&t| t == 1.0)
                .count();
            assert_eq!(tests, 10);
        }
    }

    #[test]
    fn rejects_small_n() {
        assert!(generate_synthetic(SynthKind::Friedman, 9, 1.0, 0, 0.0).is_err());
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_synthetic(SynthKind::GraphStep, 30, 0.1, 9, 0.0).unwrap();
        let b = generate_synthetic(SynthKind::GraphStep, 30, 0.1, 9, 0.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.edges.len(), 2 * GRID_SIDE * (GRID_SIDE - 1));
    }

    #[test]
    fn regions_cover_lattice() {
        let r = lattice_regions(4, &[0, 15]);
        assert!(r.iter().all(|&k| k < 2));
        assert_eq!((r[0], r[15]), (0, 1));
    }
}

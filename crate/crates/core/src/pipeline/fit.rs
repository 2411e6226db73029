//! Training orchestration: graphs from a dataset, model set-up, sampling,
//! and the persisted store.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::FitConfig;
use super::data::{Dataset, Response, Schema};
use super::store::{
    ChainSource, PosteriorStore, Scale, StoredArborescence, StoredDraw, StoredFit,
    StructuralSource, STORE_FORMAT,
};
use super::PipelineError;
use crate::graph::{
    build_chain_graph, default_cut_points, sample_arborescence, Arborescence, StructuralGraph,
};
use crate::likelihood::{initial_sigma_mu, ModelKind, PriorConfig};
use crate::sampler::{run, FitData, FitResult, InitSettings};

/// Row layout used while fitting: training rows first.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// `order[p]` is the original row at internal position `p`.
    pub order: Vec<usize>,
    pub n_train: usize,
}

impl Layout {
    pub fn n_test(&self) -> usize {
        self.order.len() - self.n_train
    }

    pub fn gather<T: Clone>(&self, v: &[T]) -> Vec<T> {
        self.order.iter().map(|&r| v[r].clone()).collect()
    }

    /// Original row indices of the test rows.
    pub fn test_rows(&self) -> &[usize] {
        &self.order[self.n_train..]
    }
}

/// Candidate graphs bound to the fitting layout.
#[derive(Debug, Clone)]
pub struct CandidateGraphs {
    pub chains: Vec<ChainSource>,
    pub structural: Vec<StructuralSource>,
    pub arborescences: Vec<Vec<StoredArborescence>>,
    /// Per-tree candidate sets in fitting row order.
    pub per_tree: Vec<Vec<Arborescence>>,
}

pub struct TrainOutput {
    pub store: PosteriorStore,
    pub layout: Layout,
    /// One sampler result per fit (one per class for classification).
    pub results: Vec<FitResult>,
    pub graphs: CandidateGraphs,
}

fn split_layout(data: &Dataset, config: &FitConfig, rng: &mut ChaCha8Rng) -> Layout {
    let is_test = match &data.is_test {
        Some(t) => t.clone(),
        None => {
            let n_test = (config.test_fraction * data.rows as f64).round() as usize;
            let mut idx: Vec<usize> = (0..data.rows).collect();
            idx.shuffle(rng);
            let mut t = vec![false; data.rows];
            for &i in &idx[..n_test] {
                t[i] = true;
            }
            t
        }
    };
    let mut order: Vec<usize> = (0..data.rows).filter(|&r| !is_test[r]).collect();
    let n_train = order.len();
    order.extend((0..data.rows).filter(|&r| is_test[r]));
    Layout { order, n_train }
}

/// Builds chain graphs for every numeric feature and the random
/// arborescences of every structural graph.
pub fn build_candidates(
    data: &Dataset,
    config: &FitConfig,
    layout: &Layout,
    rng: &mut ChaCha8Rng,
) -> Result<CandidateGraphs, PipelineError> {
    let mut chains = Vec::new();
    let mut chain_graphs = Vec::new();
    for (name, values) in &data.features {
        let train: Vec<f64> = layout.order[..layout.n_train]
            .iter()
            .map(|&r| values[r])
            .collect();
        let cuts = match default_cut_points(&train, config.bins_for(name)) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("feature {name:?} skipped: {e}");
                continue;
            }
        };
        chain_graphs.push(build_chain_graph(
            name.clone(),
            &layout.gather(values),
            &cuts,
        )?);
        chains.push(ChainSource {
            column: name.clone(),
            cuts,
            min: train.iter().copied().fold(f64::INFINITY, f64::min),
            max: train.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    let mut structural = Vec::new();
    let mut bound = Vec::new();
    for s in &data.structural {
        let assignment = s.graph.bin_assignment().to_vec();
        let reordered = StructuralGraph::new(
            s.graph.vertex_count(),
            s.graph.edges().iter().copied(),
            layout.gather(&assignment),
        )?;
        bound.push(reordered);
        structural.push(StructuralSource {
            name: s.name.clone(),
            column: None,
            assignment,
        });
    }
    let mut arborescences = Vec::with_capacity(config.trees);
    let mut per_tree = Vec::with_capacity(config.trees);
    for _ in 0..config.trees {
        let mut set = chain_graphs.clone();
        let mut stored = Vec::new();
        for (k, g) in bound.iter().enumerate() {
            for _ in 0..config.arborescences {
                let a = sample_arborescence(structural[k].name.clone(), g, rng)?;
                stored.push(StoredArborescence {
                    source: k,
                    parent: a.parents().to_vec(),
                });
                set.push(a);
            }
        }
        arborescences.push(stored);
        per_tree.push(set);
    }
    if per_tree.first().is_none_or(|s| s.is_empty()) {
        return Err(PipelineError::Schema(
            "no usable candidate graph (every feature is constant)".into(),
        ));
    }
    Ok(CandidateGraphs {
        chains,
        structural,
        arborescences,
        per_tree,
    })
}

fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// Fits the model described by `config` to `data`.
pub fn train(
    data: &Dataset,
    schema: &Schema,
    config: &FitConfig,
) -> Result<TrainOutput, PipelineError> {
    config.validate()?;
    let workers = config.resolved_workers();
    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
        pool.install(|| train_inner(data, schema, config))
    } else {
        train_inner(data, schema, config)
    }
}

fn train_inner(
    data: &Dataset,
    schema: &Schema,
    config: &FitConfig,
) -> Result<TrainOutput, PipelineError> {
    let response = data
        .response
        .as_ref()
        .ok_or_else(|| PipelineError::MissingColumn(schema.response.clone()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layout = split_layout(data, config, &mut rng);
    if layout.n_train < 2 {
        return Err(PipelineError::Schema(format!(
            "need at least 2 training rows, have {}",
            layout.n_train
        )));
    }
    let graphs = build_candidates(data, config, &layout, &mut rng)?;
    let n_train = layout.n_train;
    let n_test = layout.n_test();
    let t = config.trees;
    let schedule = config.schedule();
    let raw_offset: Vec<f64> = match &data.offset {
        Some(o) => layout.gather(o),
        None => vec![0.0; data.rows],
    };

    // (fit data, label, test responses for the trace)
    let mut jobs: Vec<(FitData, Option<String>, Option<Vec<f64>>)> = Vec::new();
    let mut scale = None;
    let mut intercept = 0.0;
    match (config.model, response) {
        (ModelKind::Normal, Response::Real(y)) => {
            let y = layout.gather(y);
            let s = Scale::from_values(&y[..n_train]);
            let ys: Vec<f64> = y.iter().map(|&v| s.forward(v)).collect();
            scale = Some(s);
            jobs.push((
                FitData {
                    kind: ModelKind::Normal,
                    y: ys[..n_train].to_vec(),
                    offset: vec![0.0; data.rows],
                    n_test,
                },
                None,
                (n_test > 0).then(|| ys[n_train..].to_vec()),
            ));
        }
        (ModelKind::Count, Response::Real(y)) => {
            let y = layout.gather(y);
            let sum_y: f64 = y[..n_train].iter().sum();
            let exposure: f64 = raw_offset[..n_train].iter().map(|o| o.exp()).sum();
            intercept = (sum_y.max(0.5) / exposure).ln();
            jobs.push((
                FitData {
                    kind: ModelKind::Count,
                    y: y[..n_train].to_vec(),
                    offset: raw_offset.iter().map(|o| o + intercept).collect(),
                    n_test,
                },
                None,
                (n_test > 0).then(|| y[n_train..].to_vec()),
            ));
        }
        (ModelKind::Classification, Response::Category(labels)) => {
            let labels = layout.gather(labels);
            let mut classes: Vec<String> = labels[..n_train].to_vec();
            classes.sort();
            classes.dedup();
            if classes.len() < 2 {
                return Err(PipelineError::ResponseType(
                    "classification needs at least 2 classes in training data".into(),
                ));
            }
            for c in classes {
                let yc: Vec<f64> = labels
                    .iter()
                    .map(|l| f64::from(u8::from(*l == c)))
                    .collect();
                jobs.push((
                    FitData {
                        kind: ModelKind::Classification,
                        y: yc[..n_train].to_vec(),
                        offset: vec![0.0; data.rows],
                        n_test,
                    },
                    Some(c),
                    (n_test > 0).then(|| yc[n_train..].to_vec()),
                ));
            }
        }
        (kind, _) => {
            return Err(PipelineError::ResponseType(format!(
                "response type does not match model {kind:?}"
            )));
        }
    }

    let sigma_mu = initial_sigma_mu(config.model, t);
    let mut results = Vec::new();
    let mut fits = Vec::new();
    for (fd, label, test_y) in jobs {
        let b = config.b.unwrap_or_else(|| match config.model {
            ModelKind::Normal => (variance(&fd.y) / t as f64).max(1e-12),
            _ => sigma_mu * sigma_mu,
        });
        let init = InitSettings::for_data(&fd, sigma_mu, config.nu);
        let prior = PriorConfig {
            alpha: config.alpha,
            beta: config.beta,
            mu0: 0.0,
            sigma_mu2: init.sigma_mu2,
            a: config.a,
            b,
            nu: config.nu,
            lambda: init.lambda,
        };
        let mut res = run(
            &fd,
            &graphs.per_tree,
            &prior,
            &schedule,
            &init,
            test_y.as_deref(),
            &mut rng,
        )?;
        if let Some(s) = scale {
            let r2 = s.range * s.range;
            for p in &mut res.trace {
                p.train *= r2;
                p.test = p.test.map(|v| v * r2);
                p.sigma *= s.range;
            }
        }
        fits.push(StoredFit {
            label,
            draws: res
                .draws
                .iter()
                .map(|d| StoredDraw {
                    sweep: d.sweep,
                    trees: d.trees.iter().map(|t| t.to_text()).collect(),
                    sigma: scale.map_or(d.sigma, |s| d.sigma * s.range),
                    sigma_mu2: d.sigma_mu2,
                })
                .collect(),
            trace: res.trace.clone(),
            importance: res.importance.clone(),
        });
        results.push(res);
    }

    let mut structural = graphs.structural.clone();
    for (src, spec) in structural.iter_mut().zip(&schema.structural) {
        src.column = spec.column.clone();
    }
    let store = PosteriorStore {
        format: STORE_FORMAT,
        model: config.model,
        config: config.clone(),
        response: schema.response.clone(),
        offset_column: schema.offset.clone(),
        chains: graphs.chains.clone(),
        structural,
        arborescences: graphs.arborescences.clone(),
        scale,
        intercept,
        fits,
    };
    Ok(TrainOutput {
        store,
        layout,
        results,
        graphs,
    })
}

impl TrainOutput {
    /// In-process posterior draws of the linear predictor (offset included,
    /// original units for normal responses) in original row order.
    pub fn phi_draws(&self, fit: usize, offset: &[f64]) -> Vec<Vec<f64>> {
        let n = self.layout.order.len();
        self.results[fit]
            .draws
            .iter()
            .map(|d| {
                let mut out = vec![0.0; n];
                for (p, &row) in self.layout.order.iter().enumerate() {
                    let v =
                        d.phi[p] + (offset.get(row).copied().unwrap_or(0.0) + self.store.intercept);
                    out[row] = match self.store.scale {
                        Some(s) => s.inverse(v),
                        None => v,
                    };
                }
                out
            })
            .collect()
    }
}

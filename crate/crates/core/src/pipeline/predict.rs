//! Posterior prediction, variable importance and partial dependence.

use rayon::prelude::*;

use super::data::Dataset;
use super::store::PosteriorStore;
use super::PipelineError;
use crate::graph::{build_chain_graph, Arborescence};
use crate::likelihood::ModelKind;
use crate::tree::DecisionTree;

/// Shortest interval holding `ceil(mass * m)` of the sorted draws.
pub fn hdi(draws: &[f64], mass: f64) -> (f64, f64) {
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let k = ((mass * m as f64).ceil() as usize).clamp(1, m);
    let mut best = (s[0], s[k - 1]);
    for i in 1..=m - k {
        if s[i + k - 1] - s[i] < best.1 - best.0 {
            best = (s[i], s[i + k - 1]);
        }
    }
    best
}

fn offsets(store: &PosteriorStore, data: &Dataset) -> Result<Vec<f64>, PipelineError> {
    let base = match (&store.offset_column, &data.offset) {
        (Some(_), Some(o)) => o.clone(),
        (Some(c), None) => return Err(PipelineError::MissingColumn(c.clone())),
        (None, _) => vec![0.0; data.rows],
    };
    Ok(base.into_iter().map(|o| o + store.intercept).collect())
}

/// Ensemble sums `[draw][row]` for fit `fit`, routing `data` through the
/// stored trees (offset excluded, fitted units).
pub fn ensemble_draws(
    store: &PosteriorStore,
    graphs: &[Vec<Arborescence>],
    fit: usize,
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let f = store.fits.get(fit).ok_or(PipelineError::EmptyStore)?;
    if f.draws.is_empty() {
        return Err(PipelineError::EmptyStore);
    }
    let n = graphs
        .first()
        .and_then(|g| g.first())
        .map_or(0, |g| g.sample_count());
    f.draws
        .par_iter()
        .map(|d| {
            let mut phi = vec![0.0; n];
            for (t, text) in d.trees.iter().enumerate() {
                let tree = DecisionTree::from_text(text, &graphs[t], n)?;
                for (p, w) in phi.iter_mut().zip(tree.fitted()) {
                    *p += w;
                }
            }
            Ok(phi)
        })
        .collect()
}

/// Per-row posterior summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub model: ModelKind,
    /// Posterior mean on the response scale: the mean function (normal),
    /// the rate (count), or the predicted-class probability (classification).
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Draws `[draw][row]` of the mean function (normal), log-rate (count),
    /// or first-class linear predictor (classification).
    pub draws: Vec<Vec<f64>>,
    pub classes: Vec<String>,
    /// Softmax probabilities `[row][class]`.
    pub probabilities: Vec<Vec<f64>>,
    pub predicted: Vec<String>,
}

fn summarize(
    draws: &[Vec<f64>],
    map: impl Fn(f64) -> f64 + Sync,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = draws.first().map_or(0, Vec::len);
    let m = draws.len() as f64;
    let per_row: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let col: Vec<f64> = draws.iter().map(|d| map(d[i])).collect();
            let (lo, hi) = hdi(&col, 0.95);
            (col.iter().sum::<f64>() / m, lo, hi)
        })
        .collect();
    (
        per_row.iter().map(|r| r.0).collect(),
        per_row.iter().map(|r| r.1).collect(),
        per_row.iter().map(|r| r.2).collect(),
    )
}

/// Softmax of posterior-mean linear predictors; argmax with ties going to
/// the lexicographically first class.
pub fn softmax_classify(mean_phi: &[Vec<f64>], classes: &[String]) -> (Vec<Vec<f64>>, Vec<String>) {
    let n = mean_phi.first().map_or(0, Vec::len);
    let mut probs = Vec::with_capacity(n);
    let mut pred = Vec::with_capacity(n);
    for i in 0..n {
        let max = mean_phi
            .iter()
            .map(|c| c[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = mean_phi.iter().map(|c| (c[i] - max).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / s).collect();
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] || (p[c] == p[best] && classes[c] < classes[best]) {
                best = c;
            }
        }
        pred.push(classes[best].clone());
        probs.push(p);
    }
    (probs, pred)
}

/// Posterior predictive summaries for every row of `data`.
pub fn predict(store: &PosteriorStore, data: &Dataset) -> Result<Prediction, PipelineError> {
    if store.draw_count() == 0 {
        return Err(PipelineError::EmptyStore);
    }
    let graphs = store.bind_graphs(data)?;
    let off = offsets(store, data)?;
    match store.model {
        ModelKind::Normal => {
            let s = store.scale.expect("normal stores carry a scale");
            let draws: Vec<Vec<f64>> = ensemble_draws(store, &graphs, 0)?
                .into_iter()
                .map(|d| {
                    d.into_iter()
                        .zip(&off)
                        .map(|(p, o)| s.inverse(p + o))
                        .collect()
                })
                .collect();
            let (mean, lower, upper) = summarize(&draws, |v| v);
            Ok(Prediction {
                model: store.model,
                mean,
                lower,
                upper,
                draws,
                classes: vec![],
                probabilities: vec![],
                predicted: vec![],
            })
        }
        ModelKind::Count => {
            let draws: Vec<Vec<f64>> = ensemble_draws(store, &graphs, 0)?
                .into_iter()
                .map(|d| d.into_iter().zip(&off).map(|(p, o)| p + o).collect())
                .collect();
            let (mean, lower, upper) = summarize(&draws, f64::exp);
            Ok(Prediction {
                model: store.model,
                mean,
                lower,
                upper,
                draws,
                classes: vec![],
                probabilities: vec![],
                predicted: vec![],
            })
        }
        ModelKind::Classification => {
            let classes = store.classes();
            let mut means = Vec::new();
            let mut first = Vec::new();
            for c in 0..store.fits.len() {
                let d = ensemble_draws(store, &graphs, c)?;
                let (m, _, _) = summarize(&d, |v| v);
                means.push(m);
                if c == 0 {
                    first = d;
                }
            }
            let (probabilities, predicted) = softmax_classify(&means, &classes);
            let mean: Vec<f64> = probabilities
                .iter()
                .map(|p| p.iter().copied().fold(0.0, f64::max))
                .collect();
            let n = mean.len();
            Ok(Prediction {
                model: store.model,
                mean,
                lower: vec![f64::NAN; n],
                upper: vec![f64::NAN; n],
                draws: first,
                classes,
                probabilities,
                predicted,
            })
        }
    }
}

impl Prediction {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("row\tmean\tlower\tupper");
        for c in &self.classes {
            s.push_str(&format!("\tp_{c}"));
        }
        if !self.classes.is_empty() {
            s.push_str("\tclass");
        }
        s.push('\n');
        for i in 0..self.mean.len() {
            s.push_str(&format!(
                "{i}\t{}\t{}\t{}",
                self.mean[i], self.lower[i], self.upper[i]
            ));
            if !self.classes.is_empty() {
                for p in &self.probabilities[i] {
                    s.push_str(&format!("\t{p}"));
                }
                s.push_str(&format!("\t{}", self.predicted[i]));
            }
            s.push('\n');
        }
        s
    }

    /// One row per draw, one column per data row.
    pub fn draws_tsv(&self) -> String {
        let n = self.mean.len();
        let mut s = (0..n)
            .map(|i| format!("row{i}"))
            .collect::<Vec<_>>()
            .join("\t");
        s.push('\n');
        for d in &self.draws {
            s.push_str(
                &d.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("\t"),
            );
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Importance {
    pub features: Vec<(String, usize, f64)>,
    /// True when no retained tree holds a split; shares are then reported as 0.
    pub no_splits: bool,
}

impl Importance {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("feature\tcount\tshare\n");
        for (f, c, sh) in &self.features {
            s.push_str(&format!("{f}\t{c}\t{sh}\n"));
        }
        s
    }
}

/// Split counts per feature label across all fits, with shares.
pub fn variable_importance(store: &PosteriorStore) -> Importance {
    let mut features: Vec<(String, usize, f64)> = Vec::new();
    for f in &store.fits {
        for (label, c) in &f.importance {
            match features.iter_mut().find(|e| &e.0 == label) {
                Some(e) => e.1 += c,
                None => features.push((label.clone(), *c, 0.0)),
            }
        }
    }
    let total: usize = features.iter().map(|e| e.1).sum();
    for e in &mut features {
        e.2 = if total > 0 {
            e.1 as f64 / total as f64
        } else {
            0.0
        };
    }
    Importance {
        features,
        no_splits: total == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdPoint {
    pub value: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub clamped: bool,
}

/// Partial dependence of fit `fit` on the chain-backed `feature`: for every
/// grid value the column is replaced, rows are re-routed, and the mean
/// function is averaged over rows for every draw.
pub fn partial_dependence(
    store: &PosteriorStore,
    data: &Dataset,
    feature: &str,
    grid: &[f64],
    fit: usize,
) -> Result<Vec<PdPoint>, PipelineError> {
    let chain_idx = store
        .chains
        .iter()
        .position(|c| c.column == feature)
        .ok_or_else(|| {
            PipelineError::Schema(format!(
                "{feature:?} is not a chain-graph feature of this model"
            ))
        })?;
    let src = &store.chains[chain_idx];
    let mut graphs = store.bind_graphs(data)?;
    let off = offsets(store, data)?;
    let mut out = Vec::with_capacity(grid.len());
    for &g in grid {
        let v = g.clamp(src.min, src.max);
        let clamped = v != g;
        if clamped {
            log::warn!("grid value {g} outside the training range of {feature:?}; clamped to {v}");
        }
        let chain = build_chain_graph(feature, &vec![v; data.rows], &src.cuts)?;
        for set in &mut graphs {
            set[chain_idx] = chain.clone();
        }
        let draws = ensemble_draws(store, &graphs, fit)?;
        let per_draw: Vec<f64> = draws
            .iter()
            .map(|d| {
                let s: f64 = d
                    .iter()
                    .zip(&off)
                    .map(|(p, o)| match (store.model, store.scale) {
                        (ModelKind::Normal, Some(sc)) => sc.inverse(p + o),
                        _ => p + o,
                    })
                    .sum();
                s / data.rows as f64
            })
            .collect();
        let (lower, upper) = hdi(&per_draw, 0.95);
        out.push(PdPoint {
            value: v,
            mean: per_draw.iter().sum::<f64>() / per_draw.len() as f64,
            lower,
            upper,
            clamped,
        });
    }
    Ok(out)
}

pub fn pd_tsv(points: &[PdPoint]) -> String {
    let mut s = String::from("value\tmean\tlower\tupper\tclamped\n");
    for p in points {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            p.value,
            p.mean,
            p.lower,
            p.upper,
            u8::from(p.clamped)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hdi_of_uniform_grid() {
        let d: Vec<f64> = (0..100).map(f64::from).collect();
        let (lo, hi) = hdi(&d, 0.95);
        assert_eq!(hi - lo, 94.0);
    }

    #[test]
    fn hdi_prefers_dense_region() {
        let mut d = vec![0.0; 96];
        d.extend([100.0, 200.0, 300.0, 400.0]);
        assert_eq!(hdi(&d, 0.95), (0.0, 0.0));
    }

    #[test]
    fn softmax_ties_go_to_first_label() {
        let (p, c) = softmax_classify(&[vec![0.0], vec![0.0]], &["a".into(), "b".into()]);
        assert_eq!(c, vec!["a".to_string()]);
        assert!((p[0][0] - 0.5).abs() < 1e-15);
    }
}

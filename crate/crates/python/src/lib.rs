//! Python bindings: graph construction, tree marginals, and the fit /
//! predict / importance / partial-dependence workflow.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ::gsbart::graph::{build_chain_graph, default_cut_points, sample_arborescence};
use ::gsbart::likelihood::{
    leaf_stats, log_m_hat, GradientTable, ModelKind, PriorConfig, ResponseModel,
};
use ::gsbart::pipeline::config::FitConfig;
use ::gsbart::pipeline::data::{Dataset, LoadedStructural, Response, Schema};
use ::gsbart::pipeline::fit::train;
use ::gsbart::pipeline::predict::{partial_dependence, predict, variable_importance};
use ::gsbart::pipeline::store::PosteriorStore;
use ::gsbart::pipeline::synth::generate_synthetic;
use ::gsbart::{Arborescence, StructuralGraph};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `(name, vertex_count, edges, assignment)` of a structural graph.
type StructuralArg = (String, usize, Vec<(usize, usize)>, Vec<usize>);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Rooted spanning tree over bins, with samples assigned to vertices.
#[pyclass(name = "Arborescence", module = "gsbart_py", skip_from_py_object)]
#[derive(Clone)]
struct PyArborescence {
    inner: Arborescence,
}

#[pymethods]
impl PyArborescence {
    #[new]
    fn new(label: String, parent: Vec<Option<usize>>, vertex_of: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: Arborescence::new(label, parent, vertex_of).map_err(err)?,
        })
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.feature_label().to_string()
    }

    fn vertex_count(&self) -> usize {
        self.inner.vertex_count()
    }

    fn root(&self) -> usize {
        self.inner.root()
    }

    fn parents(&self) -> Vec<Option<usize>> {
        self.inner.parents().to_vec()
    }

    fn postorder(&self) -> Vec<usize> {
        self.inner.postorder().to_vec()
    }

    fn descendants(&self, v: usize) -> PyResult<Vec<usize>> {
        Ok(self
            .inner
            .descendants(v)
            .map_err(err)?
            .into_iter()
            .collect())
    }

    /// Samples left and right of cutting the edge above `edge`.
    fn bipartition(&self, edge: usize) -> PyResult<(Vec<usize>, Vec<usize>)> {
        self.inner.bipartition(edge).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Arborescence(label={:?}, vertices={}, samples={})",
            self.inner.feature_label(),
            self.inner.vertex_count(),
            self.inner.sample_count()
        )
    }
}

/// Chain graph over numeric `values` cut at `cuts` (computed from quantiles
/// when omitted).
#[pyfunction]
#[pyo3(signature = (label, values, cuts=None, bins=100))]
fn chain_graph(
    label: String,
    values: Vec<f64>,
    cuts: Option<Vec<f64>>,
    bins: usize,
) -> PyResult<PyArborescence> {
    let cuts = match cuts {
        Some(c) => c,
        None => default_cut_points(&values, bins).map_err(err)?,
    };
    Ok(PyArborescence {
        inner: build_chain_graph(label, &values, &cuts).map_err(err)?,
    })
}

/// Uniform random spanning arborescence of an undirected graph.
#[pyfunction]
#[pyo3(signature = (label, vertex_count, edges, assignment, seed=0))]
fn random_arborescence(
    label: String,
    vertex_count: usize,
    edges: Vec<(usize, usize)>,
    assignment: Vec<usize>,
    seed: u64,
) -> PyResult<PyArborescence> {
    let g = StructuralGraph::new(vertex_count, edges, assignment).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PyArborescence {
        inner: sample_arborescence(label, &g, &mut rng).map_err(err)?,
    })
}

fn response_model(model: &str, sigma: f64) -> PyResult<ResponseModel> {
    let kind: ModelKind = model.parse().map_err(err)?;
    Ok(match kind {
        ModelKind::Normal => ResponseModel::Normal { sigma },
        ModelKind::Count => ResponseModel::CountVariance,
        ModelKind::Classification => ResponseModel::BinaryLogistic,
    })
}

/// Log marginal likelihood of a single leaf holding every sample, under the
/// quadratic approximation at `phi_hat` with tree contribution `phi_t`.
#[pyfunction]
#[pyo3(signature = (y, phi_hat, phi_t, model="normal", sigma=1.0, mu0=0.0, sigma_mu2=1.0))]
fn leaf_log_marginal(
    y: Vec<f64>,
    phi_hat: Vec<f64>,
    phi_t: Vec<f64>,
    model: &str,
    sigma: f64,
    mu0: f64,
    sigma_mu2: f64,
) -> PyResult<f64> {
    if phi_hat.len() != y.len() || phi_t.len() != y.len() {
        return Err(PyValueError::new_err(
            "y, phi_hat and phi_t must have equal length",
        ));
    }
    let m = response_model(model, sigma)?;
    m.validate().map_err(err)?;
    let g = GradientTable::build(&m, &y, &phi_hat, &phi_t).map_err(err)?;
    let idx: Vec<usize> = (0..y.len()).collect();
    let prior = PriorConfig {
        mu0,
        sigma_mu2,
        ..PriorConfig::default()
    };
    prior.validate().map_err(err)?;
    Ok(log_m_hat(leaf_stats(&idx, &g), g.const_term(&idx), &prior))
}

/// Synthetic data as a dict of columns (`y`, `f`, `test`, covariates).
#[pyfunction]
#[pyo3(signature = (kind, n, sigma=1.0, seed=1, test_fraction=0.2))]
fn synth<'py>(
    py: Python<'py>,
    kind: &str,
    n: usize,
    sigma: f64,
    seed: u64,
    test_fraction: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let d = generate_synthetic(kind.parse().map_err(err)?, n, sigma, seed, test_fraction)
        .map_err(err)?;
    let out = PyDict::new(py);
    for (name, col) in &d.columns {
        out.set_item(name, col.clone())?;
    }
    if !d.edges.is_empty() {
        out.set_item("edges", d.edges.clone())?;
    }
    Ok(out)
}

fn make_dataset(
    features: BTreeMap<String, Vec<f64>>,
    y: Option<Vec<f64>>,
    labels: Option<Vec<String>>,
    test: Option<Vec<bool>>,
    structural: Vec<StructuralArg>,
) -> PyResult<Dataset> {
    let rows = features
        .values()
        .next()
        .map(Vec::len)
        .or(y.as_ref().map(Vec::len))
        .or(labels.as_ref().map(Vec::len))
        .or(structural.first().map(|s| s.3.len()))
        .unwrap_or(0);
    let lens = features
        .values()
        .map(Vec::len)
        .chain(y.iter().map(Vec::len))
        .chain(labels.iter().map(Vec::len))
        .chain(test.iter().map(Vec::len))
        .chain(structural.iter().map(|s| s.3.len()));
    if let Some(bad) = lens.into_iter().find(|&l| l != rows) {
        return Err(PyValueError::new_err(format!(
            "all columns must have {rows} rows, found one with {bad}"
        )));
    }
    let response = match (y, labels) {
        (Some(_), Some(_)) => {
            return Err(PyValueError::new_err("pass either y or labels, not both"))
        }
        (Some(y), None) => Some(Response::Real(y)),
        (None, Some(l)) => Some(Response::Category(l)),
        (None, None) => None,
    };
    let structural = structural
        .into_iter()
        .map(|(name, nv, edges, assignment)| {
            Ok(LoadedStructural {
                name,
                graph: StructuralGraph::new(nv, edges, assignment).map_err(err)?,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(Dataset {
        response,
        features: features.into_iter().collect(),
        offset: None,
        is_test: test,
        truth: None,
        structural,
        rows,
    })
}

/// Fitted posterior: retained tree draws plus graph recipes.
#[pyclass(name = "Model", module = "gsbart_py")]
struct PyModel {
    store: PosteriorStore,
}

#[pymethods]
impl PyModel {
    /// Fits a model. `features` maps column names to values; pass `y` for
    /// normal and count models or `labels` for classification.
    /// `structural` holds `(name, vertex_count, edges, assignment)` tuples.
    /// Remaining keyword arguments override fit configuration fields.
    #[staticmethod]
    #[pyo3(signature = (features, y=None, labels=None, test=None, structural=Vec::new(), model="normal", **config))]
    fn fit(
        features: BTreeMap<String, Vec<f64>>,
        y: Option<Vec<f64>>,
        labels: Option<Vec<String>>,
        test: Option<Vec<bool>>,
        structural: Vec<StructuralArg>,
        model: &str,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let mut cfg = FitConfig {
            model: model.parse().map_err(err)?,
            ..FitConfig::default()
        };
        if let Some(kw) = config {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                match key.as_str() {
                    "trees" => cfg.trees = v.extract()?,
                    "sweeps" => cfg.sweeps = v.extract()?,
                    "burn_in" => cfg.burn_in = v.extract()?,
                    "steps" => cfg.steps = v.extract()?,
                    "depth_cap" => cfg.depth_cap = v.extract()?,
                    "alpha" => cfg.alpha = v.extract()?,
                    "beta" => cfg.beta = v.extract()?,
                    "seed" => cfg.seed = v.extract()?,
                    "bins" => cfg.bins = v.extract()?,
                    "arborescences" => cfg.arborescences = v.extract()?,
                    "workers" => cfg.workers = Some(v.extract()?),
                    "test_fraction" => cfg.test_fraction = v.extract()?,
                    other => {
                        return Err(PyValueError::new_err(format!("unknown option {other:?}")))
                    }
                }
            }
        }
        let names: Vec<String> = features.keys().cloned().collect();
        let data = make_dataset(features, y, labels, test, structural)?;
        let schema = Schema {
            response: "y".into(),
            features: names,
            offset: None,
            split: None,
            truth: None,
            structural: vec![],
        };
        let out = train(&data, &schema, &cfg).map_err(err)?;
        Ok(Self { store: out.store })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            store: PosteriorStore::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.store.save(&path).map_err(err)
    }

    #[getter]
    fn draw_count(&self) -> usize {
        self.store.draw_count()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.store.classes()
    }

    /// Dict with `mean`, `lower`, `upper` (95% HDI) and, for
    /// classification, `predicted` and `probabilities`.
    #[pyo3(signature = (features, structural=Vec::new()))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        features: BTreeMap<String, Vec<f64>>,
        structural: Vec<StructuralArg>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let data = make_dataset(features, None, None, None, structural)?;
        let p = predict(&self.store, &data).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("mean", p.mean)?;
        out.set_item("lower", p.lower)?;
        out.set_item("upper", p.upper)?;
        if !p.classes.is_empty() {
            out.set_item("classes", p.classes)?;
            out.set_item("predicted", p.predicted)?;
            out.set_item("probabilities", p.probabilities)?;
        }
        Ok(out)
    }

    /// `(feature, split count, share)` triples.
    fn importance(&self) -> Vec<(String, usize, f64)> {
        variable_importance(&self.store).features
    }

    /// `(value, mean, lower, upper)` per grid value.
    #[pyo3(signature = (features, feature, grid, fit=0))]
    fn partial_dependence(
        &self,
        features: BTreeMap<String, Vec<f64>>,
        feature: &str,
        grid: Vec<f64>,
        fit: usize,
    ) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        let data = make_dataset(features, None, None, None, vec![])?;
        let pts = partial_dependence(&self.store, &data, feature, &grid, fit).map_err(err)?;
        Ok(pts
            .into_iter()
            .map(|p| (p.value, p.mean, p.lower, p.upper))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(model={:?}, draws={})",
            self.store.model,
            self.store.draw_count()
        )
    }
}

#[pymodule]
fn gsbart_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyArborescence>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(chain_graph, m)?)?;
    m.add_function(wrap_pyfunction!(random_arborescence, m)?)?;
    m.add_function(wrap_pyfunction!(leaf_log_marginal, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}

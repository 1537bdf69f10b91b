//! Python bindings for `fairrank`.
//!
//! The module is importable as `fairrank` once the compiled library is on
//! `sys.path` under that name (see `python/smoke_test.py`).

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use fairrank::data::{self, Group, SyntheticSpec};
use fairrank::eval::{self, EvalProtocol, KMetrics, SweepData, TradeoffRow};
use fairrank::fairness::{self, SmoothIndicator};
use fairrank::gradcheck;
use fairrank::lambda_solver::{self, SmoothingParams};
use fairrank::model::{FactorizationScorer, ScoringModel};
use fairrank::optimizer::{self, TraceRecord, FIELDS};

fn to_py(e: fairrank::Error) -> PyErr {
    match e {
        fairrank::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        fairrank::Error::Config(_)
        | fairrank::Error::Parse { .. }
        | fairrank::Error::Duplicate { .. }
        | fairrank::Error::EmptyDataset
        | fairrank::Error::Lookup { .. }
        | fairrank::Error::Range { .. }
        | fairrank::Error::EmptyBatch => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn groups_from(codes: &[u8]) -> PyResult<Vec<Group>> {
    codes
        .iter()
        .map(|&c| {
            Group::from_code(c).ok_or_else(|| PyValueError::new_err(format!("group must be 0 or 1, got {c}")))
        })
        .collect()
}

/// `(query row, item ids, labels, group codes)` of one query.
type QueryView = (usize, Vec<usize>, Vec<f64>, Vec<u8>);

/// Query-grouped relevance data with a shared item catalog.
#[pyclass(name = "Dataset", module = "fairrank", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Reads a `query_id,item_id,relevance,group` CSV file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_csv(path).map_err(to_py)?,
        })
    }

    /// Builds a dataset from `(query_id, item_id, relevance, group)` tuples.
    #[staticmethod]
    fn from_records(records: Vec<(String, String, f64, u8)>) -> PyResult<Self> {
        let rows = records
            .into_iter()
            .map(|(q, x, r, g)| Ok((q, x, r, groups_from(&[g])?[0])))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: data::Dataset::from_records(rows).map_err(to_py)?,
        })
    }

    /// Synthetic data where group A's latent quality is shifted down by `bias`.
    #[staticmethod]
    #[pyo3(signature = (num_queries, items_per_query, minority_fraction=0.3, bias=2.0, seed=0))]
    fn synthetic(
        num_queries: usize,
        items_per_query: usize,
        minority_fraction: f64,
        bias: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            num_queries,
            items_per_query,
            minority_fraction,
            bias,
            seed,
        };
        Ok(Self {
            inner: data::generate_synthetic(&spec).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_csv(path).map_err(to_py)
    }

    /// Per-query `(train, valid, test)` split.
    #[pyo3(signature = (fractions=(0.8, 0.1, 0.1), seed=0))]
    fn split(&self, fractions: (f64, f64, f64), seed: u64) -> PyResult<(Self, Self, Self)> {
        let s = data::split(&self.inner, fractions, seed).map_err(to_py)?;
        Ok((
            Self { inner: s.train },
            Self { inner: s.valid },
            Self { inner: s.test },
        ))
    }

    #[getter]
    fn num_queries(&self) -> usize {
        self.inner.num_queries()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn total_pairs(&self) -> usize {
        self.inner.total_pairs()
    }

    /// Query identifiers in dataset order.
    fn query_ids(&self) -> Vec<String> {
        self.inner.queries().iter().map(|q| q.id.clone()).collect()
    }

    /// `(query row, item ids, labels, groups)` for the `i`-th query.
    fn query(&self, i: usize) -> PyResult<QueryView> {
        let q = self.inner.queries().get(i).ok_or_else(|| {
            PyValueError::new_err(format!("query {i} out of range ({} queries)", self.inner.num_queries()))
        })?;
        Ok((
            q.index,
            q.item_ids(),
            q.labels(),
            q.groups().into_iter().map(Group::code).collect(),
        ))
    }

    fn __len__(&self) -> usize {
        self.inner.total_pairs()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(queries={}, items={}, pairs={})",
            self.inner.num_queries(),
            self.inner.num_items(),
            self.inner.total_pairs()
        )
    }
}

/// Bounded factorization scorer `B * tanh((u_q . v_x + b_x) / s)`.
#[pyclass(name = "Model", module = "fairrank", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: FactorizationScorer,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized model sized for `dataset`.
    #[new]
    #[pyo3(signature = (dataset, dim=16, score_bound=10.0, score_scale=1.0, seed=0))]
    fn new(dataset: &PyDataset, dim: usize, score_bound: f64, score_scale: f64, seed: u64) -> PyResult<Self> {
        let d = &dataset.inner;
        Ok(Self {
            inner: FactorizationScorer::init(d.query_slots(), d.num_items(), dim, score_bound, score_scale, seed)
                .map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: FactorizationScorer::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn score(&self, query: usize, item: usize) -> PyResult<f64> {
        self.inner.score(query, item).map_err(to_py)
    }

    fn scores(&self, query: usize, items: Vec<usize>) -> PyResult<Vec<f64>> {
        self.inner.scores(query, &items).map_err(to_py)
    }

    fn score_gradient(&self, query: usize, item: usize) -> PyResult<Vec<f64>> {
        self.inner.score_gradient(query, item).map_err(to_py)
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.inner.params().values().to_vec()
    }

    #[setter]
    fn set_params(&mut self, values: Vec<f64>) -> PyResult<()> {
        let target = self.inner.params_mut().values_mut();
        if values.len() != target.len() {
            return Err(PyValueError::new_err(format!(
                "expected {} parameters, got {}",
                target.len(),
                values.len()
            )));
        }
        target.copy_from_slice(&values);
        Ok(())
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(queries={}, items={}, dim={})",
            self.inner.num_queries(),
            self.inner.num_items(),
            self.inner.dim()
        )
    }
}

/// Training configuration; keyword arguments use the config-file keys.
#[pyclass(name = "TrainConfig", module = "fairrank", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTrainConfig {
    inner: optimizer::TrainConfig,
}

fn value_text(v: &Bound<'_, PyAny>) -> PyResult<String> {
    Ok(v.str()?.to_string())
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = optimizer::TrainConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                inner.set(&key, &value_text(&v)?).map_err(to_py)?;
            }
        }
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: optimizer::TrainConfig::load(path).map_err(to_py)?,
        })
    }

    /// Every accepted key, in documentation order.
    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        FIELDS.iter().map(|f| f.name).collect()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        self.inner.set(key, &value_text(value)?).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(K={}, C={}, mode={})", self.inner.k, self.inner.c, self.inner.mode)
    }
}

/// Outcome of [`train`]: final and best models plus the logged trace.
#[pyclass(name = "TrainResult", module = "fairrank", frozen)]
pub struct PyTrainResult {
    #[pyo3(get)]
    model: Py<PyModel>,
    #[pyo3(get)]
    best_model: Py<PyModel>,
    #[pyo3(get)]
    best_step: usize,
    #[pyo3(get)]
    z_norms: Vec<f64>,
    records: Vec<TraceRecord>,
}

#[pymethods]
impl PyTrainResult {
    /// One dict per logged step.
    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let list = PyList::empty(py);
        for r in &self.records {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("epoch", r.epoch)?;
            d.set_item("z_norm", r.z_norm)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("valid_ndcg", r.valid_ndcg)?;
            d.set_item("valid_mae", r.valid_mae)?;
            d.set_item("valid_mse", r.valid_mse)?;
            list.append(d)?;
        }
        Ok(list)
    }
}

/// Trains a new model on `train`, validating on `valid` when given.
#[pyfunction]
#[pyo3(signature = (train, config, valid=None))]
fn train(
    py: Python<'_>,
    train: &PyDataset,
    config: &PyTrainConfig,
    valid: Option<&PyDataset>,
) -> PyResult<PyTrainResult> {
    let out = py
        .detach(|| optimizer::train_new_model(&train.inner, valid.map(|v| &v.inner), &config.inner))
        .map_err(to_py)?;
    Ok(PyTrainResult {
        model: Py::new(py, PyModel { inner: out.final_model })?,
        best_model: Py::new(py, PyModel { inner: out.best_model })?,
        best_step: out.best_step,
        z_norms: out.trace.z_norms.clone(),
        records: out.trace.records.clone(),
    })
}

fn metrics_dict<'py>(py: Python<'py>, k: &KMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("K", k.k)?;
    d.set_item("ndcg_mean", k.ndcg_mean)?;
    d.set_item("ndcg_std", k.ndcg_std)?;
    d.set_item("mae", k.mae)?;
    d.set_item("mse", k.mse)?;
    d.set_item("ndcg_skipped", k.ndcg_skipped)?;
    d.set_item("fairness_skipped", k.fairness_skipped)?;
    Ok(d)
}

fn row_dict<'py>(py: Python<'py>, r: &TradeoffRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("C", r.c)?;
    d.set_item("K", r.k)?;
    d.set_item("ndcg_mean", r.ndcg_mean)?;
    d.set_item("ndcg_std", r.ndcg_std)?;
    d.set_item("mae", r.mae)?;
    d.set_item("mse", r.mse)?;
    d.set_item("ndcg_skipped", r.ndcg_skipped)?;
    d.set_item("fairness_skipped", r.fairness_skipped)?;
    d.set_item("status", &r.status)?;
    Ok(d)
}

/// NDCG@K and exposure-gap metrics per cutoff on sampled evaluation lists.
/// Items of the datasets in `exclude` are never used as unrated items.
#[pyfunction]
#[pyo3(signature = (model, dataset, k_list=vec![50, 100, 200], relevant=5, irrelevant=300, seed=0, exclude=vec![]))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    dataset: &PyDataset,
    k_list: Vec<usize>,
    relevant: usize,
    irrelevant: usize,
    seed: u64,
    exclude: Vec<PyRef<'py, PyDataset>>,
) -> PyResult<Bound<'py, PyList>> {
    let proto = EvalProtocol {
        relevant_per_query: relevant,
        irrelevant_per_query: irrelevant,
        k_list,
        seed,
    };
    let excluded: Vec<&data::Dataset> = exclude.iter().map(|d| &d.inner).collect();
    let metrics = eval::evaluate_excluding(&model.inner, &dataset.inner, &proto, &excluded).map_err(to_py)?;
    let list = PyList::empty(py);
    for k in &metrics {
        list.append(metrics_dict(py, k)?)?;
    }
    Ok(list)
}

/// Trains one model per fairness weight and evaluates each on `test`.
/// Returns one dict per `(C, K)` row.
#[pyfunction]
#[pyo3(signature = (train, test, config, c_grid, valid=None, k_list=vec![50, 100, 200], parallel=false))]
#[allow(clippy::too_many_arguments)]
fn sweep<'py>(
    py: Python<'py>,
    train: &PyDataset,
    test: &PyDataset,
    config: &PyTrainConfig,
    c_grid: Vec<f64>,
    valid: Option<&PyDataset>,
    k_list: Vec<usize>,
    parallel: bool,
) -> PyResult<Bound<'py, PyList>> {
    let proto = EvalProtocol {
        k_list,
        seed: config.inner.seed,
        ..EvalProtocol::default()
    };
    let data = SweepData {
        train: &train.inner,
        valid: valid.map(|v| &v.inner),
        test: &test.inner,
    };
    let result = py
        .detach(|| eval::tradeoff_sweep(data, &config.inner, &c_grid, &proto, parallel))
        .map_err(to_py)?;
    let list = PyList::empty(py);
    for r in &result.report.rows {
        list.append(row_dict(py, r)?)?;
    }
    Ok(list)
}

/// Softmax exposures of a score list.
#[pyfunction]
fn exposures(scores: Vec<f64>) -> Vec<f64> {
    fairness::exposures(&scores)
}

/// `1/2 (mean_A e - mean_B e)^2`, or `None` when a group is empty.
#[pyfunction]
fn full_list_disparity(scores: Vec<f64>, groups: Vec<u8>) -> PyResult<Option<f64>> {
    Ok(fairness::full_list_disparity_from_scores(&scores, &groups_from(&groups)?))
}

/// Signed exact top-K exposure gap; ties broken by position.
#[pyfunction]
fn topk_disparity(scores: Vec<f64>, groups: Vec<u8>, k: usize) -> PyResult<Option<f64>> {
    let ids: Vec<usize> = (0..scores.len()).collect();
    Ok(fairness::topk_disparity_exact_from_scores(&scores, &groups_from(&groups)?, &ids, k))
}

/// Smoothed top-K disparity `U` at threshold `lam`.
#[pyfunction]
#[pyo3(signature = (scores, groups, lam, tau_psi=0.1))]
fn topk_disparity_smoothed(scores: Vec<f64>, groups: Vec<u8>, lam: f64, tau_psi: f64) -> PyResult<Option<f64>> {
    Ok(fairness::topk_disparity_surrogate_from_scores(
        &scores,
        &groups_from(&groups)?,
        lam,
        SmoothIndicator::sigmoid(tau_psi),
    ))
}

/// Minimizer of the smoothed threshold objective for a score list.
#[pyfunction]
#[pyo3(signature = (scores, k, tau1=1e-2, tau2=1e-4, epsilon=0.5, tol=1e-10))]
fn solve_lambda(scores: Vec<f64>, k: usize, tau1: f64, tau2: f64, epsilon: f64, tol: f64) -> PyResult<f64> {
    let p = SmoothingParams { tau1, tau2, epsilon, k };
    lambda_solver::solve_lambda_exactly_smoothed(&scores, &p, tol).map_err(to_py)
}

/// NDCG@K of a scored list; `None` when no label is positive.
#[pyfunction]
fn ndcg_at_k(scores: Vec<f64>, labels: Vec<f64>, k: usize) -> Option<f64> {
    let ids: Vec<usize> = (0..scores.len()).collect();
    eval::ndcg_at_k_from_scores(&scores, &labels, &ids, k)
}

/// Maximum relative error of each finite-difference suite.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn grad_check<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let suites = py.detach(|| gradcheck::run_all(seed)).map_err(to_py)?;
    let d = PyDict::new(py);
    for s in &suites {
        d.set_item(s.suite, s.max_error())?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "fairrank")]
pub fn fairrank_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(exposures, m)?)?;
    m.add_function(wrap_pyfunction!(full_list_disparity, m)?)?;
    m.add_function(wrap_pyfunction!(topk_disparity, m)?)?;
    m.add_function(wrap_pyfunction!(topk_disparity_smoothed, m)?)?;
    m.add_function(wrap_pyfunction!(solve_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

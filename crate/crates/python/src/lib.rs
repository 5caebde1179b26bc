use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nodecg::baseline::{sgd_train as core_sgd_train, SgdConfig};
use nodecg::cost::{cost as core_cost, LabeledSet};
use nodecg::datasets::{self, DatasetKind, DatasetSpec};
use nodecg::gradient::{evaluate_batch, sobolev_representative, w12_gradient};
use nodecg::io::Checkpoint;
use nodecg::mesh::{init_params, CostWeights, ParamTrajectory, TimeMesh};
use nodecg::model::NodeModel;
use nodecg::ncg::{ncg_train as core_ncg_train, DescentSpace, EvalSets, TrainConfig};
use nodecg::ode::SolverOptions;
use nodecg::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Invalid(_) | Error::Shape(_) | Error::Parse { .. } | Error::Domain { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn solver(mode: &str) -> PyResult<SolverOptions> {
    Ok(SolverOptions { mode: parse(mode)?, ..SolverOptions::default() })
}

fn weights(loss: &str, mu4: f64, mu5: f64) -> PyResult<CostWeights> {
    let w = match parse::<DatasetKind>(loss)? {
        DatasetKind::Moons => CostWeights::moons(),
        DatasetKind::Circles => CostWeights::circles(),
    };
    Ok(CostWeights { mu4, mu5, ..w })
}

/// Labelled points with 0-based class ids.
#[pyclass(name = "Dataset", module = "nodecg_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(LabeledSet);

#[pymethods]
impl PyDataset {
    #[new]
    fn new(inputs: Vec<Vec<f64>>, classes: Vec<usize>) -> PyResult<Self> {
        let n = inputs.first().map_or(2, Vec::len);
        LabeledSet::new(n, inputs, classes).map(PyDataset).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (kind, count, sigma, seed, augment = false))]
    fn generate(kind: &str, count: usize, sigma: f64, seed: u64, augment: bool) -> PyResult<Self> {
        let spec = DatasetSpec { kind: parse(kind)?, count, noise_sigma: sigma, seed, augmented: augment };
        spec.generate().map(PyDataset).map_err(to_py)
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        self.0.inputs().to_vec()
    }

    #[getter]
    fn classes(&self) -> Vec<usize> {
        self.0.classes().to_vec()
    }

    #[getter]
    fn n_state(&self) -> usize {
        self.0.n_state()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Piecewise-linear parameter trajectory on a uniform mesh.
#[pyclass(name = "Params", module = "nodecg_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyParams(ParamTrajectory);

#[pymethods]
impl PyParams {
    /// Constant parameters drawn uniformly from `[-0.1, 0.1]`.
    #[staticmethod]
    #[pyo3(signature = (seed, n_state = 2, t_final = 5.0, intervals = 250))]
    fn init(seed: u64, n_state: usize, t_final: f64, intervals: usize) -> PyResult<Self> {
        let mesh = Arc::new(TimeMesh::uniform(t_final, intervals).map_err(to_py)?);
        Ok(PyParams(init_params(seed, n_state, mesh)))
    }

    /// One row of `(W11, W21, .., b1, ..)` per mesh node.
    #[staticmethod]
    #[pyo3(signature = (rows, t_final = 5.0))]
    fn from_rows(rows: Vec<Vec<f64>>, t_final: f64) -> PyResult<Self> {
        if rows.len() < 2 {
            return Err(PyValueError::new_err("need at least two mesh nodes"));
        }
        let m = rows[0].len();
        let n_state = (1..=m).find(|n| n * n + n == m).ok_or_else(|| PyValueError::new_err("bad row width"))?;
        let mesh = Arc::new(TimeMesh::uniform(t_final, rows.len() - 1).map_err(to_py)?);
        let flat = rows.into_iter().flatten().collect();
        ParamTrajectory::from_values(mesh, n_state, flat).map(PyParams).map_err(to_py)
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.mesh().nodes().to_vec()
    }

    #[getter]
    fn n_state(&self) -> usize {
        self.0.n_state()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.0.mesh().node_count()).map(|i| self.0.node(i).to_vec()).collect()
    }

    fn at(&self, t: f64) -> PyResult<Vec<f64>> {
        self.0.interpolate(t).map_err(to_py)
    }

    fn l2_norm(&self) -> f64 {
        self.0.l2_norm_sq().sqrt()
    }

    fn w12_norm(&self) -> f64 {
        self.0.w12_norm_sq().sqrt()
    }

    /// Apply the W^{1,2} Riesz map componentwise.
    fn sobolev(&self) -> PyResult<Self> {
        nodecg::gradient::sobolev_transform(&self.0.as_direction()).map(|g| PyParams(g.as_params())).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Params(n_state={}, nodes={}, t_final={})",
            self.0.n_state(),
            self.0.mesh().node_count(),
            self.0.mesh().t_final()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (params, inputs, solver_mode = "adaptive"))]
fn predict(params: &PyParams, inputs: Vec<Vec<f64>>, solver_mode: &str) -> PyResult<Vec<Vec<f64>>> {
    NodeModel::new(&params.0).predict(&inputs, &solver(solver_mode)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (params, data, solver_mode = "adaptive"))]
fn accuracy(params: &PyParams, data: &PyDataset, solver_mode: &str) -> PyResult<f64> {
    datasets::accuracy(&params.0, &data.0, &solver(solver_mode)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (params, data, loss = "moons", mu4 = 0.0, mu5 = 0.0, solver_mode = "adaptive"))]
fn cost(params: &PyParams, data: &PyDataset, loss: &str, mu4: f64, mu5: f64, solver_mode: &str) -> PyResult<f64> {
    core_cost(&params.0, &data.0, &weights(loss, mu4, mu5)?, &solver(solver_mode)?).map_err(to_py)
}

/// `(cost, gradient)` with the gradient taken in `space` ("l2" or "w12").
#[pyfunction]
#[pyo3(signature = (params, data, space = "l2", loss = "moons", mu4 = 0.0, mu5 = 0.0, solver_mode = "adaptive"))]
fn gradient(
    params: &PyParams,
    data: &PyDataset,
    space: &str,
    loss: &str,
    mu4: f64,
    mu5: f64,
    solver_mode: &str,
) -> PyResult<(f64, PyParams)> {
    let w = weights(loss, mu4, mu5)?;
    let ev = evaluate_batch(&params.0, &data.0, &w, &solver(solver_mode)?).map_err(to_py)?;
    let g = match parse::<DescentSpace>(space)? {
        DescentSpace::L2 => ev.gradient,
        DescentSpace::W12 => w12_gradient(&ev.gradient, &params.0, w.mu5).map_err(to_py)?,
    };
    Ok((ev.cost, PyParams(g.as_params())))
}

/// Riesz representative of samples `u` on a uniform mesh over `[0, t_final]`.
#[pyfunction]
fn sobolev_transform(u: Vec<f64>, t_final: f64) -> PyResult<Vec<f64>> {
    if u.len() < 2 {
        return Err(PyValueError::new_err("need at least two samples"));
    }
    let mesh = TimeMesh::uniform(t_final, u.len() - 1).map_err(to_py)?;
    sobolev_representative(&u, &mesh).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (train, clean = None, noisy = None, descent = "l2", loss = "moons", epochs = 5, seed = 0, mu4 = 0.0, mu5 = 0.0))]
#[allow(clippy::too_many_arguments)]
fn ncg_train<'py>(
    py: Python<'py>,
    train: &PyDataset,
    clean: Option<&PyDataset>,
    noisy: Option<&PyDataset>,
    descent: &str,
    loss: &str,
    epochs: usize,
    seed: u64,
    mu4: f64,
    mu5: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mut config = TrainConfig::new(parse(descent)?, weights(loss, mu4, mu5)?, seed);
    config.epochs = epochs;
    let sets = EvalSets { clean: clean.map(|d| &d.0), noisy: noisy.map(|d| &d.0) };
    let state = py
        .detach(|| core_ncg_train(&config, &train.0, &sets))
        .map_err(|f| to_py(f.error))?;
    let out = PyDict::new(py);
    out.set_item("params", PyParams(state.params.clone()))?;
    out.set_item("first_perfect_clean", state.first_perfect_clean())?;
    out.set_item("best_clean", state.best_clean())?;
    out.set_item("best_noisy", state.best_noisy())?;
    let evals: Vec<(f64, Option<f64>, Option<f64>)> =
        state.evaluations.iter().map(|e| (e.epoch_count, e.clean_acc, e.noisy_acc)).collect();
    out.set_item("evaluations", evals)?;
    let costs: Vec<f64> = state.records.iter().map(|r| r.cost).collect();
    out.set_item("costs", costs)?;
    let norms: Vec<(f64, f64)> = state.records.iter().map(|r| (r.l2_norm, r.w12_norm)).collect();
    out.set_item("norms", norms)?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (train, clean = None, loss = "moons", epochs = 15, seed = 0))]
fn sgd_train<'py>(
    py: Python<'py>,
    train: &PyDataset,
    clean: Option<&PyDataset>,
    loss: &str,
    epochs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let config = SgdConfig::new(weights(loss, 0.0, 0.0)?, epochs, seed);
    let run = py.detach(|| core_sgd_train(&config, &train.0, clean.map(|d| &d.0), None)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("params", PyParams(run.net.to_trajectory().map_err(to_py)?))?;
    let recs: Vec<(usize, f64, f64, Option<f64>)> =
        run.records.iter().map(|r| (r.epoch, r.loss, r.train_acc, r.clean_acc)).collect();
    out.set_item("records", recs)?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (params, path, loss = "moons", seed = 0))]
fn save_checkpoint(params: &PyParams, path: PathBuf, loss: &str, seed: u64) -> PyResult<()> {
    Checkpoint::new(params.0.clone(), weights(loss, 0.0, 0.0)?, seed).save(&path).map_err(to_py)
}

#[pyfunction]
fn load_checkpoint(path: PathBuf) -> PyResult<PyParams> {
    Checkpoint::load(&path).map(|c| PyParams(c.params)).map_err(to_py)
}

#[pymodule]
fn nodecg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(gradient, m)?)?;
    m.add_function(wrap_pyfunction!(sobolev_transform, m)?)?;
    m.add_function(wrap_pyfunction!(ncg_train, m)?)?;
    m.add_function(wrap_pyfunction!(sgd_train, m)?)?;
    m.add_function(wrap_pyfunction!(save_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    Ok(())
}

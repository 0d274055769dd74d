//! Python bindings. Vectors and matrices cross the boundary as plain lists;
//! matrices are lists of rows.

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use lowrank::geosgd::{self, BoostConfig};
use lowrank::harness::{self, ExperimentConfig};
use lowrank::hermite::{self, CoefficientVector};
use lowrank::model::{self, Instance, InstanceOracle, Parameters, ReplayOracle, SampleBatch, SampleOracle};
use lowrank::subspace::{self, Frame};
use lowrank::trimmed_pca::TrimConfig;

create_exception!(lowrank_py, NumericalGuardError, PyException, "A divergence or calibration guard aborted the run.");

fn to_py(err: lowrank::Error) -> PyErr {
    if err.is_numerical_guard() {
        NumericalGuardError::new_err(err.to_string())
    } else {
        PyValueError::new_err(err.to_string())
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != ncols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|row| row.iter().copied().collect()).collect()
}

#[pyclass(name = "Frame", module = "lowrank_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyFrame(Frame);

#[pymethods]
impl PyFrame {
    /// Orthonormal `n × r` frame given as `n` rows of length `r`.
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Frame::new(matrix_from_rows(&rows)?).map(PyFrame).map_err(to_py)
    }

    #[staticmethod]
    fn random(n: usize, r: usize, seed: u64) -> PyResult<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        subspace::random_frame(n, r, &mut rng).map(PyFrame).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn r(&self) -> usize {
        self.0.r()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(self.0.matrix())
    }

    fn defect(&self) -> f64 {
        self.0.defect()
    }

    fn __repr__(&self) -> String {
        format!("Frame(n={}, r={})", self.0.n(), self.0.r())
    }
}

#[pyclass(name = "CoefficientVector", module = "lowrank_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCoefficients(CoefficientVector);

#[pymethods]
impl PyCoefficients {
    #[new]
    fn new(r: usize, d: usize, values: Vec<f64>) -> PyResult<Self> {
        CoefficientVector::from_values(r, d, values).map(PyCoefficients).map_err(to_py)
    }

    #[getter]
    fn r(&self) -> usize {
        self.0.r()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    fn eval(&self, z: Vec<f64>) -> PyResult<f64> {
        self.0.eval(&z).map_err(to_py)
    }

    fn gradient(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.gradient(&z).map_err(to_py)
    }

    fn norm(&self) -> f64 {
        self.0.norm()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("CoefficientVector(r={}, d={}, values={:?})", self.0.r(), self.0.d(), self.0.values())
    }
}

#[pyclass(name = "Parameters", module = "lowrank_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyParameters(Parameters);

#[pymethods]
impl PyParameters {
    #[new]
    fn new(coef: &PyCoefficients, frame: &PyFrame) -> PyResult<Self> {
        Parameters::new(coef.0.clone(), frame.0.clone()).map(PyParameters).map_err(to_py)
    }

    #[getter]
    fn coef(&self) -> PyCoefficients {
        PyCoefficients(self.0.coef.clone())
    }

    #[getter]
    fn frame(&self) -> PyFrame {
        PyFrame(self.0.frame.clone())
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<f64> {
        self.0.predict(&x).map_err(to_py)
    }

    /// `∂F_x/∂V` as `n` rows of length `r`.
    fn grad_frame(&self, x: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        self.0.grad_frame(&x).map(|g| matrix_to_rows(&g)).map_err(to_py)
    }

    fn grad_coef(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.grad_coef(&x).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(PyParameters)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyclass(name = "SampleBatch", module = "lowrank_py", frozen, from_py_object)]
#[derive(Clone)]
struct PySampleBatch(SampleBatch);

#[pymethods]
impl PySampleBatch {
    #[new]
    fn new(xs: Vec<Vec<f64>>, ys: Vec<f64>) -> PyResult<Self> {
        let n = xs.first().map_or(0, Vec::len);
        if xs.iter().any(|x| x.len() != n) {
            return Err(PyValueError::new_err("all covariate rows must have the same length"));
        }
        SampleBatch::new(n, xs.concat(), ys).map(PySampleBatch).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        SampleBatch::load(path).map(PySampleBatch).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    fn xs(&self) -> Vec<Vec<f64>> {
        self.0.xs().chunks(self.0.n().max(1)).map(<[f64]>::to_vec).collect()
    }

    fn ys(&self) -> Vec<f64> {
        self.0.ys().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Instance", module = "lowrank_py", frozen, from_py_object)]
#[derive(Clone)]
struct PyInstance(Instance);

#[pymethods]
impl PyInstance {
    #[staticmethod]
    #[pyo3(signature = (n, r, d, seed, alpha_min = 0.1))]
    fn random(n: usize, r: usize, d: usize, seed: u64, alpha_min: f64) -> PyResult<Self> {
        model::random_instance(n, r, d, seed, alpha_min).map(PyInstance).map_err(to_py)
    }

    #[staticmethod]
    fn phase_retrieval(n: usize, r: usize, seed: u64) -> PyResult<Self> {
        model::phase_retrieval_instance(n, r, seed).map(PyInstance).map_err(to_py)
    }

    /// Normalizes a raw link polynomial and pairs it with `frame`.
    #[staticmethod]
    fn from_link(coef: &PyCoefficients, frame: &PyFrame) -> PyResult<Self> {
        model::make_instance(&coef.0, frame.0.clone()).map(PyInstance).map_err(to_py)
    }

    #[getter]
    fn truth(&self) -> PyParameters {
        PyParameters(self.0.truth.clone())
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    #[getter]
    fn y_variance(&self) -> f64 {
        self.0.y_variance
    }

    fn sample(&self, count: usize, seed: u64) -> PySampleBatch {
        PySampleBatch(model::sample_batch(&self.0, count, seed))
    }

    fn coef_error(&self, params: &PyParameters) -> PyResult<f64> {
        self.0.coef_error(&params.0).map_err(to_py)
    }

    fn prediction_error(&self, params: &PyParameters, batch: &PySampleBatch) -> PyResult<f64> {
        self.0.prediction_error(&params.0, &batch.0).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(PyInstance)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }
}

#[pyclass(name = "BoostConfig", module = "lowrank_py", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct PyBoostConfig {
    eta_coef: f64,
    eta_vec: f64,
    t_outer: usize,
    t_realign: usize,
    b_realign: usize,
    t_subspace: usize,
    target_eps: f64,
}

impl From<BoostConfig> for PyBoostConfig {
    fn from(c: BoostConfig) -> Self {
        PyBoostConfig {
            eta_coef: c.eta_coef,
            eta_vec: c.eta_vec,
            t_outer: c.t_outer,
            t_realign: c.t_realign,
            b_realign: c.b_realign,
            t_subspace: c.t_subspace,
            target_eps: c.target_eps,
        }
    }
}

impl PyBoostConfig {
    fn to_core(&self) -> BoostConfig {
        BoostConfig {
            eta_coef: self.eta_coef,
            eta_vec: self.eta_vec,
            t_outer: self.t_outer,
            t_realign: self.t_realign,
            b_realign: self.b_realign,
            t_subspace: self.t_subspace,
            target_eps: self.target_eps,
            seed: 0,
        }
    }
}

#[pymethods]
impl PyBoostConfig {
    #[new]
    #[pyo3(signature = (eta_coef, eta_vec, t_outer, t_realign, b_realign, t_subspace, target_eps = 1e-4))]
    fn new(
        eta_coef: f64,
        eta_vec: f64,
        t_outer: usize,
        t_realign: usize,
        b_realign: usize,
        t_subspace: usize,
        target_eps: f64,
    ) -> PyResult<Self> {
        let cfg = PyBoostConfig {
            eta_coef,
            eta_vec,
            t_outer,
            t_realign,
            b_realign,
            t_subspace,
            target_eps,
        };
        cfg.to_core().validate().map_err(to_py)?;
        Ok(cfg)
    }

    #[staticmethod]
    #[pyo3(signature = (n, r, d, alpha_hat = None, target_eps = 1e-4))]
    fn defaults(n: usize, r: usize, d: usize, alpha_hat: Option<f64>, target_eps: f64) -> Self {
        BoostConfig::defaults(n, r, d, alpha_hat, target_eps).into()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.to_core())
    }
}

/// Samples come either from an instance (fresh draws, seeded) or a stored batch.
#[derive(FromPyObject)]
enum Source {
    Instance(PyInstance),
    Batch(PySampleBatch),
}

impl Source {
    fn oracle(self, seed: u64) -> Box<dyn SampleOracle + Send> {
        match self {
            Source::Instance(inst) => Box::new(InstanceOracle::new(&inst.0, seed)),
            Source::Batch(batch) => Box::new(ReplayOracle::new(batch.0)),
        }
    }
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (source, r, seed = 0, samples_per_round = 100_000, quantile = 0.9, tau = None, quantile_grid = false))]
fn trimmed_pca(
    py: Python<'_>,
    source: Source,
    r: usize,
    seed: u64,
    samples_per_round: usize,
    quantile: f64,
    tau: Option<f64>,
    quantile_grid: bool,
) -> PyResult<PyFrame> {
    let config = TrimConfig {
        tau,
        samples_per_round,
        quantile,
        quantile_grid,
        ..TrimConfig::default()
    };
    let mut oracle = source.oracle(seed);
    py.detach(|| lowrank::trimmed_pca::trimmed_pca(oracle.as_mut(), r, &config))
        .map(PyFrame)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (source, frame, d, config, seed = 0))]
fn geo_sgd(
    py: Python<'_>,
    source: Source,
    frame: &PyFrame,
    d: usize,
    config: &PyBoostConfig,
    seed: u64,
) -> PyResult<PyParameters> {
    let config = config.to_core();
    let mut oracle = source.oracle(seed);
    let v0 = frame.0.clone();
    py.detach(|| geosgd::geo_sgd(oracle.as_mut(), &v0, d, &config))
        .map(PyParameters)
        .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (source, frame, d, config, seed = 0))]
fn realign_polynomial(
    py: Python<'_>,
    source: Source,
    frame: &PyFrame,
    d: usize,
    config: &PyBoostConfig,
    seed: u64,
) -> PyResult<PyCoefficients> {
    let config = config.to_core();
    let mut oracle = source.oracle(seed);
    let v = frame.0.clone();
    py.detach(|| geosgd::realign_polynomial(oracle.as_mut(), &v, d, &config))
        .map(PyCoefficients)
        .map_err(to_py)
}

#[pyfunction]
fn procrustes_distance(v: &PyFrame, w: &PyFrame) -> PyResult<f64> {
    subspace::procrustes_distance(&v.0, &w.0).map_err(to_py)
}

#[pyfunction]
fn chordal_distance(v: &PyFrame, w: &PyFrame) -> PyResult<f64> {
    subspace::chordal_distance(&v.0, &w.0).map_err(to_py)
}

#[pyfunction]
fn principal_angles(v: &PyFrame, w: &PyFrame) -> PyResult<Vec<f64>> {
    subspace::principal_angles(&v.0, &w.0)
        .map(|a| a.angles().to_vec())
        .map_err(to_py)
}

/// Orthogonal `O` minimizing `‖V − W·O‖_F`, as rows.
#[pyfunction]
fn align(v: &PyFrame, w: &PyFrame) -> PyResult<Vec<Vec<f64>>> {
    subspace::align(&v.0, &w.0).map(|o| matrix_to_rows(&o)).map_err(to_py)
}

#[pyfunction]
fn oscillator(ell: usize, z: f64) -> f64 {
    hermite::oscillator_eval(ell, z)
}

#[pyfunction]
fn linearization_coeff(a: usize, b: usize, c: usize) -> f64 {
    hermite::linearization_coeff(a, b, c)
}

#[pyfunction]
fn basis_size(r: usize, d: usize) -> usize {
    hermite::basis_size(r, d)
}

type Failure = (usize, String);

/// Runs an experiment from its JSON config; returns the trace as dicts and
/// the failed trials as `(trial, message)` pairs.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_json: &str) -> PyResult<(Vec<Bound<'py, PyDict>>, Vec<Failure>)> {
    let config: ExperimentConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let outcome = py.detach(|| harness::run_experiment(&config)).map_err(to_py)?;
    let rows = outcome
        .records
        .iter()
        .map(|rec| {
            let row = PyDict::new(py);
            row.set_item("trial", rec.trial)?;
            row.set_item(
                "phase",
                match rec.phase {
                    harness::Phase::Warmstart => "warmstart",
                    harness::Phase::BoostRound => "boost_round",
                },
            )?;
            row.set_item("round", rec.round)?;
            row.set_item("procrustes", rec.procrustes)?;
            row.set_item("chordal", rec.chordal)?;
            row.set_item("coef_error", rec.coef_error)?;
            row.set_item("pred_error", rec.pred_error)?;
            row.set_item("samples_used", rec.samples_used)?;
            row.set_item("wall_ms", rec.wall_ms)?;
            Ok(row)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let failures = outcome.failures.iter().map(|f| (f.trial, f.error.to_string())).collect();
    Ok((rows, failures))
}

#[pymodule]
fn lowrank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericalGuardError", m.py().get_type::<NumericalGuardError>())?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyCoefficients>()?;
    m.add_class::<PyParameters>()?;
    m.add_class::<PySampleBatch>()?;
    m.add_class::<PyInstance>()?;
    m.add_class::<PyBoostConfig>()?;
    m.add_function(wrap_pyfunction!(trimmed_pca, m)?)?;
    m.add_function(wrap_pyfunction!(geo_sgd, m)?)?;
    m.add_function(wrap_pyfunction!(realign_polynomial, m)?)?;
    m.add_function(wrap_pyfunction!(procrustes_distance, m)?)?;
    m.add_function(wrap_pyfunction!(chordal_distance, m)?)?;
    m.add_function(wrap_pyfunction!(principal_angles, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(oscillator, m)?)?;
    m.add_function(wrap_pyfunction!(linearization_coeff, m)?)?;
    m.add_function(wrap_pyfunction!(basis_size, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

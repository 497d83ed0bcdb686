//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slqt_core::bpi;
use slqt_core::config::ExperimentConfig;
use slqt_core::model::{self, BpiHyperParams, CostWeights, ReferenceGenerator, StochasticSystem};
use slqt_core::pipeline::{self, DataLocation};
use slqt_core::report;
use slqt_core::{solvers, symquad, DMatrix, DVector};

create_exception!(slqt, SlqtError, PyException, "Error raised by the slqt core; `args[1]` is the CLI exit code.");

fn err(e: slqt_core::Error) -> PyErr {
    SlqtError::new_err((e.to_string(), e.exit_code()))
}

type Rows = Vec<Vec<f64>>;

fn matrix(name: &str, rows: &Rows) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(SlqtError::new_err((format!("{name} must be a non-empty rectangular list of rows"), 2)));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Plant, reference, cost and hyperparameters of one tracking problem.
#[pyclass(name = "TrackingProblem", module = "slqt")]
struct PyProblem {
    inner: model::TrackingProblem,
}

#[pymethods]
impl PyProblem {
    #[new]
    #[pyo3(signature = (a, b, c, d, h, a_d, h_d, x_d0, q, r, gamma=1.0, alpha0=0.1, eta=0.95, theta=None, epsilon=1e-5, max_iter=200))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        a: Rows,
        b: Rows,
        c: Rows,
        d: Rows,
        h: Rows,
        a_d: Rows,
        h_d: Rows,
        x_d0: Vec<f64>,
        q: Rows,
        r: Rows,
        gamma: f64,
        alpha0: f64,
        eta: f64,
        theta: Option<Rows>,
        epsilon: f64,
        max_iter: usize,
    ) -> PyResult<Self> {
        let sys = StochasticSystem::new(matrix("a", &a)?, matrix("b", &b)?, matrix("c", &c)?, matrix("d", &d)?, matrix("h", &h)?)
            .map_err(err)?;
        let reference = ReferenceGenerator::new(matrix("a_d", &a_d)?, matrix("h_d", &h_d)?, DVector::from_vec(x_d0)).map_err(err)?;
        let cost = CostWeights::new(matrix("q", &q)?, matrix("r", &r)?).map_err(err)?;
        let mut hyper = BpiHyperParams::defaults(sys.n());
        hyper.gamma = gamma;
        hyper.alpha0 = alpha0;
        hyper.eta = eta;
        hyper.epsilon = epsilon;
        hyper.max_iter = max_iter;
        if let Some(t) = theta {
            hyper.theta = matrix("theta", &t)?;
        }
        let inner = model::TrackingProblem::new(sys, reference, cost, hyper).map_err(err)?;
        Ok(Self { inner })
    }

    /// Problem of the bundled spring-mass-damper example.
    #[staticmethod]
    fn example_one() -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::example_one().problem().map_err(err)? })
    }

    /// Model-based bootstrap policy iteration and the feedforward of this reference.
    fn solve(&self) -> PyResult<PySolution> {
        let sol = bpi::solve_tracking(&self.inner).map_err(err)?;
        Ok(PySolution { inner: sol })
    }

    /// Feedforward gain for another reference output map `h_d`.
    fn feedforward(&self, solution: &PySolution, h_d: Rows) -> PyResult<Rows> {
        let reference = self.inner.reference.with_output(matrix("h_d", &h_d)?).map_err(err)?;
        let ff = bpi::feedforward(&self.inner, &solution.inner.p_star, &solution.inner.k_star, &reference).map_err(err)?;
        Ok(rows(&ff.f))
    }

    /// Spectral abscissa of the generalized Lyapunov operator of gain `k` on `S(alpha)`.
    #[pyo3(signature = (k, alpha=None))]
    fn abscissa(&self, k: Rows, alpha: Option<f64>) -> PyResult<f64> {
        let hp = &self.inner.hyper;
        let sys = self.inner.system.parameterized(hp.gamma, alpha.unwrap_or(hp.gamma));
        model::spectral_abscissa(&sys, &matrix("k", &k)?).map_err(err)
    }

    /// Solves `L_[K;S(alpha)](P) + K'RK + qmat = 0`.
    fn solve_gen_lyap(&self, k: Rows, alpha: f64, qmat: Rows) -> PyResult<Rows> {
        let hp = &self.inner.hyper;
        let sys = self.inner.system.parameterized(hp.gamma, alpha);
        let sol = solvers::solve_gen_lyap(&sys, &matrix("k", &k)?, self.inner.cost.r(), &matrix("qmat", &qmat)?).map_err(err)?;
        Ok(rows(&sol.p))
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.system;
        format!("TrackingProblem(n={}, m={}, q={}, n_d={})", s.n(), s.m(), s.q(), self.inner.reference.n_d())
    }
}

#[pyclass(name = "TrackingSolution", module = "slqt")]
struct PySolution {
    inner: bpi::TrackingSolution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn p_star(&self) -> Rows {
        rows(&self.inner.p_star)
    }
    #[getter]
    fn k_star(&self) -> Rows {
        rows(&self.inner.k_star)
    }
    #[getter]
    fn pi_star(&self) -> Rows {
        rows(&self.inner.pi_star)
    }
    #[getter]
    fn f_star(&self) -> Rows {
        rows(&self.inner.f_star)
    }
    #[getter]
    fn sare_residual(&self) -> f64 {
        self.inner.sare_residual
    }
    #[getter]
    fn abscissa(&self) -> f64 {
        self.inner.abscissa
    }
    #[getter]
    fn phase_one_exit(&self) -> usize {
        self.inner.phase_one_exit().map_or(0, |s| s.index)
    }

    /// One dict per iterate with keys index, phase, alpha, p, k, abscissa.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .history
            .iter()
            .map(|s| {
                let d = PyDict::new(py);
                d.set_item("index", s.index)?;
                d.set_item("phase", if s.phase == bpi::Phase::One { 1 } else { 2 })?;
                d.set_item("alpha", s.alpha)?;
                d.set_item("p", rows(&s.p))?;
                d.set_item("k", rows(&s.k))?;
                d.set_item("abscissa", s.abscissa)?;
                Ok(d)
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!("TrackingSolution(k_star={:?}, iterations={})", self.inner.k_star.as_slice(), self.inner.iterations())
    }
}

/// `vech` of a symmetric matrix (row-major upper triangle).
#[pyfunction]
fn vech(m: Rows) -> PyResult<Vec<f64>> {
    Ok(symquad::vech(&matrix("m", &m)?).map_err(err)?.into_inner().iter().copied().collect())
}

/// `vech(2M - diag M)`, so that `vech(P) . h_form(x x') = x'Px`.
#[pyfunction]
fn h_form(m: Rows) -> PyResult<Vec<f64>> {
    Ok(symquad::h_form(&matrix("m", &m)?).map_err(err)?.into_inner().iter().copied().collect())
}

/// Bundled experiment config as JSON text (1 or 2).
#[pyfunction]
fn example_config(example: u32) -> PyResult<String> {
    let cfg = match example {
        1 => ExperimentConfig::example_one(),
        2 => ExperimentConfig::example_two(),
        _ => return Err(SlqtError::new_err(("example must be 1 or 2".to_string(), 2))),
    };
    Ok(cfg.to_json())
}

/// Runs a full experiment from config JSON and returns the report as JSON text.
///
/// With `out`, the report and CSV files are also written there. Failed runs
/// raise `SlqtError` unless `allow_failure` is set, in which case the partial
/// report is returned.
#[pyfunction]
#[pyo3(signature = (config_json, out=None, paths=None, seed=None, allow_failure=false))]
fn run_experiment(
    py: Python<'_>,
    config_json: &str,
    out: Option<PathBuf>,
    paths: Option<usize>,
    seed: Option<u64>,
    allow_failure: bool,
) -> PyResult<String> {
    let base = ExperimentConfig::from_json(config_json).map_err(err)?;
    let cfg = pipeline::Overrides { seed, paths, validate_with_model: false }.apply(&base).map_err(err)?;
    let (art, failure) = py.detach(|| pipeline::run_experiment(&cfg, &DataLocation::default()));
    if let Some(dir) = &out {
        art.emit(dir).map_err(err)?;
    }
    match failure {
        Some(e) if !allow_failure => Err(err(e)),
        _ => Ok(report::to_canonical_json(&art.report)),
    }
}

#[pymodule]
fn slqt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SlqtError", m.py().get_type::<SlqtError>())?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(vech, m)?)?;
    m.add_function(wrap_pyfunction!(h_form, m)?)?;
    m.add_function(wrap_pyfunction!(example_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

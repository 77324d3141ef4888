//! Python bindings for `fpcontrol`. Fields cross the boundary as lists of
//! floats; space-time fields as lists of time slices.

use fpcontrol as fp;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: fp::Error) -> PyErr {
    use fp::Error::*;
    match e {
        NegativeDensity { .. } | CflViolation { .. } | SingularTridiagonal { .. } | ShiftOutOfDomain { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn slices(fields: &[fp::Field]) -> Vec<Vec<f64>> {
    fields.iter().map(|f| f.values().to_vec()).collect()
}

fn fields(values: Vec<Vec<f64>>) -> Vec<fp::Field> {
    values.into_iter().map(fp::Field::new).collect()
}

#[pyclass(name = "Grid", frozen, module = "fpcontrol_py")]
struct PyGrid(fp::Grid);

#[pymethods]
impl PyGrid {
    #[new]
    #[pyo3(signature = (x_min, x_max, n_x, t_horizon, n_t, eta0 = 0.1))]
    fn new(x_min: f64, x_max: f64, n_x: usize, t_horizon: f64, n_t: usize, eta0: f64) -> PyResult<Self> {
        fp::Grid::new(x_min, x_max, n_x, t_horizon, n_t, eta0).map(Self).map_err(to_py)
    }
    #[getter]
    fn nodes(&self) -> Vec<f64> {
        self.0.nodes().to_vec()
    }
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.times()
    }
    #[getter]
    fn dx(&self) -> f64 {
        self.0.dx()
    }
    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt()
    }
    #[getter]
    fn n_x(&self) -> usize {
        self.0.n_x()
    }
    #[getter]
    fn n_t(&self) -> usize {
        self.0.n_t()
    }
    fn __repr__(&self) -> String {
        format!(
            "Grid(x_min={}, x_max={}, n_x={}, t_horizon={}, n_t={})",
            self.0.x_min(),
            self.0.x_max(),
            self.0.n_x(),
            self.0.t_horizon(),
            self.0.n_t()
        )
    }
}

/// Bailout model: parameters plus the assembled coefficient set.
#[pyclass(name = "BailoutModel", frozen, module = "fpcontrol_py")]
struct PyModel {
    params: fp::BailoutParams,
    spec: fp::ModelSpec,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut p = fp::BailoutParams::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let v: f64 = v.extract()?;
                match key.as_str() {
                    "sigma" => p.sigma = v,
                    "sigma0" => p.sigma0 = v,
                    "kappa" => p.kappa = v,
                    "w_weight" => p.w_weight = v,
                    "g_max" => p.g_max = v,
                    "hazard_max" => p.hazard_max = v,
                    "hazard_scale" => p.hazard_scale = v,
                    "t_horizon" => p.t_horizon = v,
                    "initial_mean" => p.initial_mean = v,
                    "initial_sd" => p.initial_sd = v,
                    other => return Err(PyValueError::new_err(format!("unknown parameter {other:?}"))),
                }
            }
        }
        let spec = fp::bailout_model(&p).map_err(to_py)?;
        Ok(Self { params: p, spec })
    }

    fn params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let p = &self.params;
        let d = PyDict::new(py);
        for (k, v) in [
            ("sigma", p.sigma),
            ("sigma0", p.sigma0),
            ("kappa", p.kappa),
            ("w_weight", p.w_weight),
            ("g_max", p.g_max),
            ("hazard_max", p.hazard_max),
            ("hazard_scale", p.hazard_scale),
            ("t_horizon", p.t_horizon),
            ("initial_mean", p.initial_mean),
            ("initial_sd", p.initial_sd),
        ] {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn hazard(&self, x: f64) -> f64 {
        self.params.hazard(x)
    }

    fn initial_density(&self, grid: &PyGrid) -> Vec<f64> {
        self.params.initial_density(&grid.0).into_inner()
    }

    /// Control field that is `value` everywhere.
    fn constant_control(&self, grid: &PyGrid, value: f64) -> PyResult<PyControl> {
        fp::ControlField::constant(value, &self.spec, &grid.0).map(PyControl).map_err(to_py)
    }

    /// Control field from `n_t` slices of `n_x` values.
    fn control(&self, grid: &PyGrid, values: Vec<Vec<f64>>) -> PyResult<PyControl> {
        fp::ControlField::new(fields(values), &self.spec, &grid.0).map(PyControl).map_err(to_py)
    }
}

#[pyclass(name = "Control", frozen, module = "fpcontrol_py")]
struct PyControl(fp::ControlField);

#[pymethods]
impl PyControl {
    fn values(&self) -> Vec<Vec<f64>> {
        slices(self.0.slices())
    }
}

#[pyclass(name = "DensityPath", frozen, module = "fpcontrol_py")]
struct PyDensity(fp::DensityPath);

#[pymethods]
impl PyDensity {
    fn values(&self) -> Vec<Vec<f64>> {
        slices(self.0.slices())
    }
    fn terminal(&self) -> Vec<f64> {
        self.0.terminal().values().to_vec()
    }
    fn masses(&self) -> Vec<f64> {
        self.0.masses()
    }
    /// Cumulative killed mass `L_k`.
    fn loss(&self) -> Vec<f64> {
        fp::mass_and_loss(&self.0).1
    }
    fn min_value(&self) -> f64 {
        self.0.min_value()
    }
}

#[pyclass(name = "AdjointPath", frozen, module = "fpcontrol_py")]
struct PyAdjoint(fp::AdjointPath);

#[pymethods]
impl PyAdjoint {
    fn values(&self) -> Vec<Vec<f64>> {
        slices(self.0.slices())
    }
    fn gradients(&self) -> Vec<Vec<f64>> {
        slices(&self.0.grad_slices())
    }
    fn min_value(&self) -> f64 {
        self.0.min_value()
    }
    fn max_value(&self) -> f64 {
        self.0.max_value()
    }
}

#[pyclass(name = "PicardResult", frozen, module = "fpcontrol_py")]
struct PyPicard {
    sol: fp::FbSolution,
    w_weight: f64,
}

#[pymethods]
impl PyPicard {
    #[getter]
    fn converged(&self) -> bool {
        self.sol.converged
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.sol.iterations
    }
    #[getter]
    fn cost(&self) -> f64 {
        self.sol.cost
    }
    #[getter]
    fn smp_residual(&self) -> f64 {
        self.sol.smp_residual
    }
    #[getter]
    fn residual_history(&self) -> Vec<f64> {
        self.sol.residual_history.clone()
    }
    #[getter]
    fn density(&self) -> PyDensity {
        PyDensity(self.sol.density.clone())
    }
    #[getter]
    fn adjoint(&self) -> PyAdjoint {
        PyAdjoint(self.sol.adjoint.clone())
    }
    #[getter]
    fn control(&self) -> PyControl {
        PyControl(self.sol.control.clone())
    }
    /// `(t, a_t, b_t)` per time slice, with `None` bounds where inactive.
    fn active_set(&self) -> Vec<(f64, Option<f64>, Option<f64>)> {
        fp::active_set(&self.sol.adjoint, self.w_weight)
            .into_iter()
            .map(|s| (s.t, s.bounds.map(|b| b.0), s.bounds.map(|b| b.1)))
            .collect()
    }
}

fn rho0_or_default(model: &PyModel, grid: &PyGrid, rho0: Option<Vec<f64>>) -> fp::Field {
    rho0.map(fp::Field::new).unwrap_or_else(|| model.params.initial_density(&grid.0))
}

#[pyfunction]
#[pyo3(signature = (model, control, grid, rho0 = None))]
fn solve_forward(model: &PyModel, control: &PyControl, grid: &PyGrid, rho0: Option<Vec<f64>>) -> PyResult<PyDensity> {
    let rho0 = rho0_or_default(model, grid, rho0);
    fp::solve_forward(&model.spec, &control.0, &grid.0, &rho0).map(PyDensity).map_err(to_py)
}

#[pyfunction]
fn solve_adjoint(model: &PyModel, density: &PyDensity, control: &PyControl, grid: &PyGrid) -> PyResult<PyAdjoint> {
    fp::solve_adjoint(&model.spec, &density.0, &control.0, &grid.0).map(PyAdjoint).map_err(to_py)
}

#[pyfunction]
fn solve_hjb(model: &PyModel, density: &PyDensity, grid: &PyGrid) -> PyResult<PyAdjoint> {
    fp::solve_hjb(&model.spec, &density.0, &grid.0).map(PyAdjoint).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (model, adjoint, grid, smoothing = 0.0))]
fn extract_control(model: &PyModel, adjoint: &PyAdjoint, grid: &PyGrid, smoothing: f64) -> PyResult<PyControl> {
    fp::extract_control(&model.spec, &adjoint.0, smoothing, &grid.0).map(PyControl).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (model, control, grid, rho0 = None))]
fn evaluate_cost(model: &PyModel, control: &PyControl, grid: &PyGrid, rho0: Option<Vec<f64>>) -> PyResult<f64> {
    let rho0 = rho0_or_default(model, grid, rho0);
    fp::evaluate_cost(&model.spec, &control.0, &grid.0, &rho0).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (model, grid, rho0 = None, max_iters = 200, tol = 1e-5, damping = 0.5, smoothing_schedule = None))]
fn picard_solve(
    py: Python<'_>,
    model: &PyModel,
    grid: &PyGrid,
    rho0: Option<Vec<f64>>,
    max_iters: usize,
    tol: f64,
    damping: f64,
    smoothing_schedule: Option<Vec<f64>>,
) -> PyResult<PyPicard> {
    let rho0 = rho0_or_default(model, grid, rho0);
    let mut opts = fp::PicardOptions {
        max_iters,
        tol,
        damping,
        ..Default::default()
    };
    if let Some(s) = smoothing_schedule {
        opts.smoothing_schedule = s;
    }
    let (spec, g) = (&model.spec, &grid.0);
    let sol = py.detach(|| fp::picard_solve(spec, g, &rho0, &opts)).map_err(to_py)?;
    Ok(PyPicard {
        sol,
        w_weight: model.params.w_weight,
    })
}

#[pyfunction]
fn flat_distance(a: Vec<f64>, b: Vec<f64>, grid: &PyGrid) -> PyResult<f64> {
    fp::flat_distance(&a, &b, &grid.0).map_err(to_py)
}

/// Adjoint directional derivative against a central finite difference.
#[pyfunction]
#[pyo3(signature = (model, control, direction, grid, eps = 1e-3, rho0 = None))]
fn gradient_check<'py>(
    py: Python<'py>,
    model: &PyModel,
    control: &PyControl,
    direction: Vec<Vec<f64>>,
    grid: &PyGrid,
    eps: f64,
    rho0: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let rho0 = rho0_or_default(model, grid, rho0);
    let bound = direction
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let h = fp::Direction::new(fields(direction), bound, &grid.0).map_err(to_py)?;
    let r = fp::gradient_check(&model.spec, &control.0, &h, eps, &grid.0, &rho0).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("adjoint_value", r.adjoint_value)?;
    d.set_item("fd_value", r.fd_value)?;
    d.set_item("eps", r.eps)?;
    d.set_item("rel_err", r.rel_err)?;
    Ok(d)
}

/// Euler–Maruyama particle system. `noise_seed` draws a common-noise path
/// when `sigma0 > 0`; the summary is returned as a dict of columns.
#[pyfunction]
#[pyo3(signature = (model, control, grid, n, seed, noise_seed = None))]
fn simulate_particles<'py>(
    py: Python<'py>,
    model: &PyModel,
    control: &PyControl,
    grid: &PyGrid,
    n: usize,
    seed: u64,
    noise_seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let g = &grid.0;
    let wpath = match noise_seed {
        Some(s) if model.params.sigma0 > 0.0 => fp::sample_brownian(g, s),
        _ => fp::NoisePath::zero(g),
    };
    let run = py
        .detach(|| fp::simulate(&model.params, &control.0, &wpath, n, seed, g))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("t", run.summary.iter().map(|r| r.t).collect::<Vec<_>>())?;
    d.set_item("mass", run.summary.iter().map(|r| r.mass).collect::<Vec<_>>())?;
    d.set_item("loss", run.summary.iter().map(|r| r.loss).collect::<Vec<_>>())?;
    d.set_item("mean_x", run.summary.iter().map(|r| r.mean_x).collect::<Vec<_>>())?;
    d.set_item("terminal_density", fp::empirical_density(&run.final_state, g).into_inner())?;
    Ok(d)
}

#[pymodule]
fn fpcontrol_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyControl>()?;
    m.add_class::<PyDensity>()?;
    m.add_class::<PyAdjoint>()?;
    m.add_class::<PyPicard>()?;
    m.add_function(wrap_pyfunction!(solve_forward, m)?)?;
    m.add_function(wrap_pyfunction!(solve_adjoint, m)?)?;
    m.add_function(wrap_pyfunction!(solve_hjb, m)?)?;
    m.add_function(wrap_pyfunction!(extract_control, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_cost, m)?)?;
    m.add_function(wrap_pyfunction!(picard_solve, m)?)?;
    m.add_function(wrap_pyfunction!(flat_distance, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_particles, m)?)?;
    Ok(())
}

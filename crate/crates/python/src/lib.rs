//! Python bindings: kernels, fitted GPs, the spectral perturbation engine,
//! Gram-matrix diagnostics and the full workflow.

use std::path::Path;

use kernelsens::cli::{self, generate_synthetic, RunConfig};
use kernelsens::diagnostics::relative_frobenius as rel_frob;
use kernelsens::functional::FunctionalSpec;
use kernelsens::gp::{fit_mmle, parse_kernel, Dataset, FitOptions, FittedGp, KernelExpr, MeanFunction, Points};
use kernelsens::spectral::{default_grid, density_of_kernel, kernel_from_density, maximize_spectral, AscentOptions, SpectralBox};
use kernelsens::workflow::{run_workflow, to_precise_json};
use kernelsens::Error;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Input(_) | Error::Validation(_) | Error::Config(_) | Error::Parse { .. } | Error::Unsupported(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Input points: a flat list (1-D inputs) or a list of rows.
#[derive(FromPyObject)]
enum Inputs {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

impl Inputs {
    fn points(&self) -> PyResult<Points> {
        match self {
            Inputs::Flat(v) => Points::from_scalars(v),
            Inputs::Rows(r) => Points::from_rows(r),
        }
        .map_err(py_err)
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn parse_mean(mean: &str) -> PyResult<MeanFunction> {
    match mean {
        "zero" => Ok(MeanFunction::Zero),
        "training_mean" => Ok(MeanFunction::TrainingMean),
        other => other
            .parse::<f64>()
            .map(MeanFunction::Constant)
            .map_err(|_| PyValueError::new_err(format!("mean must be 'zero', 'training_mean' or a number, got {other:?}"))),
    }
}

/// A kernel expression such as `se(1, 0.5) + matern52(1, 2)`.
#[pyclass(name = "Kernel", module = "kernelsens_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernel {
    inner: KernelExpr,
}

#[pymethods]
impl PyKernel {
    #[new]
    fn new(expr: &str) -> PyResult<Self> {
        Ok(Self { inner: parse_kernel(expr).map_err(py_err)? })
    }

    /// Free hyperparameter values, in expression order.
    fn params(&self) -> Vec<f64> {
        self.inner.free_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.free_param_names()
    }

    fn with_params(&self, params: Vec<f64>) -> PyResult<Self> {
        let mut k = self.inner.clone();
        k.set_free_params(&params).map_err(py_err)?;
        Ok(Self { inner: k })
    }

    fn is_stationary(&self) -> bool {
        self.inner.is_stationary()
    }

    /// Gram matrix `k(X, X)` as a list of rows.
    fn gram(&self, x: Inputs) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.gram_sym(&x.points()?).map_err(py_err)?;
        Ok(matrix_rows(&g))
    }

    fn to_json(&self) -> PyResult<String> {
        to_precise_json(&self.inner).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: KernelExpr = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Kernel({:?})", self.inner.to_string())
    }
}

/// A GP regression model with fixed hyperparameters.
#[pyclass(name = "GaussianProcess", module = "kernelsens_py", frozen)]
struct PyGp {
    inner: FittedGp,
}

#[pymethods]
impl PyGp {
    #[new]
    #[pyo3(signature = (x, y, kernel, noise_variance, mean = "zero"))]
    fn new(x: Inputs, y: Vec<f64>, kernel: &PyKernel, noise_variance: f64, mean: &str) -> PyResult<Self> {
        let data = Dataset::new(x.points()?, y).map_err(py_err)?;
        let gp = FittedGp::new(data, kernel.inner.clone(), noise_variance, parse_mean(mean)?).map_err(py_err)?;
        Ok(Self { inner: gp })
    }

    /// Maximum marginal likelihood fit starting from `kernel` and `noise_variance`.
    #[staticmethod]
    #[pyo3(signature = (x, y, kernel, noise_variance = 0.1, mean = "zero", restarts = 5, fit_noise = true, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        py: Python<'_>,
        x: Inputs,
        y: Vec<f64>,
        kernel: &PyKernel,
        noise_variance: f64,
        mean: &str,
        restarts: usize,
        fit_noise: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let data = Dataset::new(x.points()?, y).map_err(py_err)?;
        let mean = parse_mean(mean)?;
        let opts = FitOptions { restarts, fit_noise, ..FitOptions::default() };
        let template = kernel.inner.clone();
        let fit = py
            .detach(|| fit_mmle(&data, &template, noise_variance, mean, &opts, seed))
            .map_err(py_err)?;
        Ok(Self { inner: fit.gp })
    }

    #[getter]
    fn kernel(&self) -> PyKernel {
        PyKernel { inner: self.inner.kernel().clone() }
    }

    #[getter]
    fn noise_variance(&self) -> f64 {
        self.inner.noise_variance()
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn log_marginal_likelihood(&self) -> f64 {
        self.inner.log_marginal_likelihood()
    }

    /// Posterior mean and standard deviation of the latent function at `x_star`.
    fn posterior(&self, x_star: Vec<f64>) -> PyResult<(f64, f64)> {
        let p = self.inner.posterior(&x_star).map_err(py_err)?;
        Ok((p.mean, p.std))
    }

    fn with_kernel(&self, kernel: &PyKernel) -> PyResult<Self> {
        Ok(Self { inner: self.inner.with_kernel(kernel.inner.clone()).map_err(py_err)? })
    }

    /// Relative change `(μ₀ − μ)/σ₀` at `x_star` for `kernel`, with this GP as the baseline.
    fn relative_change(&self, x_star: Vec<f64>, kernel: &PyKernel) -> PyResult<f64> {
        let f = FunctionalSpec::relative_change(&self.inner, x_star).map_err(py_err)?;
        let gp1 = self.inner.with_kernel(kernel.inner.clone()).map_err(py_err)?;
        f.evaluate(&gp1).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        to_precise_json(&self.inner.to_record()).map_err(py_err)
    }
}

/// The synthetic benchmark data set as `(x, y)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn synthetic_data(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let d = generate_synthetic(seed);
    (d.x.as_slice().to_vec(), d.y)
}

/// `‖a − b‖_F / ‖b‖_F`.
#[pyfunction]
fn relative_frobenius(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    rel_frob(&to_matrix(&a)?, &to_matrix(&b)?).map_err(py_err)
}

/// Maximizes the relative change at `x_star` over spectral densities within
/// a relative box of half-width `epsilon` around the GP's own density.
/// Returns `(best F*, perturbed kernel)`.
#[pyfunction]
#[pyo3(signature = (gp, x_star, epsilon, grid_size = 100, restarts = 25, steps = 500, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn perturb_spectral(
    py: Python<'_>,
    gp: &PyGp,
    x_star: Vec<f64>,
    epsilon: f64,
    grid_size: usize,
    restarts: usize,
    steps: usize,
    seed: u64,
) -> PyResult<(f64, PyKernel)> {
    let gp0 = &gp.inner;
    let out = py.detach(|| -> kernelsens::Result<(f64, KernelExpr)> {
        let functional = FunctionalSpec::relative_change(gp0, x_star)?;
        let freqs = default_grid(gp0.kernel(), grid_size)?;
        let box_ = SpectralBox::new(density_of_kernel(gp0.kernel(), &freqs)?, epsilon)?;
        let opts = AscentOptions { restarts, steps, ..AscentOptions::default() };
        let res = maximize_spectral(gp0, &functional, &box_, &opts, seed, None)?;
        Ok((res.f_star, kernel_from_density(res.grid)?))
    });
    let (f, k) = out.map_err(py_err)?;
    Ok((f, PyKernel { inner: k }))
}

/// Runs the full workflow for a TOML configuration and returns the report as JSON.
/// Relative data paths resolve against the working directory.
#[pyfunction]
#[pyo3(signature = (config_toml, seed = None))]
fn workflow_report(py: Python<'_>, config_toml: &str, seed: Option<u64>) -> PyResult<String> {
    let mut cfg = RunConfig::from_toml(config_toml).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    py.detach(|| -> kernelsens::Result<String> {
        let prep = cli::prepare(&cfg)?;
        let schedule = cfg.schedule.values()?;
        let out = run_workflow(
            &prep.gp,
            &prep.functional,
            prep.delta,
            &cfg.engine,
            &schedule,
            &cfg.diagnostics,
            &cfg.workflow,
            cfg.seed,
        )?;
        to_precise_json(&out.report)
    })
    .map_err(py_err)
}

/// Runs the workflow for a configuration file and writes every output to `out_dir`,
/// exactly as the `workflow` command does. Returns the verdict.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, render_plots = false))]
fn run_config(py: Python<'_>, config_path: &str, out_dir: &str, render_plots: bool) -> PyResult<String> {
    py.detach(|| -> kernelsens::Result<String> {
        let cfg = RunConfig::load(Path::new(config_path))?;
        Ok(cli::workflow(&cfg, Path::new(out_dir), render_plots)?.verdict)
    })
    .map_err(py_err)
}

#[pymodule]
fn kernelsens_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyGp>()?;
    m.add_function(wrap_pyfunction!(synthetic_data, m)?)?;
    m.add_function(wrap_pyfunction!(relative_frobenius, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_spectral, m)?)?;
    m.add_function(wrap_pyfunction!(workflow_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add("VERDICT_NON_ROBUST", kernelsens::workflow::VERDICT_NON_ROBUST)?;
    m.add("VERDICT_FAILED", kernelsens::workflow::VERDICT_FAILED)?;
    m.add("VERDICT_UNCHANGED", kernelsens::workflow::VERDICT_UNCHANGED)?;
    Ok(())
}

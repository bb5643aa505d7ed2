//! Python bindings: the analytic oracles, exact transport, flow simulation
//! and the experiment runner.

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ctflow::flow::{simulate_final, FlowConfig, ParticleCloud};
use ctflow::metrics::wasserstein_exact;
use ctflow::numerics::Mat;
use ctflow::targets::{self, ou_moment_curve};
use ctflow_cli::{CliError, ExperimentSpec};

fn core_err(e: ctflow::Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Run(e) => core_err(e),
        CliError::Io(e) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows differ in length"));
    }
    Ok(Mat::from_rows(&rows))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Names accepted wherever a target is expected.
#[pyfunction]
fn target_names() -> Vec<&'static str> {
    targets::REGISTRY.to_vec()
}

/// Mean and variance at time `t` of the flow toward N(0, 1) from N(mu0, var0).
#[pyfunction]
fn ou_moments(mu0: f64, var0: f64, t: f64) -> (f64, f64) {
    ou_moment_curve(mu0, var0, t)
}

/// Exact W1 (order 1) or W2 (order 2) between two equal-size point sets.
#[pyfunction]
#[pyo3(signature = (a, b, order = 2))]
fn wasserstein(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, order: u32) -> PyResult<f64> {
    wasserstein_exact(&matrix(a)?, &matrix(b)?, order).map_err(core_err)
}

/// Final particles after `num_steps` Langevin steps toward a named target.
#[pyfunction]
fn simulate(target: &str, initial: Vec<Vec<f64>>, step_size: f64, num_steps: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let t = targets::by_name(target).map_err(core_err)?;
    let cloud = ParticleCloud::new(matrix(initial)?).map_err(core_err)?;
    let last = simulate_final(&cloud, &t, &FlowConfig::new(step_size, num_steps), seed).map_err(core_err)?;
    Ok(rows(last.samples()))
}

/// Runs a TOML experiment spec into `output` and returns the manifest as JSON.
#[pyfunction]
fn run_spec(spec: &str, output: &str) -> PyResult<String> {
    let mut s = ExperimentSpec::from_toml(spec).map_err(|e| PyValueError::new_err(e.to_string()))?;
    s.output = output.into();
    let m = ctflow_cli::run(&s).map_err(cli_err)?;
    Ok(serde_json::to_string(&m).expect("manifests serialize"))
}

/// `(name, passed, detail)` for each self-check.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    ctflow_cli::selftest::run_all().into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect()
}

#[pymodule]
fn pyctflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(target_names, m)?)?;
    m.add_function(wrap_pyfunction!(ou_moments, m)?)?;
    m.add_function(wrap_pyfunction!(wasserstein, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_spec, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}

//! Python bindings: configuration, experiment runners, the grid transforms
//! and codebook metrics.

use num_complex::Complex64;
use otfs_scma_core::otfs::{GridDims, OtfsTransform};
use otfs_scma_core::scma::{codebook_metrics as metrics, ScmaSystem};
use otfs_scma_core::sim::{self, ExperimentConfig, ResultRow, SchemeKind, SeReportRow};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: otfs_scma_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(toml: &str, overrides: Vec<String>) -> PyResult<ExperimentConfig> {
    let cfg = ExperimentConfig::from_toml(toml, &overrides).map_err(err)?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn result_dict<'py>(py: Python<'py>, r: &ResultRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("eb_n0_db", r.eb_n0_db)?;
    d.set_item("scheme", r.scheme)?;
    d.set_item("frames", r.frames)?;
    d.set_item("bit_errors", r.bit_errors)?;
    d.set_item("total_bits", r.total_bits)?;
    d.set_item("ber", r.ber)?;
    d.set_item("ber_std_err", r.ber_std_err)?;
    d.set_item("avg_iters", r.avg_iters)?;
    d.set_item("avg_mse_final", r.avg_mse_final)?;
    d.set_item("wall_time_s", r.wall_time_s)?;
    d.set_item("seed", r.seed)?;
    Ok(d)
}

fn se_dict<'py>(py: Python<'py>, r: &SeReportRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("eb_n0_db", r.eb_n0_db)?;
    d.set_item("iteration", r.iteration)?;
    d.set_item("channels", r.channels)?;
    d.set_item("sim_mse", r.sim_mse)?;
    d.set_item("se_mse", r.se_mse)?;
    d.set_item("mse_ratio", r.mse_ratio)?;
    d.set_item("sim_lmmse_var", r.sim_lmmse_var)?;
    d.set_item("se_lmmse_var", r.se_lmmse_var)?;
    d.set_item("lmmse_rel_err", r.lmmse_rel_err)?;
    Ok(d)
}

/// Config with defaults filled in, as TOML.
#[pyfunction]
#[pyo3(signature = (toml = "", overrides = vec![]))]
fn validate_config(toml: &str, overrides: Vec<String>) -> PyResult<String> {
    let cfg = config(toml, overrides)?;
    sim::Experiment::new(cfg.clone()).map_err(err)?;
    cfg.to_toml().map_err(err)
}

/// Runs the configured schemes (all four with `compare=True`).
#[pyfunction]
#[pyo3(signature = (toml = "", overrides = vec![], compare = false))]
fn simulate<'py>(
    py: Python<'py>,
    toml: &str,
    overrides: Vec<String>,
    compare: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config(toml, overrides)?;
    let schemes = if compare {
        SchemeKind::ALL.to_vec()
    } else {
        cfg.schemes.clone()
    };
    let exp = sim::Experiment::new(cfg).map_err(err)?;
    let (rows, _) = py.detach(|| exp.run(&schemes)).map_err(err)?;
    rows.iter().map(|r| result_dict(py, r)).collect()
}

/// Results as CSV text, identical to what the CLI writes.
#[pyfunction]
#[pyo3(signature = (toml = "", overrides = vec![]))]
fn simulate_csv(py: Python<'_>, toml: &str, overrides: Vec<String>) -> PyResult<String> {
    let cfg = config(toml, overrides)?;
    let rows = py.detach(|| sim::run_experiment(&cfg)).map_err(err)?;
    sim::results_csv(&rows).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (toml = "", overrides = vec![]))]
fn se_report<'py>(
    py: Python<'py>,
    toml: &str,
    overrides: Vec<String>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config(toml, overrides)?;
    let rows = py.detach(|| sim::run_se_report(&cfg)).map_err(err)?;
    rows.iter().map(|r| se_dict(py, r)).collect()
}

/// N0 for the built-in system.
#[pyfunction]
fn ebn0_to_n0(eb_n0_db: f64) -> f64 {
    sim::ebn0_to_n0(eb_n0_db, &ScmaSystem::standard())
}

/// `(med, mpd)` of the built-in power-normalized codebook.
#[pyfunction]
fn codebook_metrics() -> PyResult<(f64, f64)> {
    let sys = ScmaSystem::standard();
    let m = metrics(&sys.codebook, &sys.graph).map_err(err)?;
    Ok((m.med, m.mpd))
}

fn transform(m: usize, n: usize, mut v: Vec<Complex64>, forward: bool) -> PyResult<Vec<Complex64>> {
    let dims = GridDims::new(m, n).map_err(err)?;
    if v.len() != dims.len() {
        return Err(PyValueError::new_err(format!(
            "expected {} samples, got {}",
            dims.len(),
            v.len()
        )));
    }
    let t = OtfsTransform::cached(dims);
    if forward {
        t.dd_to_time_in_place(&mut v);
    } else {
        t.time_to_dd_in_place(&mut v);
    }
    Ok(v)
}

/// Delay-Doppler vector (index n*M + m) to time samples.
#[pyfunction]
fn dd_to_time(m: usize, n: usize, x: Vec<Complex64>) -> PyResult<Vec<Complex64>> {
    transform(m, n, x, true)
}

#[pyfunction]
fn time_to_dd(m: usize, n: usize, s: Vec<Complex64>) -> PyResult<Vec<Complex64>> {
    transform(m, n, s, false)
}

#[pymodule]
fn otfs_scma(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("RESULTS_VERSION_LINE", sim::RESULTS_VERSION_LINE)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_csv, m)?)?;
    m.add_function(wrap_pyfunction!(se_report, m)?)?;
    m.add_function(wrap_pyfunction!(ebn0_to_n0, m)?)?;
    m.add_function(wrap_pyfunction!(codebook_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(dd_to_time, m)?)?;
    m.add_function(wrap_pyfunction!(time_to_dd, m)?)?;
    Ok(())
}

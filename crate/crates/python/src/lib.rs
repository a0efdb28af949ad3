//! Python module `periodic_mdp`.
//!
//! Thin wrappers over the core crate: configurations travel as TOML text,
//! results come back as dicts and lists of floats. Long computations release
//! the interpreter lock.

use std::path::PathBuf;

use periodic_mdp_core::algorithms::{loglog_slope, run_protocol, Framework};
use periodic_mdp_core::environments::{Environment, Preset};
use periodic_mdp_core::harness::{self, OracleSizes, RunConfig};
use periodic_mdp_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Schema { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Names of the built-in environments.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    Preset::ALL.iter().map(|p| p.name()).collect()
}

/// Default run configuration as TOML.
#[pyfunction]
fn default_config() -> PyResult<String> {
    RunConfig::default().to_toml_string().map_err(to_py)
}

/// Runs a configuration given as TOML text and writes its artifacts.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None, resume=false))]
fn run<'py>(py: Python<'py>, config: &str, out_dir: Option<PathBuf>, resume: bool) -> PyResult<Bound<'py, PyDict>> {
    let mut c = RunConfig::from_toml_str(config).map_err(to_py)?;
    if let Some(dir) = out_dir {
        c.output.dir = dir;
    }
    let s = py.detach(|| harness::run(&c, resume)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("episodes", s.episodes)?;
    d.set_item("final_regret", s.final_regret)?;
    d.set_item("loglog_slope", s.loglog_slope)?;
    d.set_item("last_decile_rho_gap", s.last_decile_rho_gap)?;
    d.set_item("comparator_gap", s.comparator_gap)?;
    d.set_item("out_dir", s.out_dir)?;
    Ok(d)
}

/// Runs a preset in memory and returns its per-episode series.
#[pyfunction]
#[pyo3(signature = (preset, framework="k", episodes=100, seed=0, noise=0.1))]
fn simulate<'py>(
    py: Python<'py>,
    preset: &str,
    framework: &str,
    episodes: usize,
    seed: u64,
    noise: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let preset: Preset = preset.parse().map_err(to_py)?;
    let framework: Framework = framework.parse().map_err(to_py)?;
    let mut config = RunConfig::default().protocol;
    config.framework = framework;
    config.num_episodes = episodes;
    config.seed = seed;
    let ledger = py
        .detach(|| {
            let env = Environment::preset(preset, noise)?;
            run_protocol(&env.kernel, &env.rho, env.objective.as_ref(), config)
        })
        .map_err(to_py)?;
    let column = |f: fn(&periodic_mdp_core::algorithms::EpisodeRecord) -> f64| -> Vec<f64> {
        ledger.records.iter().map(f).collect()
    };
    let regret = column(|r| r.regret_cum);
    let d = PyDict::new(py);
    d.set_item("loglog_slope", loglog_slope(&regret))?;
    d.set_item("regret_cum", regret)?;
    d.set_item("loss", column(|r| r.loss))?;
    d.set_item("comparator_loss", column(|r| r.comparator_loss))?;
    d.set_item("rho_gap_l1", column(|r| r.rho_gap))?;
    d.set_item("lambda_final", column(|r| r.diagnostics.lambda_final))?;
    Ok(d)
}

/// Reads `ledger.csv` into a dict of columns.
#[pyfunction]
fn read_ledger<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let rows = harness::read_ledger(&path).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("episode", rows.iter().map(|r| r.episode).collect::<Vec<_>>())?;
    d.set_item("loss", rows.iter().map(|r| r.loss).collect::<Vec<_>>())?;
    d.set_item("comparator_loss", rows.iter().map(|r| r.comparator_loss).collect::<Vec<_>>())?;
    d.set_item("regret_cum", rows.iter().map(|r| r.regret_cum).collect::<Vec<_>>())?;
    d.set_item("rho_gap_l1", rows.iter().map(|r| r.rho_gap_l1).collect::<Vec<_>>())?;
    d.set_item("rho_tilde_gap_l1", rows.iter().map(|r| r.rho_tilde_gap_l1).collect::<Vec<_>>())?;
    d.set_item("lambda_final", rows.iter().map(|r| r.lambda_final).collect::<Vec<_>>())?;
    d.set_item("dual_iters", rows.iter().map(|r| r.dual_iters).collect::<Vec<_>>())?;
    d.set_item("g_final", rows.iter().map(|r| r.g_final).collect::<Vec<_>>())?;
    d.set_item("alpha_bar", rows.iter().map(|r| r.alpha_bar).collect::<Vec<_>>())?;
    Ok(d)
}

/// Oracle tables as `(title, passed, rendered)` tuples.
#[pyfunction]
#[pyo3(signature = (quick=true, seed=0))]
fn oracle_tables(py: Python<'_>, quick: bool, seed: u64) -> PyResult<Vec<(String, bool, String)>> {
    let sizes = if quick { OracleSizes::quick() } else { OracleSizes::full() };
    let tables = py.detach(|| harness::oracle_tables(sizes, seed)).map_err(to_py)?;
    Ok(tables.into_iter().map(|t| (t.title.clone(), t.passed, t.render())).collect())
}

#[pymodule]
pub fn periodic_mdp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(read_ledger, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_tables, m)?)?;
    Ok(())
}

//! Python bindings: thin wrappers returning JSON or CSV strings.

use std::path::Path;

use promptlab::bounds::{self, BoundInputs, IclConfig, Y_SET_CAP};
use promptlab::prompts::PromptConfig;
use promptlab::world::World;
use promptlab::{cli, Error};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs the command line with the given arguments and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cli::main_with_args(std::iter::once("promptlab".to_string()).chain(args))
}

/// Summary of a world file as JSON.
#[pyfunction]
fn describe_world(path: &str) -> PyResult<String> {
    let w = World::load(Path::new(path)).map_err(to_py)?;
    json(&cli::describe(&w).map_err(to_py)?)
}

/// ICL sweep over m in `m_lo..=m_hi`, returned as CSV.
#[pyfunction]
#[pyo3(signature = (world, prompt, m_lo, m_hi, seed, parallel=1))]
fn icl_sweep(world: &str, prompt: &str, m_lo: usize, m_hi: usize, seed: u64, parallel: usize) -> PyResult<String> {
    let w = World::load(Path::new(world)).map_err(to_py)?;
    let p = PromptConfig::load(Path::new(prompt)).map_err(to_py)?;
    let full = p.icl_prompt(&w, p.demos.len()).map_err(to_py)?;
    let cfg = IclConfig {
        demos: full.demos,
        query: full.query,
        r: p.r.unwrap_or(1),
        y_cap: Y_SET_CAP,
        seed,
        big_n: None,
        delta: 0.05,
        parallel,
    };
    let reps = bounds::run_icl_sweep(&w, &cfg, m_lo..=m_hi).map_err(to_py)?;
    bounds::reports_to_csv(&reps).map_err(to_py)
}

/// Randomized proposition checks as JSON.
#[pyfunction]
#[pyo3(signature = (trials, seed, parallel=1))]
fn verify_props(trials: usize, seed: u64, parallel: usize) -> PyResult<String> {
    json(&bounds::verify_propositions(trials, seed, parallel).map_err(to_py)?)
}

/// Closed-form ICL and CoT right-hand sides for a JSON object of inputs.
#[pyfunction]
fn bound_calc(inputs: &str) -> PyResult<String> {
    let inp: BoundInputs = serde_json::from_str(inputs).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cot = bounds::rhs_cot(&inp, false).map_err(to_py)?;
    let icl = bounds::rhs_icl(&inp);
    json(&serde_json::json!({
        "pretraining": bounds::rhs_pretraining(&inp),
        "icl": { "components": icl, "total": icl.total(), "rate": bounds::icl_rate(&inp) },
        "cot": { "components": cot, "total": cot.total() },
    }))
}

#[pymodule]
fn promptlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_function(wrap_pyfunction!(describe_world, m)?)?;
    m.add_function(wrap_pyfunction!(icl_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(verify_props, m)?)?;
    m.add_function(wrap_pyfunction!(bound_calc, m)?)?;
    Ok(())
}

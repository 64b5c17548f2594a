//! Python bindings: energies, finite-difference checks, adapted charts and
//! the verify matrix.

use ::nijlab::acstruct::{shear_sine, standard_structure, ACField};
use ::nijlab::cli::{dispatch, verify_suite};
use ::nijlab::error::NijError;
use ::nijlab::grid::Grid;
use ::nijlab::jets::{correction_coeffs, verify_chart, JetData};
use ::nijlab::variation::{energy, probe_directions, Functional, Variation};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn err(e: NijError) -> PyErr {
    match e {
        NijError::InvalidConfig(_) | NijError::RejectedInput(_) | NijError::ShapeMismatch { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn structure(family: &str, n: usize, res: usize, amp: f64) -> PyResult<ACField> {
    let grid = Grid::new(n, res).map_err(err)?;
    match family {
        "standard" => Ok(standard_structure(grid)),
        "shear" => Ok(shear_sine(grid, amp)),
        other => Err(PyValueError::new_err(format!("unknown family {other:?}"))),
    }
}

fn functional(name: &str) -> PyResult<Functional> {
    name.parse().map_err(err)
}

/// Both energies, `{"N": .., "Ntilde": ..}`.
#[pyfunction]
#[pyo3(signature = (family = "shear", n = 2, res = 8, amp = 0.3))]
fn energies<'py>(py: Python<'py>, family: &str, n: usize, res: usize, amp: f64) -> PyResult<Bound<'py, PyDict>> {
    let j = structure(family, n, res, amp)?;
    let d = PyDict::new(py);
    d.set_item("N", energy(&j, Functional::N).map_err(err)?)?;
    d.set_item("Ntilde", energy(&j, Functional::Ntilde).map_err(err)?)?;
    Ok(d)
}

/// Analytic first variation against central differences along the retraction.
#[pyfunction]
#[pyo3(signature = (family = "shear", functional_name = "Ntilde", eps = 1e-4, directions = 3, seed = 0, n = 2, res = 8, amp = 0.3))]
#[allow(clippy::too_many_arguments)]
fn grad_check<'py>(
    py: Python<'py>,
    family: &str,
    functional_name: &str,
    eps: f64,
    directions: usize,
    seed: u64,
    n: usize,
    res: usize,
    amp: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let f = functional(functional_name)?;
    let j = structure(family, n, res, amp)?;
    let var = Variation::new(&j).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reports = probe_directions(&var, f, &mut rng, directions)
        .iter()
        .map(|u| var.fd_directional(u, f, eps))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    to_py(py, &serde_json::to_value(reports).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

/// Squared pointwise norm `|N|²` at every grid point, in grid order.
#[pyfunction]
#[pyo3(signature = (family = "shear", n = 2, res = 8, amp = 0.3))]
fn nijenhuis_density(family: &str, n: usize, res: usize, amp: f64) -> PyResult<Vec<f64>> {
    let j = structure(family, n, res, amp)?;
    Ok(Variation::new(&j).map_err(err)?.norm_squared().to_vec())
}

/// Adapted chart for a JSON jet document: correction and verification record.
#[pyfunction]
fn coords<'py>(py: Python<'py>, jets_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let doc: Value = serde_json::from_str(jets_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let jd = JetData::from_json(&doc).map_err(err)?;
    let cc = correction_coeffs(&jd);
    let v = verify_chart(&cc, &jd).map_err(err)?;
    to_py(py, &serde_json::json!({ "correction": cc.to_json(), "verification": v.to_json(), "exact": v.is_exact() }))
}

/// One suite of the invariant matrix as a list of check records.
#[pyfunction]
#[pyo3(signature = (suite, seed = 0))]
fn verify<'py>(py: Python<'py>, suite: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let checks = verify_suite(suite, seed).map_err(err)?;
    to_py(py, &serde_json::to_value(checks).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

/// Runs the command-line interface with `argv` (without the program name).
#[pyfunction]
fn run_cli(argv: Vec<String>) -> i32 {
    dispatch(std::iter::once("nijlab".to_string()).chain(argv))
}

#[pymodule]
#[pyo3(name = "nijlab")]
fn nijlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(energies, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(nijenhuis_density, m)?)?;
    m.add_function(wrap_pyfunction!(coords, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}

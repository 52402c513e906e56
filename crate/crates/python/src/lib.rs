//! Python bindings: weight solving, the qubit scenario oracles and seeded
//! Monte Carlo estimators.

use ancilla_qpd::estimate::{estimate_correlation, estimate_lgi, estimate_qpd, standard_e_choices, Estimate, QpdTable};
use ancilla_qpd::povm::builtin_set;
use ancilla_qpd::protocol::{exact_distribution, sample, NoiseModel, Protocol};
use ancilla_qpd::qmodel::{Observable, RyConvention};
use ancilla_qpd::scenario::{self, correlation_weights, qpd_weight_table};
use ancilla_qpd::weights::{self, Objective, WeightScope};
use ancilla_qpd::Error;
use num_complex::Complex64;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyTuple};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Infeasible { .. } | Error::Solver(_) | Error::SingularConfusion(_) => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn convention(name: &str) -> PyResult<RyConvention> {
    match name {
        "standard" => Ok(RyConvention::Standard),
        "literal" => Ok(RyConvention::Literal),
        _ => Err(PyValueError::new_err(format!("unknown convention {name:?}"))),
    }
}

#[pyclass(name = "WeightVector", frozen)]
struct PyWeightVector {
    inner: weights::WeightVector,
}

#[pymethods]
impl PyWeightVector {
    #[getter]
    fn set(&self) -> String {
        self.inner.set.clone()
    }

    #[getter]
    fn gammas(&self) -> Vec<Complex64> {
        self.inner.gammas.clone()
    }

    #[getter]
    fn gamma_max(&self) -> f64 {
        self.inner.gamma_max
    }

    #[getter]
    fn scope(&self) -> &'static str {
        match self.inner.scope {
            WeightScope::Full => "full",
            WeightScope::TraceOnly => "trace_only",
        }
    }

    /// Largest reconstruction error over the matrix units.
    fn residual(&self) -> PyResult<f64> {
        let set = builtin_set(&self.inner.set).map_err(py_err)?;
        weights::verify_weights(&set, &self.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("WeightVector(set={:?}, gamma_max={})", self.inner.set, self.inner.gamma_max)
    }
}

/// Weights realizing `B ρ A` on a built-in measurement set.
#[pyfunction]
#[pyo3(signature = (set, a, b = "I", objective = "min_inf", scope = "full"))]
fn solve_weights(set: &str, a: &str, b: &str, objective: &str, scope: &str) -> PyResult<PyWeightVector> {
    let ms = builtin_set(set).map_err(py_err)?;
    let a = Observable::named(a, ms.dim()).map_err(py_err)?;
    let b = Observable::named(b, ms.dim()).map_err(py_err)?;
    let objective = match objective {
        "min_inf" => Objective::MinInfNorm,
        "any" => Objective::AnyFeasible,
        _ => return Err(PyValueError::new_err(format!("unknown objective {objective:?}"))),
    };
    let scope = match scope {
        "full" => WeightScope::Full,
        "trace_only" => WeightScope::TraceOnly,
        _ => return Err(PyValueError::new_err(format!("unknown scope {scope:?}"))),
    };
    let inner = weights::weights_for(&ms, &b, &a, scope, objective).map_err(py_err)?;
    Ok(PyWeightVector { inner })
}

#[pyfunction]
fn hoeffding_n(gamma_max_product: f64, epsilon: f64, delta: f64) -> PyResult<u64> {
    weights::hoeffding_n(gamma_max_product, epsilon, delta).map_err(py_err)
}

#[pyfunction]
fn lgi_closed_form(theta: f64) -> f64 {
    scenario::lgi_closed_form(theta)
}

fn estimate_tuple(e: &Estimate) -> (Complex64, f64, f64) {
    (e.value, e.sem_re, e.sem_im)
}

fn table_dict<'py>(py: Python<'py>, q: &QpdTable) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (index, value) in q.iter() {
        d.set_item(PyTuple::new(py, index)?, value)?;
    }
    Ok(d)
}

/// Qubit scenario: `|+⟩`, `R_x(θ)` then `R_y(θ²)`.
#[pyclass(name = "Scenario", frozen)]
struct PyScenario {
    inner: scenario::Scenario,
}

impl PyScenario {
    fn protocol(&self, theta: f64, kind: &str) -> PyResult<Protocol> {
        let s = &self.inner;
        match kind {
            "two_time" => s.two_time_protocol(theta),
            "three_time" => s.three_time_protocol(theta),
            "qpd2" => s.qpd_protocol(theta, 2),
            "qpd3" => s.qpd_protocol(theta, 3),
            "projective" => s.projective_protocol(theta, 3),
            _ => return Err(PyValueError::new_err(format!("unknown protocol {kind:?}"))),
        }
        .map_err(py_err)
    }
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (convention = "standard"))]
    fn new(convention: &str) -> PyResult<Self> {
        Ok(Self {
            inner: scenario::Scenario::new(self::convention(convention)?),
        })
    }

    fn exact_c2(&self, theta: f64) -> PyResult<Complex64> {
        self.inner.exact_c2(theta).map_err(py_err)
    }

    fn exact_c3(&self, theta: f64) -> PyResult<Complex64> {
        self.inner.exact_c3(theta).map_err(py_err)
    }

    /// Exact QPD as `{index tuple: complex}`.
    fn exact_qpd<'py>(&self, py: Python<'py>, theta: f64, times: usize) -> PyResult<Bound<'py, PyDict>> {
        table_dict(py, &self.inner.exact_qpd(theta, times).map_err(py_err)?)
    }

    fn exact_lgi(&self, theta: f64) -> PyResult<f64> {
        Ok(self.inner.exact_lgi(theta).map_err(py_err)?.k)
    }

    fn noisy_lgi(&self, theta: f64, depolarizing_p: f64) -> PyResult<f64> {
        let noise = NoiseModel {
            entangling_depolarizing_p: depolarizing_p,
            ..NoiseModel::noiseless()
        };
        Ok(self.inner.noisy_lgi(theta, &noise).map_err(py_err)?.k)
    }

    /// Outcome probabilities `{tuple: p}` for `two_time`, `three_time`,
    /// `qpd2`, `qpd3` or `projective`.
    fn distribution<'py>(&self, py: Python<'py>, theta: f64, kind: &str) -> PyResult<Bound<'py, PyDict>> {
        let dist = exact_distribution(&self.protocol(theta, kind)?).map_err(py_err)?;
        let d = PyDict::new(py);
        for (index, p) in dist.iter() {
            d.set_item(PyTuple::new(py, index)?, p)?;
        }
        Ok(d)
    }

    fn sample(&self, theta: f64, kind: &str, n: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
        let records = sample(&self.protocol(theta, kind)?, n, seed).map_err(py_err)?;
        Ok(records.into_iter().map(|r| r.outcomes).collect())
    }

    /// Sampled `C_ZZ` (`times = 2`) or `C_ZZZ` (`times = 3`) as
    /// `(value, sem_re, sem_im)`.
    fn estimate_correlation(&self, theta: f64, times: usize, n: usize, seed: u64) -> PyResult<(Complex64, f64, f64)> {
        let kind = if times == 2 { "two_time" } else { "three_time" };
        let records = sample(&self.protocol(theta, kind)?, n, seed).map_err(py_err)?;
        let w = correlation_weights(times).map_err(py_err)?;
        Ok(estimate_tuple(&estimate_correlation(&records, &w).map_err(py_err)?))
    }

    fn estimate_qpd<'py>(&self, py: Python<'py>, theta: f64, times: usize, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let kind = if times == 2 { "qpd2" } else { "qpd3" };
        let records = sample(&self.protocol(theta, kind)?, n, seed).map_err(py_err)?;
        let table = qpd_weight_table(times).map_err(py_err)?;
        table_dict(py, &estimate_qpd(&records, &table).map_err(py_err)?)
    }

    /// Sampled Leggett–Garg `K` as `(value, sem)`.
    fn estimate_lgi(&self, theta: f64, n: usize, seed: u64) -> PyResult<(f64, f64)> {
        let records = sample(&self.protocol(theta, "qpd3")?, n, seed).map_err(py_err)?;
        let table = qpd_weight_table(3).map_err(py_err)?;
        let k = estimate_lgi(&records, &table, &standard_e_choices()).map_err(py_err)?.k;
        Ok((k.value.re, k.sem_re))
    }
}

#[pymodule]
fn ancilla_qpd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWeightVector>()?;
    m.add_class::<PyScenario>()?;
    m.add_function(wrap_pyfunction!(solve_weights, m)?)?;
    m.add_function(wrap_pyfunction!(hoeffding_n, m)?)?;
    m.add_function(wrap_pyfunction!(lgi_closed_form, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_weights_matches_known_optimum() {
        let w = solve_weights("zy", "Z", "I", "min_inf", "full").unwrap();
        assert!((w.gamma_max() - 2.0).abs() < 1e-9);
        assert!(w.residual().unwrap() < 1e-10);
        assert_eq!(w.scope(), "full");
    }

    #[test]
    fn bad_names_are_rejected() {
        assert!(solve_weights("zy", "Z", "I", "fastest", "full").is_err());
        assert!(solve_weights("zy", "Z", "I", "min_inf", "half").is_err());
        assert!(convention("sideways").is_err());
    }

    #[test]
    fn scenario_lgi() {
        let s = PyScenario::new("standard").unwrap();
        let t = 0.74 * std::f64::consts::PI;
        assert!((s.exact_lgi(t).unwrap() - lgi_closed_form(t)).abs() < 1e-12);
        assert_eq!(s.sample(0.3, "qpd3", 20, 4).unwrap(), s.sample(0.3, "qpd3", 20, 4).unwrap());
    }
}

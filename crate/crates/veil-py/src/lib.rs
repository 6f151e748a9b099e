//! Python bindings for the core types and operations: principle
//! evaluation, payoff arithmetic, seeded class draws, chi-square
//! comparison, the shipped reference tables, and scripted experiment runs.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use veil_core::analysis::{
    chi_square_independence, disagreement_rate, load_reference_tables, tabulate_outcomes,
    ChiSquare, OutcomeTable,
};
use veil_core::deliberation::OutcomeResult;
use veil_core::domain::{
    self, ClassProbabilities, IncomeDistribution, PrincipleKind, SituationSet,
};
use veil_core::ledger::{validate_config, RawConfig};
use veil_core::replay::replay_transcript;
use veil_core::rng::rng_for_group;
use veil_core::transcript::read_transcript;
use veil_core::workflow::{run_experiment, ExecutionOptions};

fn value_error(message: impl ToString) -> PyErr {
    PyValueError::new_err(message.to_string())
}

/// A distributive-justice principle, optionally carrying a constraint.
#[pyclass(name = "Principle")]
#[derive(Clone)]
struct PyPrinciple {
    inner: domain::Principle,
}

#[pymethods]
impl PyPrinciple {
    #[new]
    #[pyo3(signature = (kind, constraint=None))]
    fn new(kind: &str, constraint: Option<f64>) -> PyResult<Self> {
        let kind = PrincipleKind::from_id(kind)
            .ok_or_else(|| value_error(format!("unknown principle kind `{kind}`")))?;
        let inner = domain::Principle::new(kind, constraint).map_err(value_error)?;
        Ok(PyPrinciple { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().id()
    }

    #[getter]
    fn constraint(&self) -> Option<f64> {
        self.inner.constraint()
    }

    fn __repr__(&self) -> String {
        format!("Principle({})", self.inner)
    }
}

/// A named set of candidate income distributions.
#[pyclass(name = "Situation")]
#[derive(Clone)]
struct PySituation {
    inner: domain::Situation,
}

#[pymethods]
impl PySituation {
    #[new]
    #[pyo3(signature = (name, distributions, probabilities=None))]
    fn new(
        name: &str,
        distributions: Vec<(String, [f64; 5])>,
        probabilities: Option<[f64; 5]>,
    ) -> PyResult<Self> {
        let dists = distributions
            .into_iter()
            .map(|(label, incomes)| IncomeDistribution::new(label, incomes))
            .collect::<Result<Vec<_>, _>>()
            .map_err(value_error)?;
        let probs = match probabilities {
            Some(p) => ClassProbabilities::new(p).map_err(value_error)?,
            None => ClassProbabilities::default(),
        };
        let inner = domain::Situation::new(name, dists, probs, BTreeMap::new())
            .map_err(value_error)?;
        Ok(PySituation { inner })
    }

    /// Loads one named situation from the dataset shipped with the engine.
    #[staticmethod]
    fn embedded(name: &str) -> PyResult<Self> {
        SituationSet::embedded()
            .get(name)
            .cloned()
            .map(|inner| PySituation { inner })
            .ok_or_else(|| value_error(format!("no embedded situation `{name}`")))
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner
            .distributions()
            .iter()
            .map(|d| d.label().to_string())
            .collect()
    }

    fn weighted_average(&self, label: &str) -> PyResult<f64> {
        let dist = self.inner.distribution(label).map_err(value_error)?;
        Ok(domain::weighted_average(dist, self.inner.probabilities()))
    }

    /// The distribution label the principle selects here.
    fn evaluate(&self, principle: &PyPrinciple) -> PyResult<String> {
        domain::evaluate_principle(&principle.inner, &self.inner)
            .map(str::to_string)
            .map_err(value_error)
    }

    /// (ok, achievable_bound): feasibility of a constrained principle.
    fn validate_constraint(&self, principle: &PyPrinciple) -> PyResult<(bool, Option<f64>)> {
        match domain::validate_constraint(&principle.inner, &self.inner).map_err(value_error)? {
            domain::ConstraintCheck::Ok => Ok((true, None)),
            domain::ConstraintCheck::Violation { achievable, .. } => Ok((false, Some(achievable))),
        }
    }

    fn scale(&self, factor: f64) -> PyResult<PySituation> {
        domain::scale_situation(&self.inner, factor)
            .map(|inner| PySituation { inner })
            .map_err(value_error)
    }
}

/// Payoff for a yearly income at the engine's conversion rate, in dollars.
#[pyfunction]
fn compute_payoff(income: f64, scale: f64) -> PyResult<f64> {
    if income < 0.0 || scale < 1.0 {
        return Err(value_error("income must be >= 0 and scale >= 1"));
    }
    Ok(domain::compute_payoff(income, scale).dollars())
}

/// `n` seeded income-class draws under the given probabilities.
#[pyfunction]
#[pyo3(signature = (probabilities, n, seed))]
fn draw_classes(probabilities: [f64; 5], n: usize, seed: u64) -> PyResult<Vec<usize>> {
    let probs = ClassProbabilities::new(probabilities).map_err(value_error)?;
    let mut rng = rng_for_group(seed, 0);
    Ok((0..n)
        .map(|_| domain::draw_income_class(&probs, &mut rng))
        .collect())
}

/// Pearson chi-square over two 5-category outcome-count vectors.
/// Returns (statistic, degrees_of_freedom, p_value) or None when the
/// contingency is degenerate.
#[pyfunction]
fn chi_square(a: [u64; 5], b: [u64; 5]) -> Option<(f64, u64, f64)> {
    let ta = OutcomeTable::from_counts("a", a);
    let tb = OutcomeTable::from_counts("b", b);
    match chi_square_independence(&ta, &tb) {
        ChiSquare::Result {
            statistic,
            degrees_of_freedom,
            p_value,
        } => Some((statistic, degrees_of_freedom, p_value)),
        ChiSquare::NotTestable { .. } => None,
    }
}

/// The shipped reference outcome tables as a dict of
/// label -> {"counts": [...], "total": n, "disagreement": fraction}.
#[pyfunction]
fn reference_tables(py: Python<'_>) -> PyResult<Py<PyDict>> {
    let reference = load_reference_tables();
    let out = PyDict::new(py);
    for column in &reference.columns {
        let entry = PyDict::new(py);
        entry.set_item("block", &column.block)?;
        entry.set_item("counts", column.counts.to_vec())?;
        entry.set_item("total", column.total)?;
        entry.set_item(
            "disagreement",
            disagreement_rate(&column.to_table()),
        )?;
        out.set_item(&column.label, entry)?;
    }
    Ok(out.into())
}

/// Runs a scripted experiment config in-process and returns the outcome
/// summary: {"groups": n, "completed": n, "outcomes": {category: count}}.
#[pyfunction]
#[pyo3(signature = (config_json, master_seed))]
fn run_scripted(py: Python<'_>, config_json: &str, master_seed: u64) -> PyResult<Py<PyDict>> {
    let raw = RawConfig::from_json(config_json).map_err(value_error)?;
    let config = validate_config(&raw, None).map_err(|errors| {
        value_error(
            errors
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        )
    })?;
    let runs = run_experiment(
        &config,
        master_seed,
        &ExecutionOptions {
            canonical: true,
            ..ExecutionOptions::default()
        },
    )
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let records: Vec<_> = runs.iter().filter_map(|r| r.record.clone()).collect();
    let table = tabulate_outcomes(&records, "run");

    let out = PyDict::new(py);
    out.set_item("groups", runs.len())?;
    out.set_item("completed", records.len())?;
    let outcomes = PyDict::new(py);
    for category in veil_core::analysis::OutcomeCategory::ALL {
        outcomes.set_item(category.id(), table.count(category))?;
    }
    out.set_item("outcomes", outcomes)?;
    let consensus = PyList::empty(py);
    for record in &records {
        match &record.outcome.result {
            OutcomeResult::Consensus { principle } => {
                consensus.append(principle.kind().id())?;
            }
            OutcomeResult::NoAgreement => consensus.append("no_agreement")?,
        }
    }
    out.set_item("per_group", consensus)?;
    Ok(out.into())
}

/// The scripted smoke configuration shipped with the engine.
#[pyfunction]
fn smoke_config() -> &'static str {
    veil_core::ledger::scripted_smoke_config_text()
}

/// Replays a transcript file; returns the list of issues (empty = clean).
#[pyfunction]
fn replay_check(path: &str) -> PyResult<Vec<String>> {
    let events =
        read_transcript(std::path::Path::new(path)).map_err(|e| value_error(e.to_string()))?;
    Ok(replay_transcript(&events).issues)
}

#[pymodule]
fn veil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPrinciple>()?;
    m.add_class::<PySituation>()?;
    m.add_function(wrap_pyfunction!(compute_payoff, m)?)?;
    m.add_function(wrap_pyfunction!(draw_classes, m)?)?;
    m.add_function(wrap_pyfunction!(chi_square, m)?)?;
    m.add_function(wrap_pyfunction!(reference_tables, m)?)?;
    m.add_function(wrap_pyfunction!(run_scripted, m)?)?;
    m.add_function(wrap_pyfunction!(smoke_config, m)?)?;
    m.add_function(wrap_pyfunction!(replay_check, m)?)?;
    Ok(())
}

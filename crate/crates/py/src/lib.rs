use std::collections::BTreeSet;
use std::path::PathBuf;

use nesy_core::binarization::{BinarizationTable, TableRow};
use nesy_core::evaluation::{check_paper_claims, round_half_up as round_core, PaperTables};
use nesy_core::inference::{FactSet, Interpreter};
use nesy_core::pipeline::{self, Overrides, PipelineConfig};
use nesy_core::rules::{fold_sem_with, parse_program, ruleset_size, FoldConfig, RuleSet};
use nesy_core::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::MissingArtifact(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// A learned or parsed rule-set.
#[pyclass(name = "RuleSet", frozen)]
struct PyRuleSet {
    inner: RuleSet,
}

#[pymethods]
impl PyRuleSet {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let inner = parse_program(text, None).map_err(to_py)?;
        inner.validate().map_err(to_py)?;
        Ok(PyRuleSet { inner })
    }

    /// Predicted class for the set of filters that are on, or None.
    fn classify(&self, facts: Vec<usize>) -> PyResult<Option<String>> {
        let interp = Interpreter::new(&self.inner).map_err(to_py)?;
        Ok(interp.classify(&FactSet::new("img", facts)).map(str::to_string))
    }

    /// Rendered justification tree, or None when no rule fires.
    #[pyo3(signature = (facts, as_json = false))]
    fn justify(&self, facts: Vec<usize>, as_json: bool) -> PyResult<Option<String>> {
        let interp = Interpreter::new(&self.inner).map_err(to_py)?;
        match interp.justify(&FactSet::new("img", facts)) {
            None => Ok(None),
            Some(j) if as_json => j.to_json().map(Some).map_err(to_py),
            Some(j) => Ok(Some(j.render_text())),
        }
    }

    #[getter]
    fn size(&self) -> usize {
        ruleset_size(&self.inner)
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __str__(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        format!(
            "RuleSet(class_rules={}, ab_rules={}, size={})",
            self.inner.class_rules.len(),
            self.inner.ab_rules.len(),
            self.size()
        )
    }
}

/// Learns a rule-set from binary rows and their string labels.
#[pyfunction]
#[pyo3(signature = (rows, labels, ratio = 0.8, tail = 5e-3))]
fn fold_sem(rows: Vec<Vec<u8>>, labels: Vec<String>, ratio: f64, tail: f64) -> PyResult<PyRuleSet> {
    if rows.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} rows but {} labels", rows.len(), labels.len())));
    }
    let class_names: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let num_features = rows.first().map_or(0, Vec::len);
    let table_rows = rows
        .into_iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (features, l))| TableRow {
            id: format!("row{i:06}"),
            features,
            label: class_names.binary_search(l).expect("label collected above"),
        })
        .collect();
    let table = BinarizationTable::new(num_features, class_names, table_rows).map_err(to_py)?;
    let cfg = FoldConfig::new(ratio, tail);
    cfg.validate().map_err(to_py)?;
    let outcome = fold_sem_with(&table, &cfg).map_err(to_py)?;
    Ok(PyRuleSet { inner: outcome.rules })
}

/// Claims ledger for the bundled table transcriptions, as JSON.
#[pyfunction]
fn check_claims() -> PyResult<String> {
    json(&check_paper_claims(&PaperTables::embedded()))
}

#[pyfunction]
fn round_half_up(x: f64) -> i64 {
    round_core(x)
}

/// Trains from a JSON pipeline config; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, out = None))]
fn train(py: Python<'_>, config_json: &str, out: Option<PathBuf>) -> PyResult<String> {
    let cfg = PipelineConfig::from_json(config_json)
        .and_then(|c| c.resolve(&Overrides { out, ..Overrides::default() }, None))
        .map_err(to_py)?;
    let summary = py.detach(|| pipeline::cmd_train(&cfg)).map_err(to_py)?;
    json(&summary)
}

#[pyfunction]
fn extract(py: Python<'_>, checkpoint: PathBuf) -> PyResult<String> {
    json(&py.detach(|| pipeline::cmd_extract(&checkpoint)).map_err(to_py)?)
}

#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf) -> PyResult<String> {
    json(&py.detach(|| pipeline::cmd_eval(&checkpoint)).map_err(to_py)?)
}

#[pymodule]
fn nesy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRuleSet>()?;
    m.add_function(wrap_pyfunction!(fold_sem, m)?)?;
    m.add_function(wrap_pyfunction!(check_claims, m)?)?;
    m.add_function(wrap_pyfunction!(round_half_up, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

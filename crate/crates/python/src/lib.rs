//! Python bindings: rule files, response comparison, request rewriting,
//! learning-mode suggestions and the reliability estimate.

use std::collections::HashMap;
use std::time::Instant;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};
use serde_json::Value;

use shadowdiff::comparator::{self, ContextKind, DifferenceToken};
use shadowdiff::learning::{self, DifferenceRecord};
use shadowdiff::logs::{read_log, LogEntry};
use shadowdiff::reliability::{self, ObservationLog};
use shadowdiff::value_map::CookieJarPair;
use shadowdiff::{Headers, PairKey, Request, RequestSummary, Response, ResponsePair, SessionId, Substitutions};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any().unbind(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn serialized<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    to_py(py, &serde_json::to_value(v).map_err(value_err)?)
}

fn context_kind(name: &str) -> PyResult<ContextKind> {
    serde_json::from_value(Value::String(name.to_owned()))
        .map_err(|_| value_err(format!("unknown context kind {name:?}")))
}

/// Expected differences (`:` lines) and characteristic values (`+` lines).
#[pyclass(module = "pyshadowdiff", eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct RuleSet {
    inner: shadowdiff::RuleSet,
}

#[pymethods]
impl RuleSet {
    #[new]
    #[pyo3(signature = (expected = Vec::new(), characteristic = Vec::new()))]
    fn new(expected: Vec<String>, characteristic: Vec<String>) -> PyResult<Self> {
        let inner = shadowdiff::RuleSet::from_names(expected, characteristic).map_err(value_err)?;
        Ok(RuleSet { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_config(text)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = shadowdiff::RuleSet::load(path).map_err(value_err)?;
        Ok(RuleSet { inner })
    }

    fn serialize(&self) -> String {
        shadowdiff::serialize_config(&self.inner)
    }

    #[getter]
    fn expected(&self) -> Vec<String> {
        self.inner.expected_differences().to_vec()
    }

    #[getter]
    fn characteristic(&self) -> Vec<String> {
        self.inner.characteristic_values().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("RuleSet(expected={:?}, characteristic={:?})", self.expected(), self.characteristic())
    }
}

#[pyfunction]
fn parse_config(text: &str) -> PyResult<RuleSet> {
    let inner = shadowdiff::parse_config(text).map_err(value_err)?;
    Ok(RuleSet { inner })
}

#[pyfunction]
fn serialize_config(rules: &RuleSet) -> String {
    rules.serialize()
}

/// A buffered HTTP response.
#[pyclass(module = "pyshadowdiff", skip_from_py_object)]
#[derive(Clone)]
struct HttpResponse {
    inner: Response,
}

#[pymethods]
impl HttpResponse {
    #[new]
    #[pyo3(signature = (status, body, content_type = None, headers = Vec::new()))]
    fn new(status: u16, body: Vec<u8>, content_type: Option<&str>, headers: Vec<(String, String)>) -> Self {
        let mut h = Headers::new();
        for (n, v) in headers {
            h.push(n, v);
        }
        if let Some(ct) = content_type {
            h.set("content-type", ct);
        }
        HttpResponse {
            inner: Response::new(status, h, body),
        }
    }

    #[getter]
    fn status(&self) -> u16 {
        self.inner.status
    }

    #[getter]
    fn body<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.body)
    }
}

#[pyfunction]
fn compare_text(py: Python<'_>, main: &str, shadow: &str) -> PyResult<Py<PyAny>> {
    serialized(py, &comparator::compare_text(main, shadow))
}

/// Structural comparison of two JSON documents given as text.
#[pyfunction]
fn compare_json(py: Python<'_>, main: &str, shadow: &str) -> PyResult<Py<PyAny>> {
    let a: Value = serde_json::from_str(main).map_err(value_err)?;
    let b: Value = serde_json::from_str(shadow).map_err(value_err)?;
    serialized(py, &comparator::compare_json(&a, &b))
}

#[pyfunction]
fn tags_equal_normalized(main_tag: &str, shadow_tag: &str) -> bool {
    comparator::tags_equal_normalized(main_tag, shadow_tag)
}

/// Compares two responses under `rules`. Returns a dict with `verdict`,
/// `unexpected` (tokens) and `expected` (token and matching rule).
#[pyfunction]
#[pyo3(signature = (main, shadow, rules = None))]
fn compare_responses(
    py: Python<'_>,
    main: Option<&HttpResponse>,
    shadow: Option<&HttpResponse>,
    rules: Option<&RuleSet>,
) -> PyResult<Py<PyAny>> {
    let now = Instant::now();
    let pair = ResponsePair {
        key: PairKey::from_raw("python"),
        request_summary: RequestSummary {
            method: "GET".into(),
            uri: "/".into(),
            session: String::new(),
        },
        main_response: main.map(|r| r.inner.clone()),
        shadow_response: shadow.map(|r| r.inner.clone()),
        created_at: now,
        deadline: now,
        completed_at: Some(now),
    };
    let rules = rules.map(|r| r.inner.clone()).unwrap_or_default();
    let outcome = comparator::compare_pair(&pair, &rules);
    let expected: Vec<(&DifferenceToken, &String)> = outcome.expected.iter().map(|(t, r)| (t, r)).collect();
    let out = serde_json::json!({
        "verdict": outcome.verdict,
        "unexpected": outcome.unexpected,
        "expected": expected,
        "warnings": outcome.warnings,
    });
    to_py(py, &out)
}

/// Rewrites a client request for the shadow instance. `substitutions` maps
/// main-instance values to shadow-instance values.
#[pyfunction]
#[pyo3(signature = (method, uri, headers, body, substitutions, shadow_host = None))]
fn rewrite_request(
    py: Python<'_>,
    method: &str,
    uri: &str,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
    substitutions: HashMap<String, String>,
    shadow_host: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let mut h = Headers::new();
    for (n, v) in headers {
        h.push(n, v);
    }
    let req = Request::new(method, uri, h, body);
    let subs = Substitutions::from_map(substitutions);
    let jar = CookieJarPair::new(SessionId::from_cookie("python"));
    let out = shadowdiff::rewrite_request(&req, &subs, &jar, shadow_host);
    let dict = PyDict::new(py);
    dict.set_item("method", &out.request.method)?;
    dict.set_item("uri", &out.request.uri)?;
    let headers: Vec<(&str, &str)> = out.request.headers.iter().collect();
    dict.set_item("headers", headers)?;
    dict.set_item("body", PyBytes::new(py, &out.request.body))?;
    dict.set_item("replaced", out.replaced)?;
    dict.set_item("warnings", out.warnings)?;
    Ok(dict.into_any().unbind())
}

/// Learning-mode text for one difference.
#[pyfunction]
fn format_special(main_token: &str, shadow_token: &str, context_kind: &str, locator: &str) -> PyResult<String> {
    let record = DifferenceRecord {
        main_token: main_token.to_owned(),
        shadow_token: shadow_token.to_owned(),
        context_kind: self::context_kind(context_kind)?,
        locator: locator.to_owned(),
        pair_key: String::new(),
        timestamp: String::new(),
        request_summary: RequestSummary {
            method: String::new(),
            uri: String::new(),
            session: String::new(),
        },
    };
    Ok(learning::format_special(&record))
}

fn entries_from(log: &str) -> PyResult<Vec<LogEntry>> {
    if log.trim_start().starts_with('{') {
        log.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(value_err))
            .collect()
    } else {
        read_log(log).map_err(|e| PyOSError::new_err(format!("{log}: {e}")))
    }
}

/// Rule candidates from a difference log, given as a path or as JSON-lines
/// text. Returns a list of dicts ranked by support.
#[pyfunction]
#[pyo3(signature = (log, min_support = learning::DEFAULT_MIN_SUPPORT))]
fn suggest_rules(py: Python<'_>, log: &str, min_support: usize) -> PyResult<Py<PyAny>> {
    let records = learning::records_from_log(&entries_from(log)?);
    let list = PyList::empty(py);
    for c in learning::suggest_rules(&records, min_support) {
        let d = PyDict::new(py);
        d.set_item("name", &c.name)?;
        d.set_item("support", c.support)?;
        d.set_item("characteristic", c.characteristic)?;
        list.append(d)?;
    }
    Ok(list.into_any().unbind())
}

/// Same as `suggest_rules` but rendered as rule-file text.
#[pyfunction]
#[pyo3(signature = (log, min_support = learning::DEFAULT_MIN_SUPPORT))]
fn suggest_rule_file(log: &str, min_support: usize) -> PyResult<String> {
    let records = learning::records_from_log(&entries_from(log)?);
    Ok(learning::render_candidates(&learning::suggest_rules(&records, min_support)))
}

#[pyfunction]
fn estimate_lambda(durations: Vec<f64>) -> PyResult<f64> {
    let obs = ObservationLog::new(durations).map_err(value_err)?;
    reliability::estimate_lambda(&obs).map_err(value_err)
}

#[pyfunction]
fn standard_error(lambda_hat: f64, n: usize) -> PyResult<f64> {
    reliability::standard_error(lambda_hat, n).map_err(value_err)
}

#[pyfunction]
fn survival_probability(lambda_hat: f64, t_required: f64) -> PyResult<f64> {
    reliability::survival_probability(lambda_hat, t_required).map_err(value_err)
}

/// Decision report as a dict; `text` holds the printed form.
#[pyfunction]
fn decision_report(py: Python<'_>, durations: Vec<f64>, t_required: f64, threshold: f64) -> PyResult<Py<PyAny>> {
    let obs = ObservationLog::new(durations).map_err(value_err)?;
    let report = reliability::decision_report(&obs, t_required, threshold).map_err(value_err)?;
    let out = serialized(py, &report)?;
    out.bind(py).cast::<PyDict>()?.set_item("text", report.to_string())?;
    Ok(out)
}

#[pymodule]
fn pyshadowdiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RuleSet>()?;
    m.add_class::<HttpResponse>()?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_config, m)?)?;
    m.add_function(wrap_pyfunction!(compare_text, m)?)?;
    m.add_function(wrap_pyfunction!(compare_json, m)?)?;
    m.add_function(wrap_pyfunction!(tags_equal_normalized, m)?)?;
    m.add_function(wrap_pyfunction!(compare_responses, m)?)?;
    m.add_function(wrap_pyfunction!(rewrite_request, m)?)?;
    m.add_function(wrap_pyfunction!(format_special, m)?)?;
    m.add_function(wrap_pyfunction!(suggest_rules, m)?)?;
    m.add_function(wrap_pyfunction!(suggest_rule_file, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(standard_error, m)?)?;
    m.add_function(wrap_pyfunction!(survival_probability, m)?)?;
    m.add_function(wrap_pyfunction!(decision_report, m)?)?;
    Ok(())
}

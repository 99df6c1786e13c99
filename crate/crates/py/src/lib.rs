//! Python bindings: trajectory codec, rewards, CF graph queries and
//! hit-rate evaluation. Structured results come back as plain dicts and
//! lists; exact rewards come back as `fractions.Fraction`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trajrec_core::evaluator::{self, Scenario, ScenarioThresholds};
use trajrec_core::graph::InteractionGraph;
use trajrec_core::orchestrator::SessionLog;
use trajrec_core::rewards::{self, Bucketed, Thirds};
use trajrec_core::{trajectory, Corpus, ItemId, UserId};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn item(id: &str) -> PyResult<ItemId> {
    ItemId::new(id).map_err(value_err)
}

fn items(ids: Vec<String>) -> PyResult<Vec<ItemId>> {
    ids.iter().map(|s| item(s)).collect()
}

fn fraction<'py>(py: Python<'py>, t: Thirds) -> PyResult<Bound<'py, PyAny>> {
    py.import("fractions")?.getattr("Fraction")?.call1((t.0, 3))
}

fn from_json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Parses a tagged trajectory. Raises ValueError on malformed tags.
#[pyfunction]
fn parse_trajectory<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
    let parsed = trajectory::parse(text).map_err(value_err)?;
    let sections = parsed
        .sections
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("tag", &s.tag)?;
            d.set_item("thinking", &s.thinking)?;
            d.set_item("payload", s.payload.as_deref())?;
            d.set_item("tool_calls", s.tool_exchanges.len())?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let out = PyDict::new(py);
    out.set_item("sections", sections)?;
    out.set_item("ranking", parsed.ranking.iter().map(ItemId::as_str).collect::<Vec<_>>())?;
    Ok(out)
}

/// Serializes a session log given as a JSON string.
#[pyfunction]
fn serialize_session(session_json: &str) -> PyResult<String> {
    let log: SessionLog = serde_json::from_str(session_json).map_err(value_err)?;
    Ok(trajectory::serialize(&log))
}

#[pyfunction]
fn format_reward<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    fraction(py, rewards::format_reward(text))
}

#[pyfunction]
fn outcome_reward<'py>(py: Python<'py>, ranking: Vec<String>, ground_truth: &str) -> PyResult<Bound<'py, PyAny>> {
    fraction(py, rewards::outcome_reward(&items(ranking)?, &item(ground_truth)?))
}

/// Returns `(r_fmt, r_out, total)`.
#[pyfunction]
fn composite_reward<'py>(
    py: Python<'py>,
    text: &str,
    ground_truth: &str,
) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let b = rewards::composite_reward(text, &item(ground_truth)?);
    Ok((fraction(py, b.r_fmt)?, fraction(py, b.r_out)?, fraction(py, b.total)?))
}

/// Indices of trajectories whose top-ranked item is the paired ground truth.
#[pyfunction]
fn outcome_filter(pairs: Vec<(String, String)>) -> PyResult<Vec<usize>> {
    let gts = pairs.iter().map(|(_, g)| item(g)).collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<(&str, &ItemId)> = pairs.iter().zip(&gts).map(|((t, _), g)| (t.as_str(), g)).collect();
    Ok(trajectory::outcome_filter(&refs).kept)
}

/// Difficulty bucket for `count` successes out of `group_size`, or None
/// when the instance is excluded.
#[pyfunction]
#[pyo3(signature = (count, group_size = rewards::DEFAULT_GROUP_SIZE))]
fn bucket(count: usize, group_size: usize) -> PyResult<Option<String>> {
    Ok(match rewards::bucket(count, group_size).map_err(value_err)? {
        Bucketed::Bucket(b) => Some(b.to_string()),
        Bucketed::Excluded => None,
    })
}

#[pyfunction]
#[pyo3(signature = (target, ratio = rewards::DEFAULT_RATIO))]
fn quotas(target: usize, ratio: [u32; 3]) -> PyResult<[usize; 3]> {
    rewards::quotas(target, ratio).map_err(value_err)
}

/// HR@{1,3,5} and HR_avg over `(ranking, ground_truth)` pairs.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, rankings: Vec<(Vec<String>, String)>) -> PyResult<Bound<'py, PyAny>> {
    let owned = rankings
        .into_iter()
        .map(|(r, g)| Ok((items(r)?, item(&g)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<(&[ItemId], &ItemId)> = owned.iter().map(|(r, g)| (r.as_slice(), g)).collect();
    from_json(py, &evaluator::evaluate(&refs).map_err(value_err)?)
}

/// Builds evaluation instances from a corpus directory.
#[pyfunction]
#[pyo3(signature = (corpus_dir, scenario = "classic", seed = 0))]
fn build_instances<'py>(py: Python<'py>, corpus_dir: PathBuf, scenario: &str, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let corpus = Corpus::read_dir(&corpus_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let scenario: Scenario = scenario.parse().map_err(value_err)?;
    let instances =
        evaluator::build_instances(&corpus, scenario, &ScenarioThresholds::default(), seed, &Default::default());
    from_json(py, &instances)
}

/// The user-item graph with the CF traversals the tools use.
#[pyclass(name = "InteractionGraph", frozen)]
struct PyGraph {
    inner: InteractionGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    fn new(edges: Vec<(String, String)>) -> PyResult<Self> {
        let edges = edges
            .into_iter()
            .map(|(u, i)| Ok((UserId::new(u).map_err(value_err)?, item(&i)?)))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self { inner: InteractionGraph::from_edges(edges) })
    }

    #[staticmethod]
    fn from_corpus(corpus_dir: PathBuf) -> PyResult<Self> {
        let corpus = Corpus::read_dir(&corpus_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner: InteractionGraph::build(&corpus).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: InteractionGraph::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))? })
    }

    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    fn item_cf(&self, item_id: &str, k: usize) -> PyResult<Vec<(String, u32)>> {
        let n = self.inner.item_cf_neighbors(&item(item_id)?, k).map_err(value_err)?;
        Ok(n.into_iter().map(|s| (s.id.to_string(), s.score)).collect())
    }

    fn user_cf(&self, user_id: &str, k: usize) -> PyResult<Vec<(String, u32)>> {
        let user = UserId::new(user_id).map_err(value_err)?;
        let n = self.inner.user_cf_neighbors(&user, k).map_err(value_err)?;
        Ok(n.into_iter().map(|s| (s.id.to_string(), s.score)).collect())
    }

    fn neighbor_item_pool(&self, user_id: &str, k_users: usize) -> PyResult<Vec<(String, u32)>> {
        let user = UserId::new(user_id).map_err(value_err)?;
        let n = self.inner.neighbor_item_pool(&user, k_users).map_err(value_err)?;
        Ok(n.into_iter().map(|s| (s.id.to_string(), s.score)).collect())
    }
}

#[pymodule]
fn trajrec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(serialize_session, m)?)?;
    m.add_function(wrap_pyfunction!(format_reward, m)?)?;
    m.add_function(wrap_pyfunction!(outcome_reward, m)?)?;
    m.add_function(wrap_pyfunction!(composite_reward, m)?)?;
    m.add_function(wrap_pyfunction!(outcome_filter, m)?)?;
    m.add_function(wrap_pyfunction!(bucket, m)?)?;
    m.add_function(wrap_pyfunction!(quotas, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(build_instances, m)?)?;
    m.add_class::<PyGraph>()?;
    Ok(())
}

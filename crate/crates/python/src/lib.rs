//! Python bindings: the prompt tree, document assembly, mixed-mode
//! classification, link scoring, script replay and interim runs.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use ladder_core::codegen::Generator;
use ladder_core::executor::{run_block, RunnerConfig};
use ladder_core::llm_gateway::{request_key, Gateway, MockBackend};
use ladder_core::mixed_mode::classify_spans;
use ladder_core::prompt_tree::{OpKind, Scope, SupplementTarget};
use ladder_core::script::{replay, Script};
use ladder_core::segment_map::{assemble, AssemblyConfig, SegmentMapFile};
use ladder_core::semantic_link::LinkScorer;
use ladder_core::session::Session;
use ladder_core::{session_doc, LadderError, NodeId, PromptTree, Relation};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(pyladder, LadderException, PyException, "Engine error; `code` holds the error code.");

fn err(e: LadderError) -> PyErr {
    let py_err = LadderException::new_err(format!("[{}] {e}", e.code()));
    Python::attach(|py| {
        let _ = py_err.value(py).setattr("code", e.code());
    });
    py_err
}

/// Converts any serializable value to Python objects through JSON.
fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn relation(s: &str) -> PyResult<Relation> {
    match s {
        "child" => Ok(Relation::Child),
        "sibling" => Ok(Relation::Sibling),
        _ => Err(PyValueError::new_err(format!("relation must be `child` or `sibling`, got `{s}`"))),
    }
}

#[pyclass(name = "PromptTree", module = "pyladder")]
pub struct PyPromptTree {
    inner: Mutex<PromptTree>,
}

impl PyPromptTree {
    fn with<T>(&self, f: impl FnOnce(&mut PromptTree) -> ladder_core::Result<T>) -> PyResult<T> {
        f(&mut self.inner.lock().expect("tree lock")).map_err(err)
    }
}

#[pymethods]
impl PyPromptTree {
    #[new]
    #[pyo3(signature = (session_id="session"))]
    fn new(session_id: &str) -> Self {
        PyPromptTree {
            inner: Mutex::new(PromptTree::new(session_id)),
        }
    }

    /// Loads a stored session document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyPromptTree {
            inner: Mutex::new(session_doc::deserialize(text).map_err(err)?),
        })
    }

    fn to_json(&self) -> String {
        session_doc::serialize(&self.inner.lock().expect("tree lock"))
    }

    #[getter]
    fn version(&self) -> u64 {
        self.inner.lock().expect("tree lock").version()
    }

    fn __len__(&self) -> usize {
        self.inner.lock().expect("tree lock").len() - 1
    }

    #[pyo3(signature = (anchor, prompt, relation_kind="child"))]
    fn add_block(&self, anchor: u64, prompt: &str, relation_kind: &str) -> PyResult<u64> {
        let rel = relation(relation_kind)?;
        self.with(|t| t.add_block(NodeId::new(anchor), rel, prompt)).map(NodeId::get)
    }

    /// Returns the ids whose code may now be stale.
    fn edit_prompt(&self, id: u64, prompt: &str) -> PyResult<Vec<u64>> {
        let r = self.with(|t| t.edit_prompt(NodeId::new(id), prompt))?;
        Ok(r.scope.iter().map(|n| n.get()).collect())
    }

    /// Returns the removed ids.
    fn delete_block(&self, id: u64) -> PyResult<Vec<u64>> {
        let r = self.with(|t| t.delete_block(NodeId::new(id)))?;
        Ok(r.removed.iter().map(|n| n.get()).collect())
    }

    fn duplicate_block(&self, id: u64) -> PyResult<u64> {
        self.with(|t| t.duplicate_block(NodeId::new(id))).map(NodeId::get)
    }

    fn move_block(&self, id: u64, parent: u64, position: usize) -> PyResult<bool> {
        self.with(|t| t.move_block(NodeId::new(id), NodeId::new(parent), position)).map(|r| r.moved)
    }

    fn add_supplement(&self, id: u64, text: &str) -> PyResult<()> {
        self.with(|t| t.add_supplement(NodeId::new(id), text, SupplementTarget::Whole)).map(|_| ())
    }

    fn set_folded(&self, id: u64, folded: bool) -> PyResult<()> {
        self.with(|t| t.set_folded(NodeId::new(id), folded))
    }

    fn set_global(&self, id: u64, global: bool) -> PyResult<()> {
        let scope = if global { Scope::Global } else { Scope::Local };
        self.with(|t| t.set_scope(NodeId::new(id), scope))
    }

    fn set_code(&self, id: u64, code: &str) -> PyResult<bool> {
        self.with(|t| t.set_own_code(NodeId::new(id), code, OpKind::CodeEdit, None))
    }

    fn preorder(&self) -> Vec<u64> {
        self.inner.lock().expect("tree lock").preorder().iter().map(|n| n.get()).collect()
    }

    fn children(&self, id: u64) -> PyResult<Vec<u64>> {
        self.with(|t| Ok(t.children(NodeId::new(id))?.iter().map(|n| n.get()).collect()))
    }

    fn prompt(&self, id: u64) -> PyResult<String> {
        self.with(|t| Ok(t.block(NodeId::new(id))?.prompt().to_string()))
    }

    fn code(&self, id: u64) -> PyResult<String> {
        self.with(|t| Ok(t.block(NodeId::new(id))?.own_code().to_string()))
    }

    fn check_invariants(&self) -> PyResult<()> {
        self.inner.lock().expect("tree lock").check_invariants().map_err(PyValueError::new_err)
    }

    /// Returns `(program, segment_map)`.
    fn assemble(&self, py: Python<'_>) -> PyResult<(String, Py<PyAny>)> {
        let t = self.inner.lock().expect("tree lock");
        let doc = assemble(&t, &AssemblyConfig::default()).map_err(err)?;
        let map = SegmentMapFile::from_document(t.session_id(), &doc);
        Ok((doc.text.clone(), to_py(py, &map)?))
    }

    /// Runs the program prefix ending at `id` (the whole program for 0).
    #[pyo3(signature = (id, timeout_s=30.0))]
    fn run(&self, py: Python<'_>, id: u64, timeout_s: f64) -> PyResult<Py<PyAny>> {
        let runner = RunnerConfig {
            timeout: Duration::from_secs_f64(timeout_s),
            ..RunnerConfig::default()
        };
        let t = self.inner.lock().expect("tree lock").clone();
        let r = py
            .detach(|| run_block(&t, NodeId::new(id), &AssemblyConfig::default(), &runner, None))
            .map_err(err)?;
        to_py(py, &r)
    }

    /// Correlation links for the character span `[start, end)` of a prompt.
    fn links(&self, py: Python<'_>, id: u64, start: usize, end: usize) -> PyResult<Py<PyAny>> {
        let t = self.inner.lock().expect("tree lock");
        let doc = assemble(&t, &AssemblyConfig::default()).map_err(err)?;
        let links = LinkScorer::default().links_for(&t, &doc, NodeId::new(id), start, end).map_err(err)?;
        to_py(py, &links)
    }
}

/// A session replayed from an op script against recorded fixtures.
#[pyclass(name = "Replay", module = "pyladder")]
pub struct PyReplay {
    session: Arc<Mutex<Session>>,
    backend_calls: u64,
}

#[pymethods]
impl PyReplay {
    #[getter]
    fn program(&self) -> String {
        self.session.lock().expect("session lock").document().text.clone()
    }

    #[getter]
    fn backend_calls(&self) -> u64 {
        self.backend_calls
    }

    fn tree(&self) -> PyPromptTree {
        PyPromptTree {
            inner: Mutex::new(self.session.lock().expect("session lock").tree().clone()),
        }
    }

    fn session_json(&self) -> String {
        self.session.lock().expect("session lock").session_json()
    }
}

#[pyfunction]
fn replay_script(py: Python<'_>, script: PathBuf, fixtures: PathBuf) -> PyResult<PyReplay> {
    let r = py
        .detach(|| {
            let script = Script::load(&script)?;
            let gw = Gateway::new(Arc::new(MockBackend::load_dir(&fixtures)?));
            replay(&script, Generator::new(gw))
        })
        .map_err(err)?;
    let calls = r.session.generator().gateway().backend_calls();
    Ok(PyReplay {
        session: Arc::new(Mutex::new(r.session)),
        backend_calls: calls,
    })
}

/// Splits a prompt into natural-language and code spans.
#[pyfunction]
fn classify(py: Python<'_>, prompt: &str) -> PyResult<Py<PyAny>> {
    to_py(py, &classify_spans(prompt).map_err(err)?)
}

/// Relevance score between a prompt phrase and a code identifier.
#[pyfunction]
fn link_score(a: &str, b: &str) -> f64 {
    LinkScorer::default().score(a, b)
}

/// Canonical fixture key of a request.
#[pyfunction]
fn canonical_key(template: &str, slots: BTreeMap<String, String>) -> String {
    request_key(template, &slots)
}

#[pymodule]
pub fn pyladder(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("LadderError", m.py().get_type::<LadderException>())?;
    m.add_class::<PyPromptTree>()?;
    m.add_class::<PyReplay>()?;
    m.add_function(wrap_pyfunction!(replay_script, m)?)?;
    m.add_function(wrap_pyfunction!(classify, m)?)?;
    m.add_function(wrap_pyfunction!(link_score, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_key, m)?)?;
    Ok(())
}

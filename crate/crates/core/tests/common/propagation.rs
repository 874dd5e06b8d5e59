//! Propagation chain checks on the scenario session.

use std::collections::BTreeMap;
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Mutex};

use ladder_core::codegen::{ChainEvent, Generator};
use ladder_core::llm_gateway::{Gateway, LlmBackend, ScriptedBackend};
use ladder_core::prompt_tree::ChangeScope;
use ladder_core::session::Session;
use ladder_core::{session_doc, NodeId};
use serde_json::Value;

pub fn golden_session_text() -> String {
    std::fs::read_to_string(super::fixtures().join("golden/session.json")).unwrap()
}

/// Pre-order of `id` and its descendants read straight from the stored JSON.
pub fn stored_subtree(doc: &str, id: u64) -> Vec<u64> {
    let v: Value = serde_json::from_str(doc).unwrap();
    let mut kids: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for n in v["nodes"].as_array().unwrap() {
        let order = n["child_order"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
        kids.insert(n["id"].as_u64().unwrap(), order);
    }
    let mut out = Vec::new();
    let mut stack = vec![id];
    while let Some(n) = stack.pop() {
        out.push(n);
        stack.extend(kids[&n].iter().rev());
    }
    out
}

fn session(backend: Arc<dyn LlmBackend>) -> Session {
    let tree = session_doc::deserialize(&golden_session_text()).unwrap();
    Session::new(tree, Generator::new(Gateway::new(backend))).unwrap()
}

/// Id of the block that owns the model: the parent of "Create the regression model".
pub fn model_parent(doc: &str) -> u64 {
    let tree = session_doc::deserialize(doc).unwrap();
    let model = tree.blocks().find(|b| b.prompt() == "Create the regression model").unwrap();
    model.parent().unwrap().get()
}

/// Edits the model parent's prompt and propagates with a backend that appends
/// a comment to each block. Counts events and backend calls against the
/// stored subtree.
pub fn edit_chain_matches_subtree() -> Result<usize, String> {
    let text = golden_session_text();
    let parent = model_parent(&text);
    let expected = stored_subtree(&text, parent);

    let seen: Arc<Mutex<Vec<(u64, usize)>>> = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let backend = ScriptedBackend::new("tagger", move |req| {
        let step: u64 = req.slots["step"].parse().ok()?;
        let prior = req.slots["previous"].matches("] updated:").count();
        log.lock().unwrap().push((step, prior));
        let code = req.slots["code"].trim_start_matches("```python\n").trim_end_matches("\n```");
        Some(format!("```python block={step}\n{code}\n# revisited {step}\n```"))
    });
    let mut s = session(Arc::new(backend));
    let receipt = s.edit_prompt(NodeId::new(parent), "Train a regularized regression model").map_err(|e| e.to_string())?;
    let scope = ChangeScope::from(&receipt);

    let mut started = Vec::new();
    let mut finished = Vec::new();
    let report = s
        .propagate(
            &scope,
            &mut |e| match e {
                ChainEvent::StepStarted { index, node, .. } => started.push((*index, node.get())),
                ChainEvent::StepFinished { index, node, .. } => finished.push((*index, node.get())),
            },
            &AtomicBool::new(false),
        )
        .map_err(|e| e.to_string())?;
    if report.aborted.is_some() {
        return Err(format!("chain aborted: {:?}", report.aborted));
    }
    let want: Vec<(usize, u64)> = expected.iter().copied().enumerate().collect();
    if started != want || finished != want {
        return Err(format!("events started {started:?} finished {finished:?}, want {want:?}"));
    }
    let calls = seen.lock().unwrap().clone();
    let order: Vec<u64> = calls.iter().map(|c| c.0).collect();
    if order != expected {
        return Err(format!("backend saw steps {order:?}"));
    }
    // Each step sees the results of every step before it.
    for (i, (_, prior)) in calls.iter().enumerate() {
        if *prior != i {
            return Err(format!("step {i} saw {prior} earlier results"));
        }
    }
    for id in &expected {
        let marker = format!("# revisited {id}");
        if !s.document().text.contains(&marker) {
            return Err(format!("block {id} code was not updated"));
        }
    }
    Ok(expected.len())
}

/// Propagation where every step answers UNCHANGED leaves the program and its
/// map byte-identical.
pub fn unchanged_chain_is_identity() -> Result<(), String> {
    let text = golden_session_text();
    let parent = model_parent(&text);
    let backend = Arc::new(ScriptedBackend::constant("UNCHANGED"));
    let mut s = session(backend.clone());
    let before = s.document().clone();
    let receipt = s.edit_prompt(NodeId::new(parent), "Train a regularized regression model").map_err(|e| e.to_string())?;
    let version = s.version();
    let report = s
        .propagate(&ChangeScope::from(&receipt), &mut |_| {}, &AtomicBool::new(false))
        .map_err(|e| e.to_string())?;
    if !report.changed().is_empty() || report.aborted.is_some() {
        return Err(format!("unexpected changes {:?}", report.changed()));
    }
    if backend.call_count() as usize != stored_subtree(&text, parent).len() {
        return Err(format!("{} backend calls", backend.call_count()));
    }
    if s.version() != version {
        return Err("propagation bumped the version".into());
    }
    let after = s.document();
    if after.text.as_bytes() != before.text.as_bytes() || after.layout != before.layout || after.lines != before.lines {
        return Err("document changed".into());
    }
    Ok(())
}

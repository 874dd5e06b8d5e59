//! Reference model of the block algebra: a plain parent/children map that
//! every operation is mirrored on, compared field by field with the engine.

use std::collections::BTreeMap;

use ladder_core::prompt_tree::{OpKind, Revision, Scope, SupplementTarget};
use ladder_core::{session_doc, NodeId, PromptTree, Relation};
use proptest::prelude::*;

#[derive(Clone, Debug)]
pub enum Op {
    Add { anchor: usize, child: bool, prompt: String },
    Edit { target: usize, prompt: String },
    Delete { target: usize },
    Duplicate { target: usize },
    Move { target: usize, parent: usize, position: usize },
    Supplement { target: usize, text: String },
    Fold { target: usize, folded: bool },
    Rescope { target: usize, global: bool },
    Code { target: usize, code: String },
}

fn prompt() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-z]{1,6}( [a-z]{1,6}){0,3}",
        Just("Plot Loss Curve".to_string()),
        Just("for i in range(3):".to_string()),
        "[a-z ]{0,4}\r\n[a-z]{0,4}",
    ]
}

fn code() -> impl Strategy<Value = String> {
    prop_oneof!["[a-z]{1,5} = [0-9]{1,3}(\n[a-z]{1,5}\\(\\)){0,2}\n?", Just(String::new())]
}

pub fn op() -> impl Strategy<Value = Op> {
    let ix = || 0usize..64;
    prop_oneof![
        4 => (ix(), any::<bool>(), prompt()).prop_map(|(anchor, child, prompt)| Op::Add { anchor, child, prompt }),
        2 => (ix(), prompt()).prop_map(|(target, prompt)| Op::Edit { target, prompt }),
        1 => ix().prop_map(|target| Op::Delete { target }),
        1 => ix().prop_map(|target| Op::Duplicate { target }),
        2 => (ix(), ix(), 0usize..6).prop_map(|(target, parent, position)| Op::Move { target, parent, position }),
        1 => (ix(), "[a-z ]{0,8}").prop_map(|(target, text)| Op::Supplement { target, text }),
        1 => (ix(), any::<bool>()).prop_map(|(target, folded)| Op::Fold { target, folded }),
        1 => (ix(), any::<bool>()).prop_map(|(target, global)| Op::Rescope { target, global }),
        2 => (ix(), code()).prop_map(|(target, code)| Op::Code { target, code }),
    ]
}

pub fn ops(max: usize) -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(op(), 1..max)
}

#[derive(Clone, Debug, Default, PartialEq)]
struct MNode {
    parent: Option<u64>,
    children: Vec<u64>,
    prompt: String,
    code: Option<String>,
    supplements: usize,
    folded: bool,
    global: bool,
}

#[derive(Debug)]
pub struct Model {
    nodes: BTreeMap<u64, MNode>,
    next: u64,
    version: u64,
}

fn lf(s: &str) -> String {
    s.replace("\r\n", "\n").replace('\r', "\n")
}

impl Model {
    pub fn new() -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(0, MNode::default());
        Model { nodes, next: 1, version: 0 }
    }

    fn preorder(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[&n].children.iter().rev());
        }
        out
    }

    fn subtree(&self, id: u64) -> Vec<u64> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[&n].children.iter().rev());
        }
        out
    }

    fn pick(&self, i: usize) -> u64 {
        let order = self.preorder();
        order[i % order.len()]
    }

    fn index_in_parent(&self, id: u64) -> (u64, usize) {
        let p = self.nodes[&id].parent.unwrap();
        (p, self.nodes[&p].children.iter().position(|c| *c == id).unwrap())
    }

    fn copy(&mut self, src: u64, parent: u64) -> u64 {
        let id = self.next;
        self.next += 1;
        let mut n = self.nodes[&src].clone();
        let kids = std::mem::take(&mut n.children);
        n.parent = Some(parent);
        self.nodes.insert(id, n);
        for k in kids {
            let c = self.copy(k, id);
            self.nodes.get_mut(&id).unwrap().children.push(c);
        }
        id
    }

    /// Applies `op` to the model and the tree; both must agree on success.
    pub fn apply(&mut self, tree: &mut PromptTree, op: &Op) -> Result<(), String> {
        let (expect_ok, got_ok) = match op {
            Op::Add { anchor, child, prompt } => {
                let a = self.pick(*anchor);
                let rel = if *child { Relation::Child } else { Relation::Sibling };
                let got = tree.add_block(NodeId::new(a), rel, prompt);
                let ok = *child || a != 0;
                if ok {
                    let id = self.next;
                    self.next += 1;
                    let (parent, at) = if *child {
                        (a, self.nodes[&a].children.len())
                    } else {
                        let (p, i) = self.index_in_parent(a);
                        (p, i + 1)
                    };
                    self.nodes.insert(
                        id,
                        MNode {
                            parent: Some(parent),
                            prompt: lf(prompt),
                            ..MNode::default()
                        },
                    );
                    self.nodes.get_mut(&parent).unwrap().children.insert(at, id);
                    self.version += 1;
                    if got.as_ref().ok() != Some(&NodeId::new(id)) {
                        return Err(format!("add returned {got:?}, model id {id}"));
                    }
                }
                (ok, got.is_ok())
            }
            Op::Edit { target, prompt } => {
                let t = self.pick(*target);
                let got = tree.edit_prompt(NodeId::new(t), prompt);
                let ok = t != 0;
                if ok && self.nodes[&t].prompt != lf(prompt) {
                    self.nodes.get_mut(&t).unwrap().prompt = lf(prompt);
                    self.version += 1;
                }
                (ok, got.is_ok())
            }
            Op::Delete { target } => {
                let t = self.pick(*target);
                let got = tree.delete_block(NodeId::new(t));
                let ok = t != 0;
                if ok {
                    let (p, i) = self.index_in_parent(t);
                    self.nodes.get_mut(&p).unwrap().children.remove(i);
                    for n in self.subtree(t) {
                        self.nodes.remove(&n);
                    }
                    self.version += 1;
                }
                (ok, got.is_ok())
            }
            Op::Duplicate { target } => {
                let t = self.pick(*target);
                let got = tree.duplicate_block(NodeId::new(t));
                let ok = t != 0;
                if ok {
                    let (p, i) = self.index_in_parent(t);
                    let c = self.copy(t, p);
                    self.nodes.get_mut(&p).unwrap().children.insert(i + 1, c);
                    self.version += 1;
                }
                (ok, got.is_ok())
            }
            Op::Move { target, parent, position } => {
                let t = self.pick(*target);
                let p = self.pick(*parent);
                let got = tree.move_block(NodeId::new(t), NodeId::new(p), *position);
                let ok = t != 0 && !self.subtree(t).contains(&p) && *position <= self.nodes[&p].children.len();
                if ok {
                    let (old_p, old_i) = self.index_in_parent(t);
                    let noop = old_p == p && (*position == old_i || *position == old_i + 1);
                    if !noop {
                        self.nodes.get_mut(&old_p).unwrap().children.remove(old_i);
                        let at = if old_p == p && *position > old_i { position - 1 } else { *position };
                        self.nodes.get_mut(&p).unwrap().children.insert(at, t);
                        self.nodes.get_mut(&t).unwrap().parent = Some(p);
                        self.version += 1;
                    }
                }
                (ok, got.is_ok())
            }
            Op::Supplement { target, text } => {
                let t = self.pick(*target);
                let got = tree.add_supplement(NodeId::new(t), text, SupplementTarget::Whole);
                let ok = t != 0 && !text.trim().is_empty();
                if ok {
                    self.nodes.get_mut(&t).unwrap().supplements += 1;
                    self.version += 1;
                }
                (ok, got.is_ok())
            }
            Op::Fold { target, folded } => {
                let t = self.pick(*target);
                let got = tree.set_folded(NodeId::new(t), *folded);
                if self.nodes[&t].folded != *folded {
                    self.nodes.get_mut(&t).unwrap().folded = *folded;
                    self.version += 1;
                }
                (true, got.is_ok())
            }
            Op::Rescope { target, global } => {
                let t = self.pick(*target);
                let scope = if *global { Scope::Global } else { Scope::Local };
                let got = tree.set_scope(NodeId::new(t), scope);
                let ok = t != 0;
                if ok && self.nodes[&t].global != *global {
                    self.nodes.get_mut(&t).unwrap().global = *global;
                    self.version += 1;
                }
                (ok, got.is_ok())
            }
            Op::Code { target, code } => {
                let t = self.pick(*target);
                let got = tree.set_own_code(NodeId::new(t), code, OpKind::CodeEdit, None);
                let c = code.strip_suffix('\n').unwrap_or(code).to_string();
                if self.nodes[&t].code.as_ref() != Some(&c) {
                    self.nodes.get_mut(&t).unwrap().code = Some(c);
                    self.version += 1;
                }
                (true, got.is_ok())
            }
        };
        if expect_ok != got_ok {
            return Err(format!("{op:?}: model expects ok={expect_ok}, engine ok={got_ok}"));
        }
        self.compare(tree)
    }

    fn compare(&self, tree: &PromptTree) -> Result<(), String> {
        if tree.version() != self.version {
            return Err(format!("version {} vs model {}", tree.version(), self.version));
        }
        if tree.next_id() != self.next || tree.len() != self.nodes.len() {
            return Err("node count or id counter diverged".into());
        }
        let order: Vec<u64> = tree.preorder().iter().map(|n| n.get()).collect();
        if order[..] != self.preorder()[1..] {
            return Err(format!("pre-order {order:?} vs model {:?}", self.preorder()));
        }
        for (id, m) in &self.nodes {
            let b = tree.block(NodeId::new(*id)).map_err(|e| e.to_string())?;
            let got = MNode {
                parent: b.parent().map(NodeId::get),
                children: b.children().iter().map(|c| c.get()).collect(),
                prompt: b.prompt().to_string(),
                code: b.segment().map(|s| s.own_code.clone()),
                supplements: b.supplements().len(),
                folded: b.folded(),
                global: b.scope() == Scope::Global,
            };
            if &got != m {
                return Err(format!("block {id}: {got:?} vs model {m:?}"));
            }
            replay_oracle(b.revisions(), b.prompt(), b.own_code()).map_err(|e| format!("block {id}: {e}"))?;
        }
        Ok(())
    }
}

/// Folds a revision list from an empty block: each revision must start where
/// the previous one ended, and the last must land on the current state.
pub fn replay_oracle(revs: &[Revision], prompt: &str, code: &str) -> Result<(), String> {
    let mut state = (String::new(), String::new());
    let mut seq = 0;
    for r in revs {
        if r.seq != seq + 1 {
            return Err(format!("revision seq {} after {seq}", r.seq));
        }
        seq = r.seq;
        if (r.prompt_before.as_str(), r.code_before.as_str()) != (state.0.as_str(), state.1.as_str()) {
            return Err(format!("revision {} does not continue the chain", r.seq));
        }
        state = (r.prompt_after.clone(), r.code_after.clone());
    }
    if (state.0.as_str(), state.1.as_str()) != (prompt, code) {
        return Err("replayed revisions do not reach the current state".into());
    }
    Ok(())
}

/// Runs one op sequence against a fresh tree, checking the model after every
/// op and a document round trip at the end.
pub fn run_sequence(ops: &[Op]) -> Result<(), String> {
    let mut tree = PromptTree::new("prop");
    let mut model = Model::new();
    for op in ops {
        model.apply(&mut tree, op)?;
        tree.check_invariants()?;
    }
    let back = session_doc::deserialize(&session_doc::serialize(&tree)).map_err(|e| e.to_string())?;
    if back != tree {
        return Err("session document round trip changed the tree".into());
    }
    Ok(())
}

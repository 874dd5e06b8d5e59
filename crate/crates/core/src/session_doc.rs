//! Canonical on-disk form of a prompt tree.
//!
//! Nodes are written sorted by id with a fixed field order, LF line endings
//! and a trailing newline, so the same tree always produces the same bytes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{LadderError, Result};
use crate::prompt_tree::{
    NodeId, PromptBlock, PromptTree, Revision, Scope, SegmentRef, Supplement, SupplementTarget,
};

pub const SESSION_DOC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionDocument {
    pub version: u32,
    pub session_id: String,
    pub next_id: u64,
    pub tree_version: u64,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub child_order: Vec<NodeId>,
    pub prompt: String,
    pub supplements: Vec<Supplement>,
    pub folded: bool,
    #[serde(default)]
    pub scope: Scope,
    pub revisions: Vec<Revision>,
    pub segment_text: Option<String>,
}

impl SessionDocument {
    pub fn from_tree(tree: &PromptTree) -> Self {
        let nodes = tree
            .blocks()
            .map(|b| NodeRecord {
                id: b.id(),
                parent: b.parent(),
                child_order: b.children().to_vec(),
                prompt: b.prompt().to_string(),
                supplements: b.supplements().to_vec(),
                folded: b.folded(),
                scope: b.scope(),
                revisions: b.revisions().to_vec(),
                segment_text: b.segment().map(|s| s.own_code.clone()),
            })
            .collect();
        SessionDocument {
            version: SESSION_DOC_VERSION,
            session_id: tree.session_id().to_string(),
            next_id: tree.next_id(),
            tree_version: tree.version(),
            nodes,
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("session document serializes");
        out.push('\n');
        out
    }

    pub fn into_tree(self) -> Result<PromptTree> {
        if self.version != SESSION_DOC_VERSION {
            return Err(LadderError::parse(
                "version",
                format!("unsupported version {}", self.version),
            ));
        }
        let mut nodes = BTreeMap::new();
        for (i, rec) in self.nodes.iter().enumerate() {
            let path = |field: &str| format!("nodes[{i}].{field}");
            if rec.id.get() >= self.next_id && !rec.id.is_root() {
                return Err(LadderError::parse(path("id"), "id not below next_id"));
            }
            if rec.id.is_root() != rec.parent.is_none() {
                return Err(LadderError::parse(path("parent"), "only the root has no parent"));
            }
            if rec.prompt.contains('\r') {
                return Err(LadderError::parse(path("prompt"), "CR line endings are not allowed"));
            }
            for (j, s) in rec.supplements.iter().enumerate() {
                if let SupplementTarget::Range { start, end } = s.target {
                    let ok = start < end
                        && end <= rec.prompt.len()
                        && rec.prompt.is_char_boundary(start)
                        && rec.prompt.is_char_boundary(end);
                    if !ok {
                        return Err(LadderError::parse(
                            format!("nodes[{i}].supplements[{j}].target"),
                            "range outside prompt",
                        ));
                    }
                }
            }
            let mut last = 0;
            for (j, r) in rec.revisions.iter().enumerate() {
                if r.seq <= last {
                    return Err(LadderError::parse(
                        format!("nodes[{i}].revisions[{j}].seq"),
                        "revision seqs must strictly increase",
                    ));
                }
                last = r.seq;
            }
            let block = PromptBlock::from_parts(
                rec.id,
                rec.parent,
                rec.child_order.clone(),
                rec.prompt.clone(),
                rec.supplements.clone(),
                rec.folded,
                rec.scope,
                rec.revisions.clone(),
                rec.segment_text.clone().map(|own_code| SegmentRef { own_code }),
            );
            if nodes.insert(rec.id, block).is_some() {
                return Err(LadderError::parse(path("id"), format!("duplicate id {}", rec.id)));
            }
        }
        if !nodes.contains_key(&NodeId::ROOT) {
            return Err(LadderError::parse("nodes", "root node 0 missing"));
        }
        let index: BTreeMap<NodeId, usize> =
            self.nodes.iter().enumerate().map(|(i, r)| (r.id, i)).collect();
        for (i, rec) in self.nodes.iter().enumerate() {
            if let Some(p) = rec.parent {
                let parent = self.nodes.get(*index.get(&p).ok_or_else(|| {
                    LadderError::parse(format!("nodes[{i}].parent"), format!("unknown parent {p}"))
                })?);
                if parent.map_or(0, |pr| pr.child_order.iter().filter(|c| **c == rec.id).count()) != 1 {
                    return Err(LadderError::parse(
                        format!("nodes[{i}].parent"),
                        format!("{} not listed exactly once in child_order of {p}", rec.id),
                    ));
                }
            }
            for (j, c) in rec.child_order.iter().enumerate() {
                let child = index.get(c).map(|k| &self.nodes[*k]).ok_or_else(|| {
                    LadderError::parse(format!("nodes[{i}].child_order[{j}]"), format!("unknown child {c}"))
                })?;
                if child.parent != Some(rec.id) {
                    return Err(LadderError::parse(
                        format!("nodes[{i}].child_order[{j}]"),
                        format!("child {c} has a different parent"),
                    ));
                }
            }
        }
        let mut seen = BTreeSet::new();
        let mut stack = vec![NodeId::ROOT];
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                return Err(LadderError::parse("nodes", format!("node {n} reachable twice")));
            }
            stack.extend(nodes[&n].children().iter().copied());
        }
        if seen.len() != nodes.len() {
            return Err(LadderError::parse("nodes", "some nodes are unreachable from the root"));
        }
        Ok(PromptTree::from_parts(self.session_id, nodes, self.next_id, self.tree_version))
    }
}

/// Canonical bytes for a tree.
pub fn serialize(tree: &PromptTree) -> String {
    SessionDocument::from_tree(tree).to_json()
}

/// Parses and validates a session document. Nothing is returned unless the
/// whole document is valid.
pub fn deserialize(text: &str) -> Result<PromptTree> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: SessionDocument = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        LadderError::parse(path, e.into_inner().to_string())
    })?;
    doc.into_tree()
}

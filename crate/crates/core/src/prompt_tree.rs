//! The hierarchical prompt structure.
//!
//! A [`PromptTree`] owns every [`PromptBlock`] of a session. Blocks hang off a
//! hidden virtual root so that top-level tasks are ordinary children. Vertical
//! order of children is program execution order; depth is indentation.
//!
//! All mutations go through the tree so parent/child links, revision history
//! and identity stay consistent. Every change to a block's prompt or code is
//! recorded as a [`Revision`], and replaying a block's revisions from an empty
//! block reproduces its current prompt and code.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use similar::algorithms::{myers, Capture, Replace};
use similar::DiffOp;

use crate::error::{LadderError, Result};
use crate::text::normalize_newlines;

/// Maximum prompt size per block, in bytes.
pub const PROMPT_LIMIT: usize = 8 * 1024;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(u64);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn new(raw: u64) -> Self {
        NodeId(raw)
    }

    pub fn get(self) -> u64 {
        self.0
    }

    pub fn is_root(self) -> bool {
        self == Self::ROOT
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.trim().parse().map(NodeId)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Sibling,
    Child,
}

/// Where a block's composed code lands relative to its parent.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Spliced into the parent's code (at the child marker or after it).
    #[default]
    Local,
    /// Hoisted in front of the parent's own code, one nesting level up.
    Global,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Add,
    Edit,
    Delete,
    Duplicate,
    Move,
    Supplement,
    ListSteps,
    CodeEdit,
    Generate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SupplementTarget {
    Whole,
    Range { start: usize, end: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Supplement {
    pub text: String,
    pub target: SupplementTarget,
    /// Ordinal of the supplement on its block, starting at 1.
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub seq: u64,
    pub op_kind: OpKind,
    pub prompt_before: String,
    pub prompt_after: String,
    pub code_before: String,
    pub code_after: String,
    /// Milliseconds since the Unix epoch, or a logical tick under [`Clock::Logical`].
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Code a block contributes on its own; descendants are composed at assembly.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SegmentRef {
    pub own_code: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBlock {
    id: NodeId,
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    prompt: String,
    supplements: Vec<Supplement>,
    folded: bool,
    scope: Scope,
    revisions: Vec<Revision>,
    segment: Option<SegmentRef>,
}

impl PromptBlock {
    fn new(id: NodeId, parent: Option<NodeId>, prompt: String) -> Self {
        PromptBlock {
            id,
            parent,
            children: Vec::new(),
            prompt,
            supplements: Vec::new(),
            folded: false,
            scope: Scope::Local,
            revisions: Vec::new(),
            segment: None,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    /// `None` only for the virtual root.
    pub fn parent(&self) -> Option<NodeId> {
        self.parent
    }

    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn supplements(&self) -> &[Supplement] {
        &self.supplements
    }

    /// Number shown on the block's supplement badge.
    pub fn badge_count(&self) -> usize {
        self.supplements.len()
    }

    pub fn folded(&self) -> bool {
        self.folded
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn revisions(&self) -> &[Revision] {
        &self.revisions
    }

    pub fn segment(&self) -> Option<&SegmentRef> {
        self.segment.as_ref()
    }

    /// The block's own code, empty when nothing has been generated yet.
    pub fn own_code(&self) -> &str {
        self.segment.as_ref().map_or("", |s| s.own_code.as_str())
    }

    fn next_seq(&self) -> u64 {
        self.revisions.last().map_or(1, |r| r.seq + 1)
    }
}

/// Source of revision timestamps.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Clock {
    #[default]
    System,
    /// Deterministic counter, used for replays and golden files.
    Logical(u64),
}

impl Clock {
    fn tick(&mut self) -> u64 {
        match self {
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            Clock::Logical(n) => {
                *n += 1;
                *n
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EditReceipt {
    pub id: NodeId,
    /// The edited block followed by its descendants, in pre-order. Empty for a no-op.
    pub scope: Vec<NodeId>,
    pub changed: bool,
    pub old_prompt: String,
    pub new_prompt: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeleteReceipt {
    pub id: NodeId,
    /// Removed blocks in pre-order, starting with `id`.
    pub removed: Vec<NodeId>,
    /// Surviving blocks whose code may need repropagation: the former
    /// siblings after the gap and every ancestor of the deleted block.
    pub affected: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MoveReceipt {
    pub id: NodeId,
    pub old_parent: NodeId,
    pub new_parent: NodeId,
    pub old_depth: usize,
    pub new_depth: usize,
    pub moved: bool,
    /// The moved block plus its old and new ancestor chains.
    pub affected: Vec<NodeId>,
}

impl MoveReceipt {
    pub fn depth_changed(&self) -> bool {
        self.old_depth != self.new_depth
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeKind {
    Edit,
    Delete,
    Move,
    Supplement,
}

impl ChangeKind {
    pub fn op_kind(self) -> OpKind {
        match self {
            ChangeKind::Edit => OpKind::Edit,
            ChangeKind::Delete => OpKind::Delete,
            ChangeKind::Move => OpKind::Move,
            ChangeKind::Supplement => OpKind::Supplement,
        }
    }
}

/// The set of blocks a mutation may have invalidated, consumed by propagation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeScope {
    pub kind: ChangeKind,
    /// The block the user acted on, if it still exists.
    pub origin: Option<NodeId>,
    pub nodes: Vec<NodeId>,
    /// Human-readable summary handed to the model.
    pub description: String,
}

impl From<&EditReceipt> for ChangeScope {
    fn from(r: &EditReceipt) -> Self {
        ChangeScope {
            kind: ChangeKind::Edit,
            origin: Some(r.id),
            nodes: r.scope.clone(),
            description: format!(
                "the prompt of block [{}] was edited from \"{}\" to \"{}\"",
                r.id, r.old_prompt, r.new_prompt
            ),
        }
    }
}

impl From<&DeleteReceipt> for ChangeScope {
    fn from(r: &DeleteReceipt) -> Self {
        let removed: Vec<String> = r.removed.iter().map(|id| format!("[{id}]")).collect();
        ChangeScope {
            kind: ChangeKind::Delete,
            origin: None,
            nodes: r.affected.clone(),
            description: format!("blocks {} were deleted", removed.join(", ")),
        }
    }
}

impl From<&MoveReceipt> for ChangeScope {
    fn from(r: &MoveReceipt) -> Self {
        ChangeScope {
            kind: ChangeKind::Move,
            origin: Some(r.id),
            nodes: if r.moved { r.affected.clone() } else { Vec::new() },
            description: format!(
                "block [{}] was moved from under [{}] (depth {}) to under [{}] (depth {})",
                r.id, r.old_parent, r.old_depth, r.new_parent, r.new_depth
            ),
        }
    }
}

/// Line-level difference between two revisions of one block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DiffView {
    pub block: NodeId,
    pub from_seq: u64,
    pub to_seq: u64,
    pub prompt: Vec<Hunk>,
    pub code: Vec<Hunk>,
}

impl DiffView {
    pub fn is_empty(&self) -> bool {
        self.prompt.is_empty() && self.code.is_empty()
    }
}

/// One maximal run of changed lines. Line numbers are 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Hunk {
    pub old_start: usize,
    pub new_start: usize,
    pub deleted: Vec<String>,
    pub inserted: Vec<String>,
}

/// Replays a revision list from an empty block and returns the resulting
/// `(prompt, code)`. Fails if the chain is broken or seqs do not increase.
pub fn replay_revisions(revisions: &[Revision]) -> std::result::Result<(String, String), String> {
    let mut prompt = String::new();
    let mut code = String::new();
    let mut last_seq = 0;
    for rev in revisions {
        if rev.seq <= last_seq {
            return Err(format!("seq {} does not follow {}", rev.seq, last_seq));
        }
        last_seq = rev.seq;
        if rev.prompt_before != prompt {
            return Err(format!("revision {} prompt_before does not match", rev.seq));
        }
        if rev.code_before != code {
            return Err(format!("revision {} code_before does not match", rev.seq));
        }
        prompt.clone_from(&rev.prompt_after);
        code.clone_from(&rev.code_after);
    }
    Ok((prompt, code))
}

#[derive(Clone, Debug)]
pub struct PromptTree {
    session_id: String,
    nodes: BTreeMap<NodeId, PromptBlock>,
    next_id: u64,
    version: u64,
    clock: Clock,
}

impl PromptTree {
    pub fn new(session_id: impl Into<String>) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(NodeId::ROOT, PromptBlock::new(NodeId::ROOT, None, String::new()));
        PromptTree {
            session_id: session_id.into(),
            nodes,
            next_id: 1,
            version: 0,
            clock: Clock::default(),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn set_clock(&mut self, clock: Clock) {
        self.clock = clock;
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    /// Monotone counter bumped by every state-changing operation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    /// Number of blocks, including the virtual root.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn block(&self, id: NodeId) -> Result<&PromptBlock> {
        self.nodes.get(&id).ok_or(LadderError::NotFound(id))
    }

    fn block_mut(&mut self, id: NodeId) -> Result<&mut PromptBlock> {
        self.nodes.get_mut(&id).ok_or(LadderError::NotFound(id))
    }

    /// All blocks including the root, ordered by id.
    pub fn blocks(&self) -> impl Iterator<Item = &PromptBlock> {
        self.nodes.values()
    }

    pub fn children(&self, id: NodeId) -> Result<&[NodeId]> {
        Ok(self.block(id)?.children())
    }

    pub fn parent(&self, id: NodeId) -> Result<Option<NodeId>> {
        Ok(self.block(id)?.parent)
    }

    /// Root has depth 0, top-level tasks depth 1.
    pub fn depth(&self, id: NodeId) -> Result<usize> {
        Ok(self.ancestors(id)?.len() + usize::from(!id.is_root()))
    }

    /// Proper ancestors of `id` excluding the root, nearest first.
    pub fn ancestors(&self, id: NodeId) -> Result<Vec<NodeId>> {
        let mut out = Vec::new();
        let mut cur = self.block(id)?.parent;
        while let Some(p) = cur {
            if p.is_root() {
                break;
            }
            out.push(p);
            cur = self.block(p)?.parent;
        }
        Ok(out)
    }

    /// Whether `ancestor` is a proper ancestor of `id`.
    pub fn is_ancestor(&self, ancestor: NodeId, id: NodeId) -> bool {
        let mut cur = self.nodes.get(&id).and_then(|b| b.parent);
        while let Some(p) = cur {
            if p == ancestor {
                return true;
            }
            cur = self.nodes.get(&p).and_then(|b| b.parent);
        }
        false
    }

    /// `id` followed by all its descendants, in pre-order.
    pub fn subtree(&self, id: NodeId) -> Result<Vec<NodeId>> {
        self.block(id)?;
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[&n].children.iter().rev());
        }
        Ok(out)
    }

    /// Every block except the root, in pre-order.
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut all = self.subtree(NodeId::ROOT).expect("root exists");
        all.remove(0);
        all
    }

    /// Number of edges on the tree path between two blocks.
    pub fn distance(&self, a: NodeId, b: NodeId) -> Result<usize> {
        let path = |id: NodeId| -> Result<Vec<NodeId>> {
            let mut p = vec![id];
            p.extend(self.ancestors(id)?);
            if !id.is_root() {
                p.push(NodeId::ROOT);
            }
            Ok(p)
        };
        let pa = path(a)?;
        let pb = path(b)?;
        let common = pa
            .iter()
            .rev()
            .zip(pb.iter().rev())
            .take_while(|(x, y)| x == y)
            .count();
        Ok(pa.len() + pb.len() - 2 * common)
    }

    fn record(
        &mut self,
        id: NodeId,
        op_kind: OpKind,
        before: (String, String),
        note: Option<String>,
    ) -> Result<()> {
        let timestamp = self.clock.tick();
        let block = self.block_mut(id)?;
        let seq = block.next_seq();
        let rev = Revision {
            seq,
            op_kind,
            prompt_before: before.0,
            prompt_after: block.prompt.clone(),
            code_before: before.1,
            code_after: block.own_code().to_string(),
            timestamp,
            note,
        };
        block.revisions.push(rev);
        Ok(())
    }

    fn snapshot(&self, id: NodeId) -> Result<(String, String)> {
        let b = self.block(id)?;
        Ok((b.prompt.clone(), b.own_code().to_string()))
    }

    fn fresh_id(&mut self) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        id
    }

    fn check_prompt(prompt: &str) -> Result<String> {
        let prompt = normalize_newlines(prompt).into_owned();
        if prompt.len() > PROMPT_LIMIT {
            return Err(LadderError::InputTooLarge {
                len: prompt.len(),
                limit: PROMPT_LIMIT,
            });
        }
        Ok(prompt)
    }

    fn reject_root(id: NodeId, what: &str) -> Result<()> {
        if id.is_root() {
            return Err(LadderError::InvalidTarget(format!("cannot {what} the root")));
        }
        Ok(())
    }

    /// Inserts a block right after `anchor` (sibling) or as its last child.
    pub fn add_block(&mut self, anchor: NodeId, relation: Relation, prompt: &str) -> Result<NodeId> {
        let anchor_block = self.block(anchor)?;
        let prompt = Self::check_prompt(prompt)?;
        let (parent, position) = match relation {
            Relation::Child => (anchor, anchor_block.children.len()),
            Relation::Sibling => {
                let parent = anchor_block.parent.ok_or_else(|| {
                    LadderError::InvalidRelation("the root has no siblings".into())
                })?;
                let idx = self.position_in_parent(anchor)?;
                (parent, idx + 1)
            }
        };
        let id = self.fresh_id();
        let mut block = PromptBlock::new(id, Some(parent), String::new());
        block.segment = None;
        self.nodes.insert(id, block);
        self.block_mut(parent)?.children.insert(position, id);
        let before = (String::new(), String::new());
        self.block_mut(id)?.prompt = prompt;
        self.record(id, OpKind::Add, before, None)?;
        self.version += 1;
        Ok(id)
    }

    fn position_in_parent(&self, id: NodeId) -> Result<usize> {
        let parent = self
            .block(id)?
            .parent
            .ok_or_else(|| LadderError::InvalidTarget("the root has no parent".into()))?;
        Ok(self.nodes[&parent]
            .children
            .iter()
            .position(|c| *c == id)
            .expect("child listed under its parent"))
    }

    pub fn edit_prompt(&mut self, id: NodeId, new_prompt: &str) -> Result<EditReceipt> {
        self.block(id)?;
        Self::reject_root(id, "edit")?;
        let new_prompt = Self::check_prompt(new_prompt)?;
        let old_prompt = self.nodes[&id].prompt.clone();
        if old_prompt == new_prompt {
            return Ok(EditReceipt {
                id,
                scope: Vec::new(),
                changed: false,
                old_prompt,
                new_prompt,
            });
        }
        let before = self.snapshot(id)?;
        self.block_mut(id)?.prompt = new_prompt.clone();
        self.record(id, OpKind::Edit, before, None)?;
        self.version += 1;
        Ok(EditReceipt {
            id,
            scope: self.subtree(id)?,
            changed: true,
            old_prompt,
            new_prompt,
        })
    }

    pub fn delete_block(&mut self, id: NodeId) -> Result<DeleteReceipt> {
        self.block(id)?;
        Self::reject_root(id, "delete")?;
        let removed = self.subtree(id)?;
        let parent = self.nodes[&id].parent.expect("non-root has parent");
        let idx = self.position_in_parent(id)?;
        let mut affected: Vec<NodeId> = self.nodes[&parent].children[idx + 1..].to_vec();
        affected.extend(self.ancestors(id)?);

        let before = self.snapshot(parent)?;
        self.block_mut(parent)?.children.remove(idx);
        for n in &removed {
            self.nodes.remove(n);
        }
        let note = format!("removed block {id} with {} descendant(s)", removed.len() - 1);
        self.record(parent, OpKind::Delete, before, Some(note))?;
        self.version += 1;
        Ok(DeleteReceipt {
            id,
            removed,
            affected,
        })
    }

    /// Deep-copies the subtree of `id` and inserts it as the next sibling.
    ///
    /// Copies get fresh ids and a history reset to a single `add` revision.
    pub fn duplicate_block(&mut self, id: NodeId) -> Result<NodeId> {
        self.block(id)?;
        Self::reject_root(id, "duplicate")?;
        let parent = self.nodes[&id].parent.expect("non-root has parent");
        let idx = self.position_in_parent(id)?;
        let copy = self.copy_subtree(id, parent)?;
        self.block_mut(parent)?.children.insert(idx + 1, copy);
        self.version += 1;
        Ok(copy)
    }

    fn copy_subtree(&mut self, source: NodeId, parent: NodeId) -> Result<NodeId> {
        let original = self.block(source)?.clone();
        let id = self.fresh_id();
        let timestamp = self.clock.tick();
        let block = PromptBlock {
            id,
            parent: Some(parent),
            children: Vec::new(),
            prompt: original.prompt.clone(),
            supplements: original.supplements.clone(),
            folded: original.folded,
            scope: original.scope,
            revisions: vec![Revision {
                seq: 1,
                op_kind: OpKind::Add,
                prompt_before: String::new(),
                prompt_after: original.prompt.clone(),
                code_before: String::new(),
                code_after: original.own_code().to_string(),
                timestamp,
                note: Some(format!("duplicated from block {source}")),
            }],
            segment: original.segment.clone(),
        };
        self.nodes.insert(id, block);
        for child in &original.children {
            let c = self.copy_subtree(*child, id)?;
            self.block_mut(id)?.children.push(c);
        }
        Ok(id)
    }

    /// Reparents `id` under `new_parent` at `position`, counted in the
    /// parent's child list as it is before the move.
    pub fn move_block(&mut self, id: NodeId, new_parent: NodeId, position: usize) -> Result<MoveReceipt> {
        self.block(id)?;
        self.block(new_parent)?;
        Self::reject_root(id, "move")?;
        if new_parent == id || self.is_ancestor(id, new_parent) {
            return Err(LadderError::Cycle { id, new_parent });
        }
        let len = self.nodes[&new_parent].children.len();
        if position > len {
            return Err(LadderError::Index { position, len });
        }
        let old_parent = self.nodes[&id].parent.expect("non-root has parent");
        let old_idx = self.position_in_parent(id)?;
        let old_depth = self.depth(id)?;
        let old_ancestors = self.ancestors(id)?;

        let same_place = old_parent == new_parent && (position == old_idx || position == old_idx + 1);
        if same_place {
            return Ok(MoveReceipt {
                id,
                old_parent,
                new_parent,
                old_depth,
                new_depth: old_depth,
                moved: false,
                affected: Vec::new(),
            });
        }

        let before = self.snapshot(id)?;
        self.block_mut(old_parent)?.children.remove(old_idx);
        let insert_at = if old_parent == new_parent && position > old_idx {
            position - 1
        } else {
            position
        };
        self.block_mut(new_parent)?.children.insert(insert_at, id);
        self.block_mut(id)?.parent = Some(new_parent);
        let note = format!("moved from under {old_parent} to under {new_parent} at {insert_at}");
        self.record(id, OpKind::Move, before, Some(note))?;
        self.version += 1;

        let mut affected = vec![id];
        for a in old_ancestors.into_iter().chain(self.ancestors(id)?) {
            if !affected.contains(&a) {
                affected.push(a);
            }
        }
        Ok(MoveReceipt {
            id,
            old_parent,
            new_parent,
            old_depth,
            new_depth: self.depth(id)?,
            moved: true,
            affected,
        })
    }

    /// Attaches extra detail to a block without touching its prompt text.
    pub fn add_supplement(&mut self, id: NodeId, text: &str, target: SupplementTarget) -> Result<Supplement> {
        let block = self.block(id)?;
        Self::reject_root(id, "supplement")?;
        let text = normalize_newlines(text).trim().to_string();
        if text.is_empty() {
            return Err(LadderError::Precondition("supplement text is empty".into()));
        }
        if let SupplementTarget::Range { start, end } = target {
            let len = block.prompt.len();
            let valid = start < end
                && end <= len
                && block.prompt.is_char_boundary(start)
                && block.prompt.is_char_boundary(end);
            if !valid {
                return Err(LadderError::Range { start, end, len });
            }
        }
        let supplement = Supplement {
            text: text.clone(),
            target,
            created_at: block.supplements.len() as u64 + 1,
        };
        let before = self.snapshot(id)?;
        self.block_mut(id)?.supplements.push(supplement.clone());
        self.record(id, OpKind::Supplement, before, Some(text))?;
        self.version += 1;
        Ok(supplement)
    }

    /// Scope of blocks to repropagate after a supplement on `id`.
    pub fn supplement_scope(&self, id: NodeId, supplement: &Supplement) -> Result<ChangeScope> {
        Ok(ChangeScope {
            kind: ChangeKind::Supplement,
            origin: Some(id),
            nodes: self.subtree(id)?,
            description: format!("a supplement was added to block [{id}]: \"{}\"", supplement.text),
        })
    }

    pub fn set_folded(&mut self, id: NodeId, folded: bool) -> Result<()> {
        let block = self.block_mut(id)?;
        if block.folded != folded {
            block.folded = folded;
            self.version += 1;
        }
        Ok(())
    }

    pub fn set_scope(&mut self, id: NodeId, scope: Scope) -> Result<()> {
        Self::reject_root(id, "rescope")?;
        let block = self.block_mut(id)?;
        if block.scope != scope {
            block.scope = scope;
            self.version += 1;
        }
        Ok(())
    }

    /// Replaces a block's own code, recording a revision. Returns whether the
    /// code actually changed.
    pub fn set_own_code(&mut self, id: NodeId, code: &str, op_kind: OpKind, note: Option<String>) -> Result<bool> {
        let code = normalize_newlines(code);
        let code = code.strip_suffix('\n').unwrap_or(&code).to_string();
        let block = self.block(id)?;
        if block.segment.is_some() && block.own_code() == code {
            return Ok(false);
        }
        let changed = block.own_code() != code;
        let before = self.snapshot(id)?;
        self.block_mut(id)?.segment = Some(SegmentRef { own_code: code });
        if changed {
            self.record(id, op_kind, before, note)?;
        }
        self.version += 1;
        Ok(changed)
    }

    /// Appends an informational revision that leaves prompt and code as they
    /// are, e.g. to keep a raw model response for inspection.
    pub fn annotate(&mut self, id: NodeId, op_kind: OpKind, note: String) -> Result<()> {
        let before = self.snapshot(id)?;
        self.record(id, op_kind, before, Some(note))?;
        self.version += 1;
        Ok(())
    }

    pub fn diff_revisions(&self, id: NodeId, a: u64, b: u64) -> Result<DiffView> {
        let block = self.block(id)?;
        let find = |seq: u64| {
            block
                .revisions
                .iter()
                .find(|r| r.seq == seq)
                .ok_or(LadderError::RevisionNotFound { block: id, seq })
        };
        let ra = find(a)?;
        let rb = find(b)?;
        Ok(DiffView {
            block: id,
            from_seq: a,
            to_seq: b,
            prompt: line_diff(&ra.prompt_after, &rb.prompt_after),
            code: line_diff(&ra.code_after, &rb.code_after),
        })
    }

    /// Verifies structural invariants: link consistency, acyclicity,
    /// reachability, id freshness and revision replay.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let root = self.nodes.get(&NodeId::ROOT).ok_or("root missing")?;
        if root.parent.is_some() {
            return Err("root has a parent".into());
        }
        for (id, block) in &self.nodes {
            if *id != block.id {
                return Err(format!("block {} stored under {}", block.id, id));
            }
            if id.0 >= self.next_id && !id.is_root() {
                return Err(format!("id {id} not below next_id {}", self.next_id));
            }
            if let Some(p) = block.parent {
                let parent = self.nodes.get(&p).ok_or(format!("{id}: parent {p} missing"))?;
                if parent.children.iter().filter(|c| **c == *id).count() != 1 {
                    return Err(format!("{id} not listed exactly once under {p}"));
                }
            } else if !id.is_root() {
                return Err(format!("{id} has no parent"));
            }
            for c in &block.children {
                let child = self.nodes.get(c).ok_or(format!("{id}: child {c} missing"))?;
                if child.parent != Some(*id) {
                    return Err(format!("child {c} does not point back to {id}"));
                }
            }
            let (prompt, code) = replay_revisions(&block.revisions).map_err(|e| format!("{id}: {e}"))?;
            if prompt != block.prompt || code != block.own_code() {
                return Err(format!("{id}: revision replay does not reproduce current state"));
            }
        }
        // Reachability from the root also rules out cycles: every node has
        // exactly one parent, so a walk that visits all nodes once is a tree.
        let mut seen = BTreeSet::new();
        let mut stack = vec![NodeId::ROOT];
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                return Err(format!("{n} reached twice"));
            }
            stack.extend(self.nodes[&n].children.iter().copied());
        }
        if seen.len() != self.nodes.len() {
            return Err(format!("{} of {} nodes reachable", seen.len(), self.nodes.len()));
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        session_id: String,
        nodes: BTreeMap<NodeId, PromptBlock>,
        next_id: u64,
        version: u64,
    ) -> Self {
        PromptTree {
            session_id,
            nodes,
            next_id,
            version,
            clock: Clock::default(),
        }
    }
}

impl PartialEq for PromptTree {
    /// Structural equality; the clock is not part of a tree's state.
    fn eq(&self, other: &Self) -> bool {
        self.session_id == other.session_id
            && self.nodes == other.nodes
            && self.next_id == other.next_id
            && self.version == other.version
    }
}

// Accessors used by (de)serialization.
impl PromptBlock {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        id: NodeId,
        parent: Option<NodeId>,
        children: Vec<NodeId>,
        prompt: String,
        supplements: Vec<Supplement>,
        folded: bool,
        scope: Scope,
        revisions: Vec<Revision>,
        segment: Option<SegmentRef>,
    ) -> Self {
        PromptBlock {
            id,
            parent,
            children,
            prompt,
            supplements,
            folded,
            scope,
            revisions,
            segment,
        }
    }
}

fn line_diff(old: &str, new: &str) -> Vec<Hunk> {
    // Terminate both sides so a missing final newline never shows as a change.
    let old = terminated(old);
    let new = terminated(new);
    let old_lines: Vec<&str> = old.lines().collect();
    let new_lines: Vec<&str> = new.lines().collect();
    // The raw Myers ops; TextDiff's compaction pass can emit overlapping ops.
    let mut hook = Replace::new(Capture::new());
    myers::diff(&mut hook, &old_lines, 0..old_lines.len(), &new_lines, 0..new_lines.len())
        .expect("capture hook is infallible");

    let mut hunks: Vec<Hunk> = Vec::new();
    let mut open: Option<Hunk> = None;
    for op in hook.into_inner().into_ops() {
        let (old_index, old_len, new_index, new_len) = match op {
            DiffOp::Equal { .. } => {
                hunks.extend(open.take());
                continue;
            }
            DiffOp::Delete { old_index, old_len, new_index } => (old_index, old_len, new_index, 0),
            DiffOp::Insert { old_index, new_index, new_len } => (old_index, 0, new_index, new_len),
            DiffOp::Replace { old_index, old_len, new_index, new_len } => (old_index, old_len, new_index, new_len),
        };
        let h = open.get_or_insert_with(|| Hunk::at(old_index, new_index));
        h.deleted.extend(old_lines[old_index..old_index + old_len].iter().map(|s| s.to_string()));
        h.inserted.extend(new_lines[new_index..new_index + new_len].iter().map(|s| s.to_string()));
    }
    hunks.extend(open);
    hunks
}

fn terminated(text: &str) -> String {
    if text.is_empty() || text.ends_with('\n') {
        text.to_string()
    } else {
        format!("{text}\n")
    }
}

impl Hunk {
    fn at(old_start: usize, new_start: usize) -> Self {
        Hunk {
            old_start,
            new_start,
            deleted: Vec::new(),
            inserted: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario() -> (PromptTree, NodeId, NodeId) {
        let mut t = PromptTree::new("s").with_clock(Clock::Logical(0));
        let train = t.add_block(NodeId::ROOT, Relation::Child, "Train Regression Model").unwrap();
        let part = t.add_block(train, Relation::Child, "Partition the Dataset").unwrap();
        (t, train, part)
    }

    #[test]
    fn add_child_lands_one_level_deeper() {
        let (t, train, part) = scenario();
        assert_eq!(t.depth(train).unwrap(), 1);
        assert_eq!(t.depth(part).unwrap(), 2);
        assert_eq!(t.children(train).unwrap(), &[part]);
        t.check_invariants().unwrap();
    }

    #[test]
    fn add_sibling_goes_right_after_anchor() {
        let (mut t, train, _) = scenario();
        let b = t.add_block(train, Relation::Sibling, "Plot Loss Curve").unwrap();
        assert_eq!(t.children(NodeId::ROOT).unwrap(), &[train, b]);
        let c = t.add_block(train, Relation::Sibling, "Evaluate").unwrap();
        assert_eq!(t.children(NodeId::ROOT).unwrap(), &[train, c, b]);
    }

    #[test]
    fn sibling_of_root_and_unknown_anchor_fail() {
        let mut t = PromptTree::new("s");
        assert!(matches!(
            t.add_block(NodeId::ROOT, Relation::Sibling, "x"),
            Err(LadderError::InvalidRelation(_))
        ));
        assert!(matches!(
            t.add_block(NodeId::new(42), Relation::Child, "x"),
            Err(LadderError::NotFound(_))
        ));
    }

    #[test]
    fn oversize_prompt_is_rejected() {
        let mut t = PromptTree::new("s");
        let big = "a".repeat(PROMPT_LIMIT + 1);
        assert!(matches!(
            t.add_block(NodeId::ROOT, Relation::Child, &big),
            Err(LadderError::InputTooLarge { .. })
        ));
        let exact = "a".repeat(PROMPT_LIMIT);
        assert!(t.add_block(NodeId::ROOT, Relation::Child, &exact).is_ok());
    }

    #[test]
    fn edit_scope_covers_descendants() {
        let (mut t, train, part) = scenario();
        let leaf = t.add_block(part, Relation::Child, "shuffle").unwrap();
        let r = t.edit_prompt(train, "Train Logistic Regression Model").unwrap();
        assert_eq!(r.scope, vec![train, part, leaf]);
        let r = t.edit_prompt(leaf, "shuffle rows").unwrap();
        assert_eq!(r.scope, vec![leaf]);
    }

    #[test]
    fn identical_edit_is_a_noop() {
        let (mut t, train, _) = scenario();
        let revs = t.block(train).unwrap().revisions().len();
        let v = t.version();
        let r = t.edit_prompt(train, "Train Regression Model").unwrap();
        assert!(!r.changed);
        assert!(r.scope.is_empty());
        assert_eq!(t.block(train).unwrap().revisions().len(), revs);
        assert_eq!(t.version(), v);
    }

    #[test]
    fn delete_removes_subtree_and_reports_affected() {
        let mut t = PromptTree::new("s");
        let a = t.add_block(NodeId::ROOT, Relation::Child, "a").unwrap();
        let b = t.add_block(a, Relation::Child, "b").unwrap();
        let b1 = t.add_block(b, Relation::Child, "b1").unwrap();
        let b2 = t.add_block(b, Relation::Child, "b2").unwrap();
        let b3 = t.add_block(b1, Relation::Child, "b3").unwrap();
        let c = t.add_block(b, Relation::Sibling, "c").unwrap();
        let before = t.len();
        let r = t.delete_block(b).unwrap();
        assert_eq!(r.removed, vec![b, b1, b3, b2]);
        assert_eq!(t.len(), before - 4);
        assert_eq!(r.affected, vec![c, a]);
        assert!(matches!(t.block(b1), Err(LadderError::NotFound(_))));
        t.check_invariants().unwrap();
    }

    #[test]
    fn delete_root_is_invalid() {
        let mut t = PromptTree::new("s");
        assert!(matches!(t.delete_block(NodeId::ROOT), Err(LadderError::InvalidTarget(_))));
        assert!(matches!(t.duplicate_block(NodeId::ROOT), Err(LadderError::InvalidTarget(_))));
    }

    #[test]
    fn duplicate_leaf_copies_prompt() {
        let (mut t, _, part) = scenario();
        let copy = t.duplicate_block(part).unwrap();
        assert_ne!(copy, part);
        assert_eq!(t.block(copy).unwrap().prompt(), "Partition the Dataset");
        let revs = t.block(copy).unwrap().revisions();
        assert_eq!(revs.len(), 1);
        assert_eq!(revs[0].op_kind, OpKind::Add);
        t.check_invariants().unwrap();
    }

    #[test]
    fn move_under_loop_and_cycle_detection() {
        let mut t = PromptTree::new("s");
        let train = t.add_block(NodeId::ROOT, Relation::Child, "Train Regression Model").unwrap();
        let lp = t.add_block(train, Relation::Child, "for epoch in range(1, 31):").unwrap();
        let gc = t.add_block(lp, Relation::Child, "Predict on Train and Test data").unwrap();
        let plot = t.add_block(train, Relation::Sibling, "Plot Loss Curve").unwrap();

        let r = t.move_block(plot, lp, 1).unwrap();
        assert!(r.moved && r.depth_changed());
        assert_eq!(t.parent(plot).unwrap(), Some(lp));
        assert_eq!(t.children(lp).unwrap(), &[gc, plot]);
        assert_eq!(r.affected, vec![plot, lp, train]);

        assert!(matches!(t.move_block(train, gc, 0), Err(LadderError::Cycle { .. })));
        assert!(matches!(t.move_block(train, train, 0), Err(LadderError::Cycle { .. })));
        assert!(matches!(t.move_block(gc, lp, 5), Err(LadderError::Index { .. })));
        t.check_invariants().unwrap();
    }

    #[test]
    fn move_to_current_place_is_noop() {
        let (mut t, train, part) = scenario();
        let v = t.version();
        for pos in [0, 1] {
            let r = t.move_block(part, train, pos).unwrap();
            assert!(!r.moved);
        }
        assert_eq!(t.version(), v);
    }

    #[test]
    fn move_within_same_parent_reorders() {
        let mut t = PromptTree::new("s");
        let ids: Vec<_> = ["a", "b", "c"]
            .iter()
            .map(|p| t.add_block(NodeId::ROOT, Relation::Child, p).unwrap())
            .collect();
        t.move_block(ids[0], NodeId::ROOT, 3).unwrap();
        assert_eq!(t.children(NodeId::ROOT).unwrap(), &[ids[1], ids[2], ids[0]]);
        t.move_block(ids[0], NodeId::ROOT, 0).unwrap();
        assert_eq!(t.children(NodeId::ROOT).unwrap(), &[ids[0], ids[1], ids[2]]);
    }

    #[test]
    fn supplements_leave_prompt_alone() {
        let (mut t, train, _) = scenario();
        let before = t.block(train).unwrap().prompt().to_string();
        for text in ["use L2 regularization", "alpha 0.5", "seed 42"] {
            t.add_supplement(train, text, SupplementTarget::Whole).unwrap();
        }
        let b = t.block(train).unwrap();
        assert_eq!(b.prompt(), before);
        assert_eq!(b.badge_count(), 3);
        let texts: Vec<_> = b.supplements().iter().map(|s| s.text.as_str()).collect();
        assert_eq!(texts, ["use L2 regularization", "alpha 0.5", "seed 42"]);
        assert_eq!(b.supplements()[2].created_at, 3);
    }

    #[test]
    fn supplement_range_is_checked() {
        let (mut t, train, _) = scenario();
        assert!(t
            .add_supplement(train, "x", SupplementTarget::Range { start: 6, end: 16 })
            .is_ok());
        assert!(matches!(
            t.add_supplement(train, "x", SupplementTarget::Range { start: 3, end: 99 }),
            Err(LadderError::Range { .. })
        ));
    }

    #[test]
    fn fold_round_trip_and_view_only() {
        let (mut t, train, _) = scenario();
        t.set_folded(train, true).unwrap();
        assert!(t.block(train).unwrap().folded());
        t.set_folded(train, false).unwrap();
        assert!(!t.block(train).unwrap().folded());
        assert!(t.set_folded(NodeId::new(77), true).is_err());
    }

    #[test]
    fn diff_of_same_revision_is_empty() {
        let (mut t, train, _) = scenario();
        t.edit_prompt(train, "Train Ridge Model").unwrap();
        assert!(t.diff_revisions(train, 2, 2).unwrap().is_empty());
        assert!(matches!(
            t.diff_revisions(train, 1, 9),
            Err(LadderError::RevisionNotFound { .. })
        ));
    }

    #[test]
    fn diff_swaps_roles_when_reversed() {
        let mut t = PromptTree::new("s");
        let a = t.add_block(NodeId::ROOT, Relation::Child, "load\nsplit\ntrain").unwrap();
        t.edit_prompt(a, "load\nsplit data\ntrain\nplot").unwrap();
        let fwd = t.diff_revisions(a, 1, 2).unwrap();
        let back = t.diff_revisions(a, 2, 1).unwrap();
        assert_eq!(fwd.prompt.len(), 2);
        for (f, b) in fwd.prompt.iter().zip(&back.prompt) {
            assert_eq!(f.deleted, b.inserted);
            assert_eq!(f.inserted, b.deleted);
            assert_eq!(f.old_start, b.new_start);
        }
    }

    #[test]
    fn code_revisions_replay() {
        let (mut t, train, _) = scenario();
        assert!(t.set_own_code(train, "model = LinearRegression()", OpKind::Generate, None).unwrap());
        assert!(!t.set_own_code(train, "model = LinearRegression()\n", OpKind::Generate, None).unwrap());
        t.set_own_code(train, "model = Ridge(alpha=0.5)", OpKind::CodeEdit, None).unwrap();
        let b = t.block(train).unwrap();
        let (p, c) = replay_revisions(b.revisions()).unwrap();
        assert_eq!(p, b.prompt());
        assert_eq!(c, "model = Ridge(alpha=0.5)");
    }

    #[test]
    fn distance_counts_edges() {
        let (mut t, train, part) = scenario();
        let plot = t.add_block(train, Relation::Sibling, "Plot").unwrap();
        assert_eq!(t.distance(part, part).unwrap(), 0);
        assert_eq!(t.distance(part, train).unwrap(), 1);
        assert_eq!(t.distance(part, plot).unwrap(), 3);
        assert_eq!(t.distance(NodeId::ROOT, part).unwrap(), 2);
    }
}

//! Block-to-code mapping.
//!
//! Every block owns a contiguous piece of the assembled program: its own
//! lines plus, nested inside, the composed code of its children. Assembly is
//! a pure pre-order composition:
//!
//! * a parent's own code may contain one child marker line; the children's
//!   code is spliced there, otherwise it is appended after the own code;
//! * when the line before the splice point opens a suite (ends with `:`),
//!   children are indented one unit deeper;
//! * children with [`Scope::Global`] are hoisted in front of the parent's own
//!   code at the parent's indentation.
//!
//! Line numbers are 0-based and ranges half-open throughout.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{LadderError, Result};
use crate::prompt_tree::{NodeId, OpKind, PromptTree, Scope};
use crate::text::{code_lines, leading_whitespace, normalize_newlines};

pub const DEFAULT_MARKER: &str = "# @ladder:children";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    /// Line content (ignoring indentation) that marks where children go.
    pub marker: String,
    pub indent_unit: String,
    pub comment_prefix: String,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        AssemblyConfig {
            marker: DEFAULT_MARKER.to_string(),
            indent_unit: "    ".to_string(),
            comment_prefix: "#".to_string(),
        }
    }
}

impl AssemblyConfig {
    pub fn is_marker(&self, line: &str) -> bool {
        line.trim() == self.marker
    }

    /// Whether `line` ends a suite header, ignoring a trailing comment.
    pub fn opens_suite(&self, line: &str) -> bool {
        let code = match line.find(self.comment_prefix.as_str()) {
            Some(p) if !in_string(line, p) => &line[..p],
            _ => line,
        };
        code.trim_end().ends_with(':')
    }
}

fn in_string(line: &str, pos: usize) -> bool {
    let mut quote: Option<char> = None;
    for (i, c) in line.char_indices() {
        if i >= pos {
            break;
        }
        match quote {
            Some(q) if c == q => quote = None,
            None if c == '\'' || c == '"' => quote = Some(c),
            _ => {}
        }
    }
    quote.is_some()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineRange {
    pub start: usize,
    pub end: usize,
}

impl LineRange {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains_range(&self, other: &LineRange) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn contains_line(&self, line: usize) -> bool {
        self.start <= line && line < self.end
    }
}

/// Which block contributed a document line, and from where in its own code.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineOrigin {
    pub owner: NodeId,
    /// Index into the owner's own-code lines (marker line included).
    pub own_line: usize,
    /// Bytes of indentation added during composition.
    pub prefix_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub parent: Option<NodeId>,
    pub depth: usize,
    /// Children in layout order: hoisted ones first, then the rest.
    pub children: Vec<NodeId>,
    pub range: LineRange,
}

/// The assembled program and its segment map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeDocument {
    pub text: String,
    pub doc_version: u64,
    pub layout: BTreeMap<NodeId, BlockLayout>,
    pub lines: Vec<LineOrigin>,
}

impl CodeDocument {
    pub fn empty() -> Self {
        CodeDocument {
            text: String::new(),
            doc_version: 0,
            layout: BTreeMap::from([(
                NodeId::ROOT,
                BlockLayout {
                    parent: None,
                    depth: 0,
                    children: Vec::new(),
                    range: LineRange { start: 0, end: 0 },
                },
            )]),
            lines: Vec::new(),
        }
    }

    /// Range of `id`'s own code plus all descendants.
    pub fn range(&self, id: NodeId) -> Result<LineRange> {
        self.layout.get(&id).map(|l| l.range).ok_or(LadderError::NotFound(id))
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn line_texts(&self) -> Vec<&str> {
        code_lines(&self.text)
    }

    /// Text of the lines in `range`, each terminated by a newline.
    pub fn slice(&self, range: LineRange) -> String {
        let lines = self.line_texts();
        let mut out = String::new();
        for l in &lines[range.start..range.end] {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    pub fn is_ancestor(&self, ancestor: NodeId, id: NodeId) -> bool {
        let mut cur = self.layout.get(&id).and_then(|l| l.parent);
        while let Some(p) = cur {
            if p == ancestor {
                return true;
            }
            cur = self.layout.get(&p).and_then(|l| l.parent);
        }
        false
    }

    /// Checks containment, sibling disjointness/order and that the top-level
    /// ranges concatenate to the whole text.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let total = self.lines.len();
        if self.line_texts().len() != total {
            return Err("line origins do not match text".into());
        }
        for (id, l) in &self.layout {
            if l.range.end > total || l.range.start > l.range.end {
                return Err(format!("{id}: bad range {:?}", l.range));
            }
            let mut pos = l.range.start;
            for c in &l.children {
                let cr = self.layout.get(c).ok_or(format!("{id}: child {c} missing"))?.range;
                if !l.range.contains_range(&cr) {
                    return Err(format!("{id}: child {c} range {cr:?} escapes {:?}", l.range));
                }
                if cr.start < pos {
                    return Err(format!("{id}: child {c} overlaps or is out of order"));
                }
                pos = cr.end;
            }
        }
        for (n, origin) in self.lines.iter().enumerate() {
            let r = self.range(origin.owner).map_err(|e| e.to_string())?;
            if !r.contains_line(n) {
                return Err(format!("line {n} owned by {} outside its range", origin.owner));
            }
        }
        let root = &self.layout[&NodeId::ROOT];
        let mut rebuilt = String::new();
        for c in &root.children {
            rebuilt.push_str(&self.slice(self.layout[c].range));
        }
        if rebuilt != self.text {
            return Err("top-level ranges do not concatenate to the text".into());
        }
        Ok(())
    }
}

struct Builder<'a> {
    tree: &'a PromptTree,
    config: &'a AssemblyConfig,
    include: &'a dyn Fn(NodeId) -> bool,
    lines: Vec<String>,
    origins: Vec<LineOrigin>,
    layout: BTreeMap<NodeId, BlockLayout>,
}

impl Builder<'_> {
    fn push(&mut self, owner: NodeId, own_line: usize, prefix: &str, line: &str) {
        let (text, prefix_len) = if line.is_empty() {
            (String::new(), 0)
        } else {
            (format!("{prefix}{line}"), prefix.len())
        };
        self.lines.push(text);
        self.origins.push(LineOrigin {
            owner,
            own_line,
            prefix_len,
        });
    }

    fn emit(&mut self, id: NodeId, prefix: &str, depth: usize) -> Result<()> {
        let block = self.tree.block(id)?;
        let start = self.lines.len();
        let children: Vec<NodeId> = block.children().iter().copied().filter(|c| (self.include)(*c)).collect();
        let (hoisted, local): (Vec<NodeId>, Vec<NodeId>) = if id.is_root() {
            (Vec::new(), children)
        } else {
            children
                .into_iter()
                .partition(|c| self.tree.block(*c).map(|b| b.scope() == Scope::Global).unwrap_or(false))
        };

        for c in &hoisted {
            self.emit(*c, prefix, depth + 1)?;
        }

        let own = code_lines(block.own_code());
        let markers: Vec<usize> = own
            .iter()
            .enumerate()
            .filter(|(_, l)| self.config.is_marker(l))
            .map(|(i, _)| i)
            .collect();
        if markers.len() > 1 {
            return Err(LadderError::Composition {
                block: id,
                message: format!("child marker appears {} times", markers.len()),
            });
        }
        let split = markers.first().copied().unwrap_or(own.len());
        for (i, line) in own[..split].iter().enumerate() {
            self.push(id, i, prefix, line);
        }
        let child_prefix = format!("{prefix}{}", self.child_indent(&own, markers.first().copied()));
        for c in &local {
            self.emit(*c, &child_prefix, depth + 1)?;
        }
        for (i, line) in own.iter().enumerate().skip(split + 1) {
            self.push(id, i, prefix, line);
        }

        let mut order = hoisted;
        order.extend(local);
        self.layout.insert(
            id,
            BlockLayout {
                parent: block.parent(),
                depth,
                children: order,
                range: LineRange {
                    start,
                    end: self.lines.len(),
                },
            },
        );
        Ok(())
    }

    /// Indentation of children relative to the parent's own code.
    fn child_indent(&self, own: &[&str], marker: Option<usize>) -> String {
        let before = marker.unwrap_or(own.len());
        let prev = own[..before].iter().rev().find(|l| !l.trim().is_empty());
        let suite_indent = prev
            .filter(|l| self.config.opens_suite(l))
            .map(|l| format!("{}{}", leading_whitespace(l), self.config.indent_unit));
        match marker {
            Some(m) => {
                let marker_indent = leading_whitespace(own[m]);
                match suite_indent {
                    Some(s) if marker_indent.len() < s.len() => s,
                    _ => marker_indent.to_string(),
                }
            }
            None => suite_indent.unwrap_or_default(),
        }
    }
}

/// Composes the whole program from a tree snapshot.
pub fn assemble(tree: &PromptTree, config: &AssemblyConfig) -> Result<CodeDocument> {
    assemble_filtered(tree, config, &|_| true)
}

/// Composes only the blocks accepted by `include`. Callers must include every
/// ancestor of an included block.
pub fn assemble_filtered(
    tree: &PromptTree,
    config: &AssemblyConfig,
    include: &dyn Fn(NodeId) -> bool,
) -> Result<CodeDocument> {
    let mut b = Builder {
        tree,
        config,
        include,
        lines: Vec::new(),
        origins: Vec::new(),
        layout: BTreeMap::new(),
    };
    b.emit(NodeId::ROOT, "", 0)?;
    let mut text = b.lines.join("\n");
    if !b.lines.is_empty() {
        text.push('\n');
    }
    Ok(CodeDocument {
        text,
        doc_version: tree.version(),
        layout: b.layout,
        lines: b.origins,
    })
}

/// Blocks that run before `id` and that it may depend on: its ancestors and
/// the full subtrees of the siblings preceding it at every level of its path.
/// `id` itself is not included.
pub fn preceding_context(tree: &PromptTree, id: NodeId) -> Result<BTreeSet<NodeId>> {
    let mut out = BTreeSet::new();
    let mut cur = id;
    while let Some(parent) = tree.parent(cur)? {
        out.insert(parent);
        for sib in tree.children(parent)? {
            if *sib == cur {
                break;
            }
            out.extend(tree.subtree(*sib)?);
        }
        cur = parent;
    }
    Ok(out)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathRole {
    Ancestor,
    Selected,
    Descendant,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gutter {
    pub owner: NodeId,
    pub role: PathRole,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViewLine {
    Code { line: usize, text: String, gutter: Gutter },
    Folded { block: NodeId, range: LineRange, placeholder: String },
}

/// The code view with everything unrelated to one block folded away.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldView {
    pub selected: NodeId,
    pub doc_version: u64,
    pub lines: Vec<ViewLine>,
}

impl FoldView {
    pub fn folded_blocks(&self) -> Vec<NodeId> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                ViewLine::Folded { block, .. } => Some(*block),
                _ => None,
            })
            .collect()
    }

    pub fn visible_lines(&self) -> Vec<usize> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                ViewLine::Code { line, .. } => Some(*line),
                _ => None,
            })
            .collect()
    }
}

/// Expands the selected block, keeps its ancestors' own lines and folds every
/// other block's range into a single placeholder line.
pub fn visible_slice(doc: &CodeDocument, selected: NodeId) -> Result<FoldView> {
    let sel = doc.range(selected)?;
    let texts = doc.line_texts();
    let mut out = Vec::new();
    let mut n = 0;
    while n < doc.lines.len() {
        let origin = doc.lines[n];
        let owner = origin.owner;
        let related = owner == selected || doc.is_ancestor(owner, selected) || doc.is_ancestor(selected, owner);
        if related {
            let role = if sel.contains_line(n) {
                if owner == selected {
                    PathRole::Selected
                } else {
                    PathRole::Descendant
                }
            } else {
                PathRole::Ancestor
            };
            out.push(ViewLine::Code {
                line: n,
                text: texts[n].to_string(),
                gutter: Gutter {
                    owner,
                    role,
                    depth: doc.layout[&owner].depth,
                },
            });
            n += 1;
            continue;
        }
        // Fold the outermost unrelated block containing this line: the child
        // of the nearest related ancestor.
        let mut fold = owner;
        while let Some(p) = doc.layout[&fold].parent {
            if p == selected || doc.is_ancestor(p, selected) {
                break;
            }
            fold = p;
        }
        let range = doc.layout[&fold].range;
        out.push(ViewLine::Folded {
            block: fold,
            range,
            placeholder: format!("... {} line(s) of block {fold}", range.len()),
        });
        n = range.end;
    }
    Ok(FoldView {
        selected,
        doc_version: doc.doc_version,
        lines: out,
    })
}

/// Replacement of document lines `start..end` with `text`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEdit {
    pub start_line: usize,
    pub end_line: usize,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EditRouting {
    pub block: NodeId,
    pub code_before: String,
    pub code_after: String,
}

/// Routes a direct code edit to the block that owns the edited lines and
/// rewrites that block's own code. The caller reassembles afterwards.
///
/// Replacement lines keep their relative indentation: the composition prefix
/// of the first edited line is stripped from each of them.
pub fn apply_code_edit(
    tree: &mut PromptTree,
    doc: &CodeDocument,
    config: &AssemblyConfig,
    edit: &CodeEdit,
) -> Result<EditRouting> {
    let CodeEdit { start_line, end_line, .. } = *edit;
    if start_line >= end_line || end_line > doc.lines.len() {
        return Err(LadderError::Range {
            start: start_line,
            end: end_line,
            len: doc.lines.len(),
        });
    }
    let origins = &doc.lines[start_line..end_line];
    let owner = origins[0].owner;
    if let Some(other) = origins.iter().find(|o| o.owner != owner) {
        return Err(LadderError::AmbiguousEdit(format!("blocks {owner} and {}", other.owner)));
    }
    let first = origins[0].own_line;
    let last = origins[origins.len() - 1].own_line;
    if last - first + 1 != origins.len() {
        return Err(LadderError::AmbiguousEdit(format!(
            "edit in block {owner} crosses its child insertion point"
        )));
    }

    let texts = doc.line_texts();
    let prefix: String = origins
        .iter()
        .zip(&texts[start_line..end_line])
        .find(|(o, _)| o.prefix_len > 0)
        .map(|(o, t)| t[..o.prefix_len].to_string())
        .unwrap_or_default();
    let replacement = normalize_newlines(&edit.text);
    let new_lines: Vec<String> = code_lines(&replacement)
        .into_iter()
        .map(|l| match l.strip_prefix(prefix.as_str()) {
            Some(rest) => rest.to_string(),
            None => l.trim_start_matches([' ', '\t']).to_string(),
        })
        .collect();
    if new_lines.iter().any(|l| config.is_marker(l)) {
        return Err(LadderError::Precondition("edits may not introduce a child marker".into()));
    }

    let before = tree.block(owner)?.own_code().to_string();
    let own: Vec<&str> = code_lines(&before);
    let mut updated: Vec<String> = own[..first].iter().map(|s| s.to_string()).collect();
    updated.extend(new_lines);
    updated.extend(own[last + 1..].iter().map(|s| s.to_string()));
    let after = updated.join("\n");
    tree.set_own_code(owner, &after, OpKind::CodeEdit, None)?;
    Ok(EditRouting {
        block: owner,
        code_before: before,
        code_after: tree.block(owner)?.own_code().to_string(),
    })
}

/// Sidecar describing block line ranges for external tools.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMapFile {
    pub version: u32,
    pub session_id: String,
    pub doc_version: u64,
    pub blocks: Vec<SegmentMapEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMapEntry {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    pub start_line: usize,
    pub end_line: usize,
    /// Document lines contributed by the block itself.
    pub own_lines: Vec<usize>,
}

impl SegmentMapFile {
    pub fn from_document(session_id: &str, doc: &CodeDocument) -> Self {
        let mut own: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (n, o) in doc.lines.iter().enumerate() {
            own.entry(o.owner).or_default().push(n);
        }
        let blocks = doc
            .layout
            .iter()
            .map(|(id, l)| SegmentMapEntry {
                id: *id,
                parent: l.parent,
                depth: l.depth,
                start_line: l.range.start,
                end_line: l.range.end,
                own_lines: own.remove(id).unwrap_or_default(),
            })
            .collect();
        SegmentMapFile {
            version: 1,
            session_id: session_id.to_string(),
            doc_version: doc.doc_version,
            blocks,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("segment map serializes");
        s.push('\n');
        s
    }
}

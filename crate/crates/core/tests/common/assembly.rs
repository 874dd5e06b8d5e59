//! Random trees and an independent check of assembled documents.

use std::collections::BTreeMap;

use ladder_core::prompt_tree::{OpKind, Scope};
use ladder_core::segment_map::{assemble, AssemblyConfig, CodeDocument, LineRange};
use ladder_core::{session_doc, NodeId, PromptTree, Relation};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const MARKER: &str = "# @ladder:children";

fn own_code(rng: &mut ChaCha8Rng, i: u64) -> String {
    match rng.gen_range(0..9) {
        0 => format!("x{i} = {i}"),
        1 => format!("for i{i} in range(2):\n    {MARKER}"),
        2 => format!("if flag{i}:"),
        3 => format!("def f{i}():\n    {MARKER}\n    return {i}"),
        4 => format!("x{i} = 1\n\nx{i} += 2"),
        5 => String::new(),
        6 => format!("with open('f{i}') as fh:  # read it"),
        7 => format!("try:\n    {MARKER}\nexcept ValueError:\n    pass"),
        _ => format!("print(\"{i}: done\")\n{MARKER}\nx{i} = 0"),
    }
}

/// A tree of `n` blocks with random shape, code and scopes.
pub fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> PromptTree {
    let mut t = PromptTree::new("asm");
    let mut ids = vec![NodeId::ROOT];
    for _ in 0..n {
        let anchor = ids[rng.gen_range(0..ids.len())];
        let rel = if anchor.is_root() || rng.gen_bool(0.6) { Relation::Child } else { Relation::Sibling };
        let id = t.add_block(anchor, rel, "step").unwrap();
        let code = own_code(rng, id.get());
        t.set_own_code(id, &code, OpKind::Generate, None).unwrap();
        if rng.gen_bool(0.15) {
            t.set_scope(id, Scope::Global).unwrap();
        }
        ids.push(id);
    }
    t
}

fn lines(code: &str) -> Vec<&str> {
    if code.is_empty() {
        return Vec::new();
    }
    code.strip_suffix('\n').unwrap_or(code).split('\n').collect()
}

fn indent(l: &str) -> &str {
    &l[..l.len() - l.trim_start_matches([' ', '\t']).len()]
}

fn opens_suite(l: &str) -> bool {
    let code = match l.find(" #") {
        Some(p) => &l[..p],
        None => l,
    };
    code.trim_end().ends_with(':')
}

fn children_in_order(t: &PromptTree, id: NodeId) -> Vec<NodeId> {
    let kids = t.children(id).unwrap().to_vec();
    if id.is_root() {
        return kids;
    }
    let global = |c: &NodeId| t.block(*c).unwrap().scope() == Scope::Global;
    kids.iter().copied().filter(global).chain(kids.iter().copied().filter(|c| !global(c))).collect()
}

/// Straightforward recursive composition, written from the rules alone.
fn compose(t: &PromptTree, id: NodeId, prefix: &str, out: &mut Vec<String>) {
    let kids = children_in_order(t, id);
    let (hoisted, local): (Vec<_>, Vec<_>) = if id.is_root() {
        (Vec::new(), kids)
    } else {
        kids.into_iter().partition(|c| t.block(*c).unwrap().scope() == Scope::Global)
    };
    for h in hoisted {
        compose(t, h, prefix, out);
    }
    let own = lines(t.block(id).unwrap().own_code());
    let marker = own.iter().position(|l| l.trim() == MARKER);
    let split = marker.unwrap_or(own.len());
    let put = |out: &mut Vec<String>, l: &str| out.push(if l.is_empty() { String::new() } else { format!("{prefix}{l}") });
    for l in &own[..split] {
        put(out, l);
    }
    let suite = own[..split]
        .iter()
        .rev()
        .find(|l| !l.trim().is_empty())
        .filter(|l| opens_suite(l))
        .map(|l| format!("{}    ", indent(l)));
    let child = match (marker, suite) {
        (Some(m), Some(s)) if indent(own[m]).len() < s.len() => s,
        (Some(m), _) => indent(own[m]).to_string(),
        (None, s) => s.unwrap_or_default(),
    };
    for c in local {
        compose(t, c, &format!("{prefix}{child}"), out);
    }
    for l in own.iter().skip(split + 1) {
        put(out, l);
    }
}

pub fn reference_text(t: &PromptTree) -> String {
    let mut out = Vec::new();
    compose(t, NodeId::ROOT, "", &mut out);
    let mut text = out.join("\n");
    if !out.is_empty() {
        text.push('\n');
    }
    text
}

fn disjoint(a: LineRange, b: LineRange) -> bool {
    a.is_empty() || b.is_empty() || a.end <= b.start || b.end <= a.start
}

/// Containment, disjointness and concatenation, derived from the tree.
pub fn check_document(t: &PromptTree, doc: &CodeDocument) -> Result<(), String> {
    let total = lines(&doc.text).len();
    if doc.lines.len() != total {
        return Err(format!("{} origins for {total} lines", doc.lines.len()));
    }
    let range = |id: NodeId| doc.range(id).map_err(|e| e.to_string());
    if range(NodeId::ROOT)? != (LineRange { start: 0, end: total }) {
        return Err("root range does not cover the document".into());
    }
    let texts = lines(&doc.text);
    for id in t.preorder() {
        let r = range(id)?;
        let parent = t.parent(id).unwrap().unwrap();
        let pr = range(parent)?;
        if !(pr.start <= r.start && r.end <= pr.end) {
            return Err(format!("{id} {r:?} escapes parent {parent} {pr:?}"));
        }
        let kids = children_in_order(t, id);
        for (i, a) in kids.iter().enumerate() {
            for b in &kids[i + 1..] {
                if !disjoint(range(*a)?, range(*b)?) {
                    return Err(format!("siblings {a} and {b} overlap"));
                }
            }
        }
        // Every line in the range is either the block's own or inside
        // exactly one child's range.
        let mut covered: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &kids {
            let cr = range(*c)?;
            for l in cr.start..cr.end {
                *covered.entry(l).or_default() += 1;
            }
        }
        let own: Vec<&str> = lines(t.block(id).unwrap().own_code())
            .into_iter()
            .filter(|l| l.trim() != MARKER)
            .collect();
        let mut own_seen = Vec::new();
        for l in r.start..r.end {
            match (covered.get(&l).copied().unwrap_or(0), doc.lines[l].owner == id) {
                (0, true) => {
                    let o = doc.lines[l];
                    own_seen.push(&texts[l][o.prefix_len..]);
                }
                (1, false) => {}
                (n, mine) => return Err(format!("line {l} in {id}: {n} child ranges, owned by block: {mine}")),
            }
        }
        if own_seen != own {
            return Err(format!("{id}: own lines {own_seen:?} vs code {own:?}"));
        }
    }
    let want = reference_text(t);
    if doc.text != want {
        return Err(format!("document differs from reference composition:\n{}\n---\n{want}", doc.text));
    }
    Ok(())
}

/// Assembles `t` twice and from a stored copy; all must agree and pass the
/// document checks.
pub fn check_tree(t: &PromptTree) -> Result<(), String> {
    let cfg = AssemblyConfig::default();
    let doc = assemble(t, &cfg).map_err(|e| e.to_string())?;
    check_document(t, &doc)?;
    let again = assemble(t, &cfg).map_err(|e| e.to_string())?;
    if again != doc {
        return Err("re-assembly differs".into());
    }
    let stored = session_doc::deserialize(&session_doc::serialize(t)).map_err(|e| e.to_string())?;
    if assemble(&stored, &cfg).map_err(|e| e.to_string())?.text != doc.text {
        return Err("assembly of the stored session differs".into());
    }
    Ok(())
}

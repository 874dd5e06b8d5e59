//! Block-tree program fixtures: nested `{prompt, code, scope?, children}`.

use std::path::{Path, PathBuf};

use ladder_core::prompt_tree::{OpKind, Scope};
use ladder_core::{NodeId, PromptTree, Relation};
use serde::Deserialize;

#[derive(Deserialize)]
struct Block {
    prompt: String,
    code: String,
    #[serde(default)]
    scope: Option<Scope>,
    #[serde(default)]
    children: Vec<Block>,
}

#[derive(Deserialize)]
struct Program {
    blocks: Vec<Block>,
}

fn add(t: &mut PromptTree, parent: NodeId, b: &Block) {
    let id = t.add_block(parent, Relation::Child, &b.prompt).unwrap();
    t.set_own_code(id, &b.code, OpKind::Generate, None).unwrap();
    if let Some(s) = b.scope {
        t.set_scope(id, s).unwrap();
    }
    for c in &b.children {
        add(t, id, c);
    }
}

pub fn load(path: &Path) -> PromptTree {
    let p: Program = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let name = path.file_stem().unwrap().to_string_lossy().into_owned();
    let mut t = PromptTree::new(name);
    for b in &p.blocks {
        add(&mut t, NodeId::ROOT, b);
    }
    t
}

pub fn all(fixtures: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(fixtures.join("programs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    v
}

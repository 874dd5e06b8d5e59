//! A working session: the prompt tree, its assembled document and the
//! generator, kept in sync. Every mutating call reassembles the document; a
//! mutation that would leave the tree unassemblable is rolled back.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;

use serde::Serialize;

use crate::codegen::{
    ChainEvent, GenerateOutcome, Generator, ListStepsOutcome, PropagationReport, Recommendation, WordCandidate,
};
use crate::error::{LadderError, Result};
use crate::executor::{run_block, RunResult, RunnerConfig};
use crate::fsutil::write_atomic;
use crate::prompt_tree::{
    ChangeScope, DeleteReceipt, EditReceipt, MoveReceipt, NodeId, PromptTree, Relation, Scope, Supplement,
    SupplementTarget,
};
use crate::segment_map::{apply_code_edit, assemble, visible_slice, CodeDocument, CodeEdit, EditRouting, FoldView, SegmentMapFile};
use crate::semantic_link::{CorrelationLink, LinkScorer};
use crate::session_doc;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExportPaths {
    pub program: PathBuf,
    pub map: PathBuf,
    pub session: PathBuf,
}

pub struct Session {
    tree: PromptTree,
    doc: CodeDocument,
    generator: Generator,
    runner: RunnerConfig,
    scorer: LinkScorer,
    recommendations: BTreeMap<NodeId, Vec<Recommendation>>,
}

impl Session {
    pub fn new(tree: PromptTree, generator: Generator) -> Result<Self> {
        let doc = assemble(&tree, generator.assembly())?;
        Ok(Session {
            tree,
            doc,
            generator,
            runner: RunnerConfig::default(),
            scorer: LinkScorer::default(),
            recommendations: BTreeMap::new(),
        })
    }

    pub fn with_runner(mut self, runner: RunnerConfig) -> Self {
        self.runner = runner;
        self
    }

    pub fn with_scorer(mut self, scorer: LinkScorer) -> Self {
        self.scorer = scorer;
        self
    }

    pub fn tree(&self) -> &PromptTree {
        &self.tree
    }

    pub fn document(&self) -> &CodeDocument {
        &self.doc
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    /// Swaps the generator, e.g. to point the session at another backend.
    pub fn replace_generator(&mut self, generator: Generator) -> Generator {
        std::mem::replace(&mut self.generator, generator)
    }

    pub fn runner(&self) -> &RunnerConfig {
        &self.runner
    }

    pub fn version(&self) -> u64 {
        self.tree.version()
    }

    pub fn session_json(&self) -> String {
        session_doc::serialize(&self.tree)
    }

    /// Reassembles after `result`. A failed reassembly restores `snapshot`.
    fn commit<T>(&mut self, snapshot: PromptTree, result: Result<T>) -> Result<T> {
        match assemble(&self.tree, self.generator.assembly()) {
            Ok(doc) => {
                self.doc = doc;
                result
            }
            Err(e) => {
                self.tree = snapshot;
                Err(e)
            }
        }
    }

    fn mutate<T>(&mut self, f: impl FnOnce(&mut PromptTree, &Generator) -> Result<T>) -> Result<T> {
        let snapshot = self.tree.clone();
        let r = f(&mut self.tree, &self.generator);
        self.commit(snapshot, r)
    }

    pub fn add_block(&mut self, anchor: NodeId, relation: Relation, prompt: &str) -> Result<NodeId> {
        self.mutate(|t, _| t.add_block(anchor, relation, prompt))
    }

    pub fn edit_prompt(&mut self, id: NodeId, prompt: &str) -> Result<EditReceipt> {
        self.mutate(|t, _| t.edit_prompt(id, prompt))
    }

    pub fn delete_block(&mut self, id: NodeId) -> Result<DeleteReceipt> {
        let r = self.mutate(|t, _| t.delete_block(id))?;
        self.recommendations.retain(|k, _| self.tree.contains(*k));
        Ok(r)
    }

    pub fn duplicate_block(&mut self, id: NodeId) -> Result<NodeId> {
        self.mutate(|t, _| t.duplicate_block(id))
    }

    pub fn move_block(&mut self, id: NodeId, parent: NodeId, position: usize) -> Result<MoveReceipt> {
        self.mutate(|t, _| t.move_block(id, parent, position))
    }

    pub fn add_supplement(&mut self, id: NodeId, text: &str, target: SupplementTarget) -> Result<(Supplement, ChangeScope)> {
        self.mutate(|t, _| {
            let s = t.add_supplement(id, text, target)?;
            let scope = t.supplement_scope(id, &s)?;
            Ok((s, scope))
        })
    }

    pub fn set_folded(&mut self, id: NodeId, folded: bool) -> Result<()> {
        self.mutate(|t, _| t.set_folded(id, folded))
    }

    pub fn set_scope(&mut self, id: NodeId, scope: Scope) -> Result<()> {
        self.mutate(|t, _| t.set_scope(id, scope))
    }

    pub fn generate(&mut self, id: NodeId) -> Result<GenerateOutcome> {
        self.mutate(|t, g| g.generate_block(t, id))
    }

    /// Runs the chain; the document is reassembled once, at the end.
    pub fn propagate(
        &mut self,
        scope: &ChangeScope,
        observer: &mut dyn FnMut(&ChainEvent),
        cancel: &AtomicBool,
    ) -> Result<PropagationReport> {
        self.mutate(|t, g| g.propagate_changes(t, scope, observer, cancel))
    }

    pub fn list_steps(&mut self, id: NodeId) -> Result<ListStepsOutcome> {
        self.mutate(|t, g| g.list_steps(t, id))
    }

    pub fn recommend(&mut self, id: NodeId) -> Result<Vec<Recommendation>> {
        let recs = self.generator.recommend_next(&self.tree, id)?;
        self.recommendations.insert(id, recs.clone());
        Ok(recs)
    }

    /// Adds the `index`-th suggestion last offered for `anchor` as its sibling.
    pub fn accept_recommendation(&mut self, anchor: NodeId, index: usize) -> Result<NodeId> {
        let recs = self
            .recommendations
            .get(&anchor)
            .ok_or_else(|| LadderError::Precondition(format!("no recommendations offered for block {anchor}")))?;
        let rec = recs.get(index).ok_or(LadderError::Index { position: index, len: recs.len() })?;
        let prompt = rec.prompt.clone();
        self.add_block(anchor, Relation::Sibling, &prompt)
    }

    pub fn autocomplete_sentence(&self, id: NodeId, draft: &str) -> Result<String> {
        self.generator.autocomplete_sentence(&self.tree, id, draft)
    }

    pub fn autocomplete_word(&self, id: NodeId, prefix: &str) -> Result<Vec<WordCandidate>> {
        self.generator.autocomplete_word(&self.tree, id, prefix)
    }

    pub fn code_edit(&mut self, edit: &CodeEdit) -> Result<EditRouting> {
        let doc = self.doc.clone();
        self.mutate(|t, g| apply_code_edit(t, &doc, g.assembly(), edit))
    }

    pub fn visible_slice(&self, id: NodeId) -> Result<FoldView> {
        visible_slice(&self.doc, id)
    }

    pub fn links_for(&self, id: NodeId, start: usize, end: usize) -> Result<Vec<CorrelationLink>> {
        self.scorer.links_for(&self.tree, &self.doc, id, start, end)
    }

    pub fn run_block(&self, id: NodeId, cancel: Option<&AtomicBool>) -> Result<RunResult> {
        run_block(&self.tree, id, self.generator.assembly(), &self.runner, cancel)
    }

    /// Writes `program.py`, its segment map and the session document.
    pub fn export(&self, dir: &Path) -> Result<ExportPaths> {
        let paths = ExportPaths {
            program: dir.join("program.py"),
            map: dir.join("program.map.json"),
            session: dir.join("session.json"),
        };
        write_atomic(&paths.program, self.doc.text.as_bytes())?;
        let map = SegmentMapFile::from_document(self.tree.session_id(), &self.doc);
        write_atomic(&paths.map, map.to_json().as_bytes())?;
        write_atomic(&paths.session, self.session_json().as_bytes())?;
        Ok(paths)
    }
}

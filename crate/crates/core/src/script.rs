//! Recorded op scripts: a session expressed as a list of named-block
//! operations, replayable against any backend.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};

use crate::codegen::{ChainEvent, Generator, PropagationReport};
use crate::error::{LadderError, Result};
use crate::prompt_tree::{ChangeScope, Clock, NodeId, PromptTree, Relation, Scope, SupplementTarget};
use crate::segment_map::CodeEdit;
use crate::session::Session;

pub const SCRIPT_KIND: &str = "ladder.script";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Accept {
    #[serde(rename = "ref")]
    pub name: String,
    #[serde(default = "sibling")]
    pub relation: Relation,
}

fn sibling() -> Relation {
    Relation::Sibling
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptIndex {
    #[serde(rename = "ref")]
    pub name: String,
    pub index: usize,
}

/// Block references are names bound by earlier ops; `root` is predefined.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptOp {
    Add {
        #[serde(rename = "ref")]
        name: String,
        anchor: String,
        relation: Relation,
        prompt: String,
    },
    Edit {
        target: String,
        prompt: String,
        #[serde(default)]
        propagate: bool,
    },
    Delete {
        target: String,
        #[serde(default)]
        propagate: bool,
    },
    Duplicate {
        target: String,
        #[serde(rename = "ref")]
        name: String,
    },
    Move {
        target: String,
        parent: String,
        position: usize,
        #[serde(default)]
        propagate: bool,
    },
    Supplement {
        target: String,
        text: String,
        #[serde(default)]
        range: Option<(usize, usize)>,
        #[serde(default)]
        propagate: bool,
    },
    Fold {
        target: String,
        #[serde(default = "yes")]
        folded: bool,
    },
    Scope {
        target: String,
        scope: Scope,
    },
    Generate {
        target: String,
        #[serde(default)]
        expect_contains: Vec<String>,
    },
    ListSteps {
        target: String,
        refs: Vec<String>,
        #[serde(default)]
        expect_prompts: Vec<String>,
    },
    Recommend {
        target: String,
        #[serde(default)]
        expect_first: Option<String>,
        #[serde(default)]
        accept: Option<AcceptIndex>,
    },
    AutocompleteSentence {
        anchor: String,
        draft: String,
        #[serde(default)]
        expect: Option<String>,
        #[serde(default)]
        accept: Option<Accept>,
    },
    CodeEdit {
        start_line: usize,
        end_line: usize,
        text: String,
    },
}

fn yes() -> bool {
    true
}

impl ScriptOp {
    pub fn name(&self) -> &'static str {
        match self {
            ScriptOp::Add { .. } => "add",
            ScriptOp::Edit { .. } => "edit",
            ScriptOp::Delete { .. } => "delete",
            ScriptOp::Duplicate { .. } => "duplicate",
            ScriptOp::Move { .. } => "move",
            ScriptOp::Supplement { .. } => "supplement",
            ScriptOp::Fold { .. } => "fold",
            ScriptOp::Scope { .. } => "scope",
            ScriptOp::Generate { .. } => "generate",
            ScriptOp::ListSteps { .. } => "list_steps",
            ScriptOp::Recommend { .. } => "recommend",
            ScriptOp::AutocompleteSentence { .. } => "autocomplete_sentence",
            ScriptOp::CodeEdit { .. } => "code_edit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub version: u32,
    pub kind: String,
    pub session_id: String,
    pub ops: Vec<ScriptOp>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let s: Script = serde_path_to_error::deserialize(de)
            .map_err(|e| LadderError::parse(e.path().to_string(), e.into_inner().to_string()))?;
        if s.version != 1 || s.kind != SCRIPT_KIND {
            return Err(LadderError::parse("kind", "not a version 1 op script"));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct OpRecord {
    pub index: usize,
    pub op: String,
    pub version: u64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ChainRecord {
    pub op_index: usize,
    pub report: PropagationReport,
    pub events: Vec<ChainEvent>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReplayLog {
    pub refs: BTreeMap<String, NodeId>,
    pub ops: Vec<OpRecord>,
    pub chains: Vec<ChainRecord>,
}

pub struct Replay {
    pub session: Session,
    pub log: ReplayLog,
}

/// A session whose tree uses logical timestamps, so replays are byte-stable.
pub fn replay_session(session_id: &str, generator: Generator) -> Result<Session> {
    Session::new(PromptTree::new(session_id).with_clock(Clock::Logical(0)), generator)
}

pub fn replay(script: &Script, generator: Generator) -> Result<Replay> {
    let mut r = Replay {
        session: replay_session(&script.session_id, generator)?,
        log: ReplayLog::default(),
    };
    r.log.refs.insert("root".into(), NodeId::ROOT);
    for (index, op) in script.ops.iter().enumerate() {
        let detail = r.apply(index, op).map_err(|e| match e {
            LadderError::Script { .. } => e,
            other => LadderError::Script {
                index,
                message: format!("{} failed: [{}] {other}", op.name(), other.code()),
            },
        })?;
        r.log.ops.push(OpRecord {
            index,
            op: op.name().into(),
            version: r.session.version(),
            detail,
        });
    }
    Ok(r)
}

impl Replay {
    fn node(&self, index: usize, name: &str) -> Result<NodeId> {
        self.log.refs.get(name).copied().ok_or_else(|| LadderError::Script {
            index,
            message: format!("unknown block reference `{name}`"),
        })
    }

    fn bind(&mut self, index: usize, name: &str, id: NodeId) -> Result<()> {
        if self.log.refs.insert(name.to_string(), id).is_some() {
            return Err(LadderError::Script {
                index,
                message: format!("reference `{name}` bound twice"),
            });
        }
        Ok(())
    }

    fn propagate(&mut self, index: usize, scope: &ChangeScope) -> Result<String> {
        let mut events = Vec::new();
        let report = self
            .session
            .propagate(scope, &mut |e| events.push(e.clone()), &AtomicBool::new(false))?;
        if let Some(a) = &report.aborted {
            return Err(LadderError::Script {
                index,
                message: format!("propagation aborted at step {} (block {}): {}", a.at, a.node, a.message),
            });
        }
        let detail = format!("propagated over {:?}, changed {:?}", report.plan.nodes(), report.changed());
        self.log.chains.push(ChainRecord {
            op_index: index,
            report,
            events,
        });
        Ok(detail)
    }

    fn apply(&mut self, index: usize, op: &ScriptOp) -> Result<String> {
        let fail = |message: String| LadderError::Script { index, message };
        match op {
            ScriptOp::Add {
                name,
                anchor,
                relation,
                prompt,
            } => {
                let anchor = self.node(index, anchor)?;
                let id = self.session.add_block(anchor, *relation, prompt)?;
                self.bind(index, name, id)?;
                Ok(format!("{name} = {id}"))
            }
            ScriptOp::Edit { target, prompt, propagate } => {
                let id = self.node(index, target)?;
                let receipt = self.session.edit_prompt(id, prompt)?;
                if *propagate && receipt.changed {
                    return self.propagate(index, &ChangeScope::from(&receipt));
                }
                Ok(format!("edited {id}"))
            }
            ScriptOp::Delete { target, propagate } => {
                let id = self.node(index, target)?;
                let receipt = self.session.delete_block(id)?;
                self.log.refs.retain(|_, v| !receipt.removed.contains(v));
                if *propagate && !receipt.affected.is_empty() {
                    return self.propagate(index, &ChangeScope::from(&receipt));
                }
                Ok(format!("deleted {:?}", receipt.removed))
            }
            ScriptOp::Duplicate { target, name } => {
                let id = self.node(index, target)?;
                let copy = self.session.duplicate_block(id)?;
                self.bind(index, name, copy)?;
                Ok(format!("{name} = {copy}"))
            }
            ScriptOp::Move {
                target,
                parent,
                position,
                propagate,
            } => {
                let id = self.node(index, target)?;
                let parent = self.node(index, parent)?;
                let receipt = self.session.move_block(id, parent, *position)?;
                if *propagate && receipt.moved {
                    return self.propagate(index, &ChangeScope::from(&receipt));
                }
                Ok(format!("moved {id} under {parent}"))
            }
            ScriptOp::Supplement {
                target,
                text,
                range,
                propagate,
            } => {
                let id = self.node(index, target)?;
                let t = match range {
                    Some((start, end)) => SupplementTarget::Range { start: *start, end: *end },
                    None => SupplementTarget::Whole,
                };
                let (_, scope) = self.session.add_supplement(id, text, t)?;
                if *propagate {
                    return self.propagate(index, &scope);
                }
                Ok(format!("supplemented {id}"))
            }
            ScriptOp::Fold { target, folded } => {
                let id = self.node(index, target)?;
                self.session.set_folded(id, *folded)?;
                Ok(format!("fold {id} = {folded}"))
            }
            ScriptOp::Scope { target, scope } => {
                let id = self.node(index, target)?;
                self.session.set_scope(id, *scope)?;
                Ok(format!("scope {id} = {scope:?}"))
            }
            ScriptOp::Generate { target, expect_contains } => {
                let id = self.node(index, target)?;
                let out = self.session.generate(id)?;
                let code = self.session.tree().block(id)?.own_code();
                for want in expect_contains {
                    if !code.contains(want.as_str()) {
                        return Err(fail(format!("code of {target} lacks `{want}`:\n{code}")));
                    }
                }
                Ok(format!("generated {:?}", out.written))
            }
            ScriptOp::ListSteps {
                target,
                refs,
                expect_prompts,
            } => {
                let id = self.node(index, target)?;
                let out = self.session.list_steps(id)?;
                if out.children.len() != refs.len() {
                    return Err(fail(format!("expected {} steps, got {}", refs.len(), out.children.len())));
                }
                let prompts: Vec<String> = out
                    .children
                    .iter()
                    .map(|c| self.session.tree().block(*c).map(|b| b.prompt().to_string()))
                    .collect::<Result<_>>()?;
                if !expect_prompts.is_empty() && &prompts != expect_prompts {
                    return Err(fail(format!("step prompts {prompts:?}, expected {expect_prompts:?}")));
                }
                for (name, child) in refs.iter().zip(&out.children) {
                    self.bind(index, name, *child)?;
                }
                Ok(format!("steps {:?}", out.children))
            }
            ScriptOp::Recommend {
                target,
                expect_first,
                accept,
            } => {
                let id = self.node(index, target)?;
                let recs = self.session.recommend(id)?;
                if let Some(want) = expect_first {
                    if recs.first().map(|r| &r.prompt) != Some(want) {
                        return Err(fail(format!("first recommendation {:?}, expected {want:?}", recs.first())));
                    }
                }
                if let Some(a) = accept {
                    let new = self.session.accept_recommendation(id, a.index)?;
                    self.bind(index, &a.name, new)?;
                    return Ok(format!("{} = {new}", a.name));
                }
                Ok(format!("{} recommendations", recs.len()))
            }
            ScriptOp::AutocompleteSentence {
                anchor,
                draft,
                expect,
                accept,
            } => {
                let id = self.node(index, anchor)?;
                let completion = self.session.autocomplete_sentence(id, draft)?;
                if let Some(want) = expect {
                    if &completion != want {
                        return Err(fail(format!("completion {completion:?}, expected {want:?}")));
                    }
                }
                if let Some(a) = accept {
                    let new = self.session.add_block(id, a.relation, &format!("{draft}{completion}"))?;
                    self.bind(index, &a.name, new)?;
                    return Ok(format!("{} = {new}", a.name));
                }
                Ok(completion)
            }
            ScriptOp::CodeEdit { start_line, end_line, text } => {
                let routing = self.session.code_edit(&CodeEdit {
                    start_line: *start_line,
                    end_line: *end_line,
                    text: text.clone(),
                })?;
                Ok(format!("code edit routed to {}", routing.block))
            }
        }
    }
}

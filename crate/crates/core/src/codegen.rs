//! Generation on top of the gateway: block generation from tree context,
//! the sequential change-propagation chain, step listing, next-block
//! recommendations and prompt auto-completion.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LadderError, Result};
use crate::llm_gateway::{CacheSuggestion, Completion, Gateway, ResponseSource};
use crate::mixed_mode::{code_tokens, extract_identifiers_with, is_pure_code, KnownIdentifiers, MixedModeConfig};
use crate::prompt_tree::{ChangeKind, ChangeScope, NodeId, OpKind, PromptTree, Relation, Scope};
use crate::segment_map::{assemble_filtered, preceding_context, AssemblyConfig};
use crate::text::{code_lines, leading_whitespace, normalize_newlines};

pub const MAX_RECOMMENDATIONS: usize = 5;

/// Canonical text of the part of the tree relevant to one block: its
/// ancestor path, all siblings along that path and its own subtree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeContext {
    pub focus: NodeId,
    pub text: String,
}

impl TreeContext {
    pub fn build(tree: &PromptTree, focus: NodeId) -> Result<Self> {
        let mut keep: BTreeSet<NodeId> = tree.subtree(focus)?.into_iter().collect();
        let mut path = tree.ancestors(focus)?;
        path.push(NodeId::ROOT);
        for p in &path {
            keep.insert(*p);
            keep.extend(tree.children(*p)?.iter().copied());
        }
        let mut text = String::new();
        for id in tree.preorder() {
            if !keep.contains(&id) {
                continue;
            }
            let b = tree.block(id)?;
            let pad = "  ".repeat(tree.depth(id)? - 1);
            let prompt = b.prompt().replace('\n', " / ");
            text.push_str(&format!("{pad}[{id}] {prompt}\n"));
            for s in b.supplements() {
                text.push_str(&format!("{pad}    + {}\n", s.text.replace('\n', " / ")));
            }
            if b.scope() == Scope::Global {
                text.push_str(&format!("{pad}    (global scope)\n"));
            }
            let code = b.own_code();
            if !code.is_empty() {
                let digest = hex::encode(&Sha256::digest(code.as_bytes())[..4]);
                text.push_str(&format!("{pad}    = code {digest}, {} lines\n", code_lines(code).len()));
            }
        }
        Ok(TreeContext {
            focus,
            text: text.trim_end().to_string(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParsedResponse {
    pub segments: BTreeMap<NodeId, String>,
    pub warnings: Vec<String>,
}

/// Whether a response declines to change anything.
pub fn is_unchanged(response: &str) -> bool {
    response.trim().trim_matches('`').trim().eq_ignore_ascii_case("unchanged")
}

/// Extracts the id-tagged fenced segments of a response. Prose outside fences
/// is ignored; fences without a tag or with a tag outside `known` are dropped
/// with a warning.
pub fn parse_tree_response(response: &str, known: &BTreeSet<NodeId>) -> Result<ParsedResponse> {
    let tag = Regex::new(r"(?:^|\s)block\s*=\s*(\S+)").expect("valid regex");
    let text = normalize_newlines(response);
    let mut out = ParsedResponse::default();
    let mut lines = text.split('\n').enumerate();
    while let Some((n, line)) = lines.next() {
        let Some(info) = line.trim_start().strip_prefix("```") else {
            continue;
        };
        let mut body: Vec<&str> = Vec::new();
        let mut closed = false;
        for (_, l) in lines.by_ref() {
            if l.trim() == "```" {
                closed = true;
                break;
            }
            body.push(l);
        }
        if !closed {
            return Err(LadderError::response(format!("fence opened on line {} is never closed", n + 1)));
        }
        let Some(caps) = tag.captures(info) else {
            out.warnings.push(format!("untagged fence on line {} ignored", n + 1));
            continue;
        };
        let raw = caps[1].trim_matches(|c| c == '[' || c == ']');
        let Ok(id) = raw.parse::<u64>().map(NodeId::new) else {
            out.warnings.push(format!("fence tag `{}` is not a block id", &caps[1]));
            continue;
        };
        if !known.contains(&id) {
            out.warnings.push(format!("segment for unknown block {id} dropped"));
            continue;
        }
        while body.last().is_some_and(|l| l.trim().is_empty()) {
            body.pop();
        }
        if out.segments.insert(id, body.join("\n")).is_some() {
            return Err(LadderError::response(format!("block {id} tagged more than once")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateOutcome {
    pub block: NodeId,
    /// Blocks whose own code was written, in pre-order.
    pub written: Vec<NodeId>,
    pub warnings: Vec<String>,
    /// `None` when the prompt passed through without a model call.
    pub source: Option<ResponseSource>,
    pub suggestion: Option<CacheSuggestion>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepReason {
    Edited,
    Descendant,
    Consistency,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PlanStep {
    pub node: NodeId,
    pub reason: StepReason,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PropagationPlan {
    pub kind: ChangeKind,
    pub steps: Vec<PlanStep>,
}

impl PropagationPlan {
    /// Pre-order over the scope, each surviving node once.
    pub fn build(tree: &PromptTree, scope: &ChangeScope) -> Self {
        let wanted: BTreeSet<NodeId> = scope.nodes.iter().copied().filter(|n| !n.is_root() && tree.contains(*n)).collect();
        let steps = tree
            .preorder()
            .into_iter()
            .filter(|n| wanted.contains(n))
            .map(|node| {
                let reason = match scope.origin {
                    Some(o) if o == node => StepReason::Edited,
                    Some(o) if tree.is_ancestor(o, node) => StepReason::Descendant,
                    _ => StepReason::Consistency,
                };
                PlanStep { node, reason }
            })
            .collect();
        PropagationPlan { kind: scope.kind, steps }
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.steps.iter().map(|s| s.node).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChainEvent {
    StepStarted { index: usize, node: NodeId, reason: StepReason },
    StepFinished { index: usize, node: NodeId, changed: bool, from_cache: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepOutcome {
    pub node: NodeId,
    pub reason: StepReason,
    pub template: String,
    pub changed: bool,
    pub from_cache: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ChainAbort {
    /// Index of the step that failed or was not started.
    pub at: usize,
    pub node: NodeId,
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PropagationReport {
    pub plan: PropagationPlan,
    pub steps: Vec<StepOutcome>,
    pub aborted: Option<ChainAbort>,
}

impl PropagationReport {
    pub fn changed(&self) -> Vec<NodeId> {
        self.steps.iter().filter(|s| s.changed).map(|s| s.node).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ListStepsOutcome {
    pub parent: NodeId,
    pub children: Vec<NodeId>,
    pub residual: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub prompt: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WordCandidate {
    pub text: String,
    pub distance: usize,
    pub frequency: usize,
}

pub struct Generator {
    gateway: Gateway,
    assembly: AssemblyConfig,
    mixed: MixedModeConfig,
}

impl Generator {
    pub fn new(gateway: Gateway) -> Self {
        Generator {
            gateway,
            assembly: AssemblyConfig::default(),
            mixed: MixedModeConfig::default(),
        }
    }

    pub fn with_configs(mut self, assembly: AssemblyConfig, mixed: MixedModeConfig) -> Self {
        self.assembly = assembly;
        self.mixed = mixed;
        self
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn assembly(&self) -> &AssemblyConfig {
        &self.assembly
    }

    pub fn mixed(&self) -> &MixedModeConfig {
        &self.mixed
    }

    fn context_code(&self, tree: &PromptTree, id: NodeId) -> Result<String> {
        let include = preceding_context(tree, id)?;
        let doc = assemble_filtered(tree, &self.assembly, &|n| include.contains(&n))?;
        Ok(if doc.text.is_empty() { "(none)".into() } else { doc.text })
    }

    fn marker_line(&self, indent: &str) -> String {
        format!("{indent}{}", self.assembly.marker)
    }

    /// Appends a child marker when the block has children and none is
    /// present. Placement matches where children would be appended anyway.
    fn ensure_marker(&self, code: &str, has_children: bool) -> String {
        let lines = code_lines(code);
        if !has_children || lines.iter().any(|l| self.assembly.is_marker(l)) {
            return code.to_string();
        }
        let indent = match lines.iter().rev().find(|l| !l.trim().is_empty()) {
            Some(l) if self.assembly.opens_suite(l) => format!("{}{}", leading_whitespace(l), self.assembly.indent_unit),
            _ => String::new(),
        };
        let mut out = lines.join("\n");
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&self.marker_line(&indent));
        out
    }

    fn check_markers(&self, id: NodeId, code: &str) -> Result<()> {
        let n = code_lines(code).iter().filter(|l| self.assembly.is_marker(l)).count();
        if n > 1 {
            return Err(LadderError::response(format!("code for block {id} has {n} child markers")));
        }
        Ok(())
    }

    /// Generates code for `id` and for any of its descendants that have no
    /// code yet. Existing descendant code is never overwritten.
    pub fn generate_block(&self, tree: &mut PromptTree, id: NodeId) -> Result<GenerateOutcome> {
        if id.is_root() {
            return Err(LadderError::InvalidTarget("cannot generate the root".into()));
        }
        let block = tree.block(id)?;
        let prompt = normalize_newlines(block.prompt()).trim().to_string();
        if prompt.is_empty() {
            return Err(LadderError::Precondition(format!("block {id} has an empty prompt")));
        }
        let has_children = !block.children().is_empty();

        if is_pure_code(&prompt, &self.mixed, &KnownIdentifiers::new())? {
            let last = code_lines(&prompt).last().copied().unwrap_or_default().to_string();
            let code = if self.assembly.opens_suite(&last) || has_children {
                let indent = if self.assembly.opens_suite(&last) {
                    format!("{}{}", leading_whitespace(&last), self.assembly.indent_unit)
                } else {
                    String::new()
                };
                format!("{prompt}\n{}", self.marker_line(&indent))
            } else {
                prompt
            };
            tree.set_own_code(id, &code, OpKind::Generate, Some("code prompt passed through".into()))?;
            return Ok(GenerateOutcome {
                block: id,
                written: vec![id],
                warnings: Vec::new(),
                source: None,
                suggestion: None,
            });
        }

        let targets: Vec<NodeId> = tree
            .subtree(id)?
            .into_iter()
            .filter(|n| *n == id || tree.block(*n).map(|b| b.own_code().is_empty()).unwrap_or(false))
            .collect();
        let known: BTreeSet<NodeId> = tree.subtree(id)?.into_iter().collect();
        let mut slots = BTreeMap::new();
        slots.insert("tree".into(), TreeContext::build(tree, id)?.text);
        slots.insert("focus".into(), id.to_string());
        slots.insert("targets".into(), join_ids(&targets));
        slots.insert("context_code".into(), self.context_code(tree, id)?);
        let completion = self.gateway.run("generate_block", slots, Some(id))?;
        let response = &completion.exchange.response;

        let parsed = match parse_tree_response(response, &known) {
            Ok(p) => p,
            Err(e) => {
                tree.annotate(id, OpKind::Generate, format!("unparseable response kept for inspection:\n{response}"))?;
                return Err(e);
            }
        };
        let mut warnings = parsed.warnings;
        if !parsed.segments.contains_key(&id) {
            tree.annotate(id, OpKind::Generate, format!("response without a segment for the block:\n{response}"))?;
            return Err(LadderError::response(format!("no segment tagged block={id}")));
        }
        for (n, code) in &parsed.segments {
            self.check_markers(*n, code)?;
        }
        let mut written = Vec::new();
        for n in &targets {
            let Some(code) = parsed.segments.get(n) else { continue };
            let has_children = !tree.block(*n)?.children().is_empty();
            let code = self.ensure_marker(code, has_children);
            tree.set_own_code(*n, &code, OpKind::Generate, None)?;
            written.push(*n);
        }
        for n in parsed.segments.keys().filter(|n| !targets.contains(n)) {
            warnings.push(format!("block {n} already has code; segment ignored"));
        }
        for w in &warnings {
            tracing::warn!(block = %id, "{w}");
        }
        Ok(GenerateOutcome {
            block: id,
            written,
            warnings,
            source: Some(completion.source),
            suggestion: completion.suggestion,
        })
    }

    /// Revisits every block in the change scope, strictly in pre-order, each
    /// step seeing what earlier steps produced. On failure or cancellation the
    /// applied prefix stays applied and the abort point is reported.
    pub fn propagate_changes(
        &self,
        tree: &mut PromptTree,
        scope: &ChangeScope,
        observer: &mut dyn FnMut(&ChainEvent),
        cancel: &AtomicBool,
    ) -> Result<PropagationReport> {
        let plan = PropagationPlan::build(tree, scope);
        if plan.steps.is_empty() {
            return Err(LadderError::Precondition("change scope is empty".into()));
        }
        let mut steps = Vec::new();
        let mut previous: Vec<String> = Vec::new();
        let mut aborted = None;
        for (index, step) in plan.steps.iter().enumerate() {
            if cancel.load(Ordering::SeqCst) {
                aborted = Some(ChainAbort {
                    at: index,
                    node: step.node,
                    code: LadderError::Cancelled.code().into(),
                    message: "cancelled between steps".into(),
                });
                break;
            }
            observer(&ChainEvent::StepStarted {
                index,
                node: step.node,
                reason: step.reason,
            });
            match self.propagation_step(tree, scope, step, &previous) {
                Ok((outcome, summary)) => {
                    observer(&ChainEvent::StepFinished {
                        index,
                        node: step.node,
                        changed: outcome.changed,
                        from_cache: outcome.from_cache,
                    });
                    previous.push(summary);
                    steps.push(outcome);
                }
                Err(e) => {
                    tracing::warn!(node = %step.node, error = %e, "propagation chain aborted");
                    aborted = Some(ChainAbort {
                        at: index,
                        node: step.node,
                        code: e.code().into(),
                        message: e.to_string(),
                    });
                    break;
                }
            }
        }
        Ok(PropagationReport { plan, steps, aborted })
    }

    fn propagation_step(
        &self,
        tree: &mut PromptTree,
        scope: &ChangeScope,
        step: &PlanStep,
        previous: &[String],
    ) -> Result<(StepOutcome, String)> {
        let id = step.node;
        let block = tree.block(id)?;
        let current = block.own_code().to_string();
        let merge = scope.kind == ChangeKind::Supplement && step.reason == StepReason::Edited;
        let template = if merge { "supplement_merge" } else { "propagate_changes" };

        let mut slots = BTreeMap::new();
        slots.insert("tree".into(), TreeContext::build(tree, id)?.text);
        slots.insert("step".into(), id.to_string());
        slots.insert(
            "previous".into(),
            if previous.is_empty() { "(none)".into() } else { previous.join("\n") },
        );
        slots.insert(
            "code".into(),
            if current.is_empty() { "(empty)".into() } else { format!("```python\n{current}\n```") },
        );
        if merge {
            let sups: Vec<String> = block.supplements().iter().map(|s| format!("- {}", s.text)).collect();
            slots.insert("supplements".into(), sups.join("\n"));
        } else {
            slots.insert("change".into(), scope.description.clone());
            slots.insert("reason".into(), reason_word(step.reason).into());
        }
        let completion: Completion = self.gateway.run(template, slots, Some(id))?;
        let from_cache = completion.source == ResponseSource::Cache;
        let response = &completion.exchange.response;

        let (changed, summary) = if is_unchanged(response) {
            (false, format!("[{id}] unchanged"))
        } else {
            let parsed = parse_tree_response(response, &BTreeSet::from([id]))?;
            let code = parsed
                .segments
                .get(&id)
                .ok_or_else(|| LadderError::response(format!("no segment tagged block={id}")))?;
            self.check_markers(id, code)?;
            let changed = tree.set_own_code(id, code, scope.kind.op_kind(), Some(format!("propagated: {}", scope.description)))?;
            let summary = if changed {
                format!("[{id}] updated:\n```python\n{code}\n```")
            } else {
                format!("[{id}] unchanged")
            };
            (changed, summary)
        };
        Ok((
            StepOutcome {
                node: id,
                reason: step.reason,
                template: template.into(),
                changed,
                from_cache,
            },
            summary,
        ))
    }

    /// Splits a block's own code into ordered step sub-blocks.
    pub fn list_steps(&self, tree: &mut PromptTree, id: NodeId) -> Result<ListStepsOutcome> {
        if id.is_root() {
            return Err(LadderError::InvalidTarget("cannot list steps of the root".into()));
        }
        let block = tree.block(id)?;
        let own = block.own_code().to_string();
        let lines: Vec<String> = code_lines(&own).into_iter().map(str::to_string).collect();
        let body_lines = lines.iter().filter(|l| !l.trim().is_empty() && !self.assembly.is_marker(l)).count();
        if body_lines == 0 {
            return Err(LadderError::Precondition(format!("block {id} has no code to summarize")));
        }
        let marker = lines.iter().position(|l| self.assembly.is_marker(l));
        let has_children = !block.children().is_empty();
        if has_children && marker.is_none() {
            return Err(LadderError::Precondition(format!(
                "block {id} has children but no child marker; steps cannot be placed"
            )));
        }

        let numbered: Vec<String> = lines.iter().enumerate().map(|(i, l)| format!("{} | {l}", i + 1)).collect();
        let mut slots = BTreeMap::new();
        slots.insert("focus".into(), id.to_string());
        slots.insert("prompt".into(), block.prompt().to_string());
        slots.insert("code".into(), numbered.join("\n"));
        let completion = self.gateway.run("list_steps", slots, Some(id))?;
        let steps = parse_steps(&completion.exchange.response, lines.len())?;

        let first = steps[0].0;
        let last = steps[steps.len() - 1].1;
        if let Some(m) = marker {
            if (first..=last).contains(&m) {
                return Err(LadderError::response("a step covers the child marker line"));
            }
            if has_children && first != m + 1 {
                return Err(LadderError::response("steps must start right after the child marker"));
            }
        }
        let region = &lines[first..=last];
        let indent = region
            .iter()
            .filter(|l| !l.trim().is_empty())
            .map(|l| leading_whitespace(l))
            .min_by_key(|w| w.len())
            .unwrap_or("")
            .to_string();
        if let Some(prev) = lines[..first].iter().rev().find(|l| !l.trim().is_empty() && !self.assembly.is_marker(l)) {
            if self.assembly.opens_suite(prev) {
                let suite = leading_whitespace(prev).len() + self.assembly.indent_unit.len();
                if indent.len() < suite {
                    return Err(LadderError::response("step region is not inside the enclosing suite"));
                }
            }
        }
        if has_children {
            let m = marker.expect("checked above");
            if leading_whitespace(&lines[m]).len() != indent.len() {
                return Err(LadderError::response("step code is not at the child marker's indentation"));
            }
        }

        // Each step owns its range plus any gap up to the next step.
        let mut slices = Vec::new();
        for (k, (start, _, prompt)) in steps.iter().enumerate() {
            let end = steps.get(k + 1).map(|s| s.0).unwrap_or(last + 1);
            let slice: Vec<&str> = lines[*start..end]
                .iter()
                .map(|l| l.strip_prefix(indent.as_str()).unwrap_or(l.trim_start()))
                .collect();
            slices.push((prompt.clone(), slice.join("\n")));
        }

        let mut residual: Vec<String> = Vec::new();
        for (i, l) in lines.iter().enumerate() {
            if i == first {
                if has_children {
                    // The marker stays where it is, right before the region.
                } else {
                    residual.push(self.marker_line(&indent));
                }
            }
            if (first..=last).contains(&i) || (!has_children && Some(i) == marker) {
                continue;
            }
            residual.push(l.clone());
        }
        let residual = residual.join("\n");

        let mut children = Vec::new();
        for (prompt, code) in slices {
            let child = tree.add_block(id, Relation::Child, &prompt)?;
            tree.set_own_code(child, &code, OpKind::ListSteps, None)?;
            children.push(child);
        }
        tree.set_own_code(id, &residual, OpKind::ListSteps, Some(format!("split into {}", join_ids(&children))))?;
        Ok(ListStepsOutcome {
            parent: id,
            children,
            residual,
        })
    }

    pub fn recommend_next(&self, tree: &PromptTree, id: NodeId) -> Result<Vec<Recommendation>> {
        if id.is_root() {
            return Err(LadderError::InvalidTarget("cannot recommend after the root".into()));
        }
        let mut slots = BTreeMap::new();
        slots.insert("tree".into(), TreeContext::build(tree, id)?.text);
        slots.insert("focus".into(), id.to_string());
        let completion = self.gateway.run("recommend", slots, Some(id))?;
        parse_recommendations(&completion.exchange.response)
    }

    /// Continuation of a partially typed prompt; never repeats the draft.
    pub fn autocomplete_sentence(&self, tree: &PromptTree, id: NodeId, draft: &str) -> Result<String> {
        if draft.trim().is_empty() {
            return Err(LadderError::Precondition("draft is empty".into()));
        }
        let context = if id.is_root() {
            let mut t = String::new();
            for c in tree.children(NodeId::ROOT)? {
                t.push_str(&format!("[{c}] {}\n", tree.block(*c)?.prompt()));
            }
            t.trim_end().to_string()
        } else {
            TreeContext::build(tree, id)?.text
        };
        let mut slots = BTreeMap::new();
        slots.insert("context".into(), if context.is_empty() { "(empty tree)".into() } else { context });
        slots.insert("draft".into(), draft.to_string());
        let completion = self.gateway.run("autocomplete_sentence", slots, Some(id))?;
        Ok(clean_completion(draft, &completion.exchange.response))
    }

    /// Identifiers from prompts and code starting with `prefix`, nearest
    /// blocks first, then by frequency. No model call.
    pub fn autocomplete_word(&self, tree: &PromptTree, id: NodeId, prefix: &str) -> Result<Vec<WordCandidate>> {
        tree.block(id)?;
        if prefix.is_empty() {
            return Ok(Vec::new());
        }
        let want = prefix.to_lowercase();
        let known = crate::mixed_mode::known_identifiers(tree.blocks().map(|b| b.own_code()), &self.mixed);
        let mut found: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for b in tree.blocks() {
            if b.id().is_root() {
                continue;
            }
            let mut words: Vec<String> = extract_identifiers_with(b.prompt(), &self.mixed, &known)?
                .into_iter()
                .map(|t| t.text)
                .collect();
            words.extend(code_tokens(b.own_code(), &self.mixed).into_iter().map(|t| t.text));
            let distance = tree.distance(id, b.id())?;
            for w in words {
                if !w.to_lowercase().starts_with(&want) {
                    continue;
                }
                let e = found.entry(w).or_insert((usize::MAX, 0));
                e.0 = e.0.min(distance);
                e.1 += 1;
            }
        }
        let mut out: Vec<WordCandidate> = found
            .into_iter()
            .map(|(text, (distance, frequency))| WordCandidate { text, distance, frequency })
            .collect();
        out.sort_by(|a, b| {
            a.distance
                .cmp(&b.distance)
                .then(b.frequency.cmp(&a.frequency))
                .then(a.text.cmp(&b.text))
        });
        Ok(out)
    }
}

fn reason_word(r: StepReason) -> &'static str {
    match r {
        StepReason::Edited => "edited",
        StepReason::Descendant => "descendant",
        StepReason::Consistency => "consistency",
    }
}

fn join_ids(ids: &[NodeId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

/// Parses `STEP a-b: prompt` lines into 0-based inclusive ranges.
pub fn parse_steps(response: &str, line_count: usize) -> Result<Vec<(usize, usize, String)>> {
    let re = Regex::new(r"^\s*STEP\s+(\d+)\s*(?:-\s*(\d+))?\s*:\s*(.*?)\s*$").expect("valid regex");
    let mut steps: Vec<(usize, usize, String)> = Vec::new();
    for line in normalize_newlines(response).lines() {
        let Some(c) = re.captures(line) else { continue };
        let a: usize = c[1].parse().map_err(|_| LadderError::response("bad step range"))?;
        let b: usize = match c.get(2) {
            Some(m) => m.as_str().parse().map_err(|_| LadderError::response("bad step range"))?,
            None => a,
        };
        let prompt = c[3].to_string();
        if prompt.is_empty() {
            return Err(LadderError::response(format!("step {a}-{b} has no prompt")));
        }
        if a == 0 || a > b || b > line_count {
            return Err(LadderError::response(format!("step range {a}-{b} outside 1-{line_count}")));
        }
        if let Some(prev) = steps.last() {
            if a <= prev.1 + 1 {
                return Err(LadderError::response(format!("step {a}-{b} overlaps or precedes the previous step")));
            }
        }
        steps.push((a - 1, b - 1, prompt));
    }
    if steps.is_empty() {
        return Err(LadderError::response("no STEP lines in response"));
    }
    Ok(steps)
}

pub fn parse_recommendations(response: &str) -> Result<Vec<Recommendation>> {
    let text = response.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let (Some(a), Some(b)) = (text.find('['), text.rfind(']')) else {
        return Err(LadderError::response("recommendations are not a JSON array"));
    };
    if b < a {
        return Err(LadderError::response("recommendations are not a JSON array"));
    }
    let mut recs: Vec<Recommendation> =
        serde_json::from_str(&text[a..=b]).map_err(|e| LadderError::response(format!("recommendations: {e}")))?;
    recs.retain(|r| !r.prompt.trim().is_empty() && r.score.is_finite());
    for r in &mut recs {
        r.score = r.score.clamp(0.0, 1.0);
        r.prompt = r.prompt.trim().to_string();
    }
    // Stable: equal scores keep response order.
    recs.sort_by(|x, y| y.score.partial_cmp(&x.score).expect("finite scores"));
    recs.truncate(MAX_RECOMMENDATIONS);
    Ok(recs)
}

fn clean_completion(draft: &str, response: &str) -> String {
    let first = normalize_newlines(response);
    let mut line = first.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim_end().to_string();
    if let Some(rest) = line.strip_prefix(draft) {
        line = rest.to_string();
    } else if let Some(rest) = line.trim_start().strip_prefix(draft.trim_start()) {
        line = rest.to_string();
    }
    line.trim_matches('"').to_string()
}

//! Scored links from a selected prompt phrase to related phrases in other
//! blocks and to identifier tokens in the assembled code.
//!
//! Scores are assigned by rule, never learned:
//!
//! | relation between the two                          | score |
//! |---------------------------------------------------|-------|
//! | identical normalized piece sequences              | 1.0   |
//! | a shared word piece or stem                       | 0.7   |
//! | pieces in one synonym group                       | 0.6   |
//! | one piece contains the other (3+ letters)         | 0.5   |
//!
//! A pair scores the best rule it satisfies; nothing below 0.5 is linked.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LadderError, Result};
use crate::mixed_mode::{classify_spans_with, code_tokens, normalize, KnownIdentifiers, MixedModeConfig, SpanKind, TokenRole};
use crate::prompt_tree::{NodeId, PromptTree};
use crate::segment_map::CodeDocument;

pub const EXACT: f64 = 1.0;
pub const SHARED_STEM: f64 = 0.7;
pub const SYNONYM: f64 = 0.6;
pub const SUBSTRING: f64 = 0.5;
pub const MIN_SCORE: f64 = 0.5;

pub const SYNONYM_KIND: &str = "ladder.synonyms";

/// Groups of interchangeable words, stored as key -> equivalents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynonymTable {
    pub version: u32,
    pub kind: String,
    pub groups: BTreeMap<String, Vec<String>>,
}

impl Default for SynonymTable {
    fn default() -> Self {
        let g = |k: &str, v: &[&str]| (k.to_string(), v.iter().map(|s| s.to_string()).collect());
        SynonymTable {
            version: 1,
            kind: SYNONYM_KIND.into(),
            groups: BTreeMap::from([
                g("df", &["data", "table", "dataframe", "dataset"]),
                g("plot", &["graph", "chart", "figure", "fig"]),
                g("model", &["estimator", "regressor", "classifier", "clf"]),
                g("loss", &["error", "cost"]),
            ]),
        }
    }
}

impl SynonymTable {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let t: SynonymTable = serde_path_to_error::deserialize(de)
            .map_err(|e| LadderError::parse(e.path().to_string(), e.into_inner().to_string()))?;
        if t.version != 1 || t.kind != SYNONYM_KIND {
            return Err(LadderError::parse("kind", "not a version 1 synonym table"));
        }
        Ok(t)
    }

    /// Word -> ids of the groups it belongs to.
    fn index(&self) -> BTreeMap<String, BTreeSet<usize>> {
        let mut idx: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for (i, (k, vs)) in self.groups.iter().enumerate() {
            for w in std::iter::once(k).chain(vs) {
                for p in normalize(w) {
                    idx.entry(p).or_default().insert(i);
                }
            }
        }
        idx
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntityType {
    Variable,
    Function,
    DataEntity,
    Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinkTarget {
    Phrase {
        block: NodeId,
        start: usize,
        end: usize,
        text: String,
    },
    CodeToken {
        doc_version: u64,
        line: usize,
        start: usize,
        end: usize,
        text: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationLink {
    pub source_block: NodeId,
    pub source_start: usize,
    pub source_end: usize,
    pub target: LinkTarget,
    pub entity_type: EntityType,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct LinkScorer {
    synonyms: BTreeMap<String, BTreeSet<usize>>,
    data_nouns: BTreeSet<String>,
    verbs: BTreeSet<String>,
    stopwords: BTreeSet<String>,
    mixed: MixedModeConfig,
}

fn words(ws: &[&str]) -> BTreeSet<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

impl Default for LinkScorer {
    fn default() -> Self {
        Self::new(&SynonymTable::default(), MixedModeConfig::default())
    }
}

/// Strips one common English suffix, keeping at least three letters.
pub fn stem(word: &str) -> &str {
    const SUFFIXES: [&str; 12] = ["ations", "ation", "ions", "ion", "ings", "ing", "ers", "er", "ors", "or", "ed", "es"];
    for s in SUFFIXES {
        if let Some(base) = word.strip_suffix(s) {
            if base.len() >= 3 {
                return base;
            }
        }
    }
    match word.strip_suffix('s') {
        Some(base) if base.len() >= 3 && !base.ends_with('s') => base,
        _ => word,
    }
}

impl LinkScorer {
    pub fn new(synonyms: &SynonymTable, mixed: MixedModeConfig) -> Self {
        LinkScorer {
            synonyms: synonyms.index(),
            data_nouns: words(&[
                "data", "dataset", "datasets", "df", "dataframe", "table", "frame", "csv", "array", "matrix", "features",
                "feature", "labels", "label", "samples", "sample", "rows", "columns", "column", "series",
            ]),
            verbs: words(&[
                "load", "read", "train", "fit", "predict", "plot", "split", "partition", "create", "compute", "record",
                "import", "evaluate", "print", "save", "calculate", "build", "define", "initialize", "show", "draw",
                "normalize", "scale", "select", "filter", "merge", "sort", "generate", "update", "append", "store",
            ]),
            stopwords: words(&[
                "a", "an", "the", "and", "or", "of", "on", "in", "to", "for", "with", "by", "at", "from", "as", "is", "be",
                "each", "all", "into", "per",
            ]),
            mixed,
        }
    }

    fn pieces(&self, text: &str) -> Vec<String> {
        normalize(text).into_iter().filter(|p| !self.stopwords.contains(p)).collect()
    }

    fn synonyms(&self, a: &str, b: &str) -> bool {
        match (self.synonyms.get(a), self.synonyms.get(b)) {
            (Some(x), Some(y)) => !x.is_disjoint(y),
            _ => false,
        }
    }

    /// Score between two word pieces that are not the whole of both phrases.
    fn piece_score(&self, a: &str, b: &str) -> f64 {
        if a == b || stem(a) == stem(b) {
            return SHARED_STEM;
        }
        if self.synonyms(a, b) {
            return SYNONYM;
        }
        let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        if short.len() >= 3 && long.contains(short) {
            return SUBSTRING;
        }
        0.0
    }

    /// Symmetric phrase score from normalized pieces.
    pub fn score_pieces(&self, a: &[String], b: &[String]) -> f64 {
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        if a == b {
            return EXACT;
        }
        let mut best: f64 = 0.0;
        for x in a {
            for y in b {
                best = best.max(self.piece_score(x, y));
            }
        }
        if best < MIN_SCORE {
            0.0
        } else {
            best
        }
    }

    pub fn score(&self, a: &str, b: &str) -> f64 {
        self.score_pieces(&self.pieces(a), &self.pieces(b))
    }

    fn phrase_entity(&self, pieces: &[String], is_code: bool, called: &BTreeSet<String>, text: &str) -> EntityType {
        if is_code {
            if called.contains(text) {
                return EntityType::Function;
            }
            if pieces.iter().any(|p| self.data_nouns.contains(p)) {
                return EntityType::DataEntity;
            }
            return EntityType::Variable;
        }
        if pieces.first().is_some_and(|p| self.verbs.contains(stem(p)) || self.verbs.contains(p)) {
            EntityType::Action
        } else if pieces.iter().any(|p| self.data_nouns.contains(p)) {
            EntityType::DataEntity
        } else if pieces.iter().any(|p| self.verbs.contains(stem(p)) || self.verbs.contains(p)) {
            EntityType::Action
        } else {
            EntityType::Variable
        }
    }

    /// Links from `source[start..end]` of `block`'s prompt, best first.
    pub fn links_for(
        &self,
        tree: &PromptTree,
        doc: &CodeDocument,
        block: NodeId,
        start: usize,
        end: usize,
    ) -> Result<Vec<CorrelationLink>> {
        let prompt = tree.block(block)?.prompt();
        if start >= end || end > prompt.len() || !prompt.is_char_boundary(start) || !prompt.is_char_boundary(end) {
            return Err(LadderError::Range { start, end, len: prompt.len() });
        }
        let source = self.pieces(&prompt[start..end]);
        let mut links = Vec::new();
        if source.is_empty() {
            return Ok(links);
        }

        let tokens = code_tokens(&doc.text, &self.mixed);
        let called: BTreeSet<String> = tokens.iter().filter(|t| t.role == TokenRole::Call).map(|t| t.text.clone()).collect();
        let known: KnownIdentifiers = tokens.iter().map(|t| t.text.clone()).collect();

        for t in &tokens {
            let score = self.score_pieces(&source, &self.pieces(&t.text));
            if score < MIN_SCORE {
                continue;
            }
            let entity = match t.role {
                TokenRole::Call => EntityType::Function,
                TokenRole::Assigned => EntityType::Variable,
                TokenRole::Plain if normalize(&t.text).iter().any(|p| self.data_nouns.contains(p)) => EntityType::DataEntity,
                TokenRole::Plain => EntityType::Variable,
            };
            links.push(CorrelationLink {
                source_block: block,
                source_start: start,
                source_end: end,
                target: LinkTarget::CodeToken {
                    doc_version: doc.doc_version,
                    line: t.line,
                    start: t.start,
                    end: t.end,
                    text: t.text.clone(),
                },
                entity_type: entity,
                score,
            });
        }

        for b in tree.blocks() {
            if b.id().is_root() {
                continue;
            }
            for (s, e, is_code) in self.phrases(b.prompt(), &known)? {
                if b.id() == block && s < end && start < e {
                    continue;
                }
                let text = &b.prompt()[s..e];
                let pieces = self.pieces(text);
                let score = self.score_pieces(&source, &pieces);
                if score < MIN_SCORE {
                    continue;
                }
                links.push(CorrelationLink {
                    source_block: block,
                    source_start: start,
                    source_end: end,
                    target: LinkTarget::Phrase {
                        block: b.id(),
                        start: s,
                        end: e,
                        text: text.to_string(),
                    },
                    entity_type: self.phrase_entity(&pieces, is_code, &called, text),
                    score,
                });
            }
        }

        links.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .expect("finite")
                .then_with(|| target_order(&a.target).cmp(&target_order(&b.target)))
        });
        Ok(links)
    }

    /// Natural-language spans split at clause punctuation, and identifier
    /// tokens inside code spans.
    fn phrases(&self, prompt: &str, known: &KnownIdentifiers) -> Result<Vec<(usize, usize, bool)>> {
        let mut out = Vec::new();
        for span in classify_spans_with(prompt, &self.mixed, known)? {
            let text = &prompt[span.start..span.end];
            match span.kind {
                SpanKind::Nl => {
                    let mut pos = 0;
                    for part in text.split([',', ';', '.', '(', ')', ':', '\n']) {
                        let lead = part.len() - part.trim_start().len();
                        let trimmed = part.trim();
                        if !trimmed.is_empty() && trimmed.chars().any(|c| c.is_ascii_alphabetic()) {
                            let s = span.start + pos + lead;
                            out.push((s, s + trimmed.len(), false));
                        }
                        pos += part.len() + 1;
                    }
                }
                SpanKind::Code => {
                    let bytes = text.as_bytes();
                    let mut i = 0;
                    while i < bytes.len() {
                        if bytes[i].is_ascii_alphabetic() || bytes[i] == b'_' {
                            let s = i;
                            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                                i += 1;
                            }
                            let word = &text[s..i];
                            if !self.mixed.reserved.contains(word) {
                                out.push((span.start + s, span.start + i, true));
                            }
                        } else {
                            i += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn target_order(t: &LinkTarget) -> (u8, u64, usize, usize) {
    match t {
        LinkTarget::CodeToken { line, start, .. } => (0, 0, *line, *start),
        LinkTarget::Phrase { block, start, .. } => (1, block.get(), 0, *start),
    }
}

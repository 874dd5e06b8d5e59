//! Span-kind agreement against the hand-labeled prompt corpus.

use ladder_core::mixed_mode::{classify_spans, SpanKind};
use serde::Deserialize;

#[derive(Deserialize)]
pub struct Item {
    pub prompt: String,
    /// Substrings labeled as code; everything else is natural language.
    pub code: Vec<String>,
}

#[derive(Deserialize)]
pub struct Corpus {
    pub version: u32,
    pub kind: String,
    pub items: Vec<Item>,
}

pub fn load(path: &std::path::Path) -> Corpus {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn labels(item: &Item) -> Vec<SpanKind> {
    let mut out = vec![SpanKind::Nl; item.prompt.len()];
    for c in &item.code {
        let at = item.prompt.find(c.as_str()).expect("labeled substring occurs in prompt");
        out[at..at + c.len()].fill(SpanKind::Code);
    }
    out
}

pub struct Agreement {
    pub agreeing: usize,
    pub total: usize,
    /// Prompts with at least one disagreeing character.
    pub mismatched: Vec<String>,
}

impl Agreement {
    pub fn ratio(&self) -> f64 {
        self.agreeing as f64 / self.total as f64
    }
}

/// Agreement over non-whitespace characters.
pub fn agreement(corpus: &Corpus) -> Agreement {
    let mut a = Agreement { agreeing: 0, total: 0, mismatched: Vec::new() };
    for item in &corpus.items {
        let want = labels(item);
        let mut got = vec![SpanKind::Nl; item.prompt.len()];
        for s in classify_spans(&item.prompt).unwrap() {
            got[s.start..s.end].fill(s.kind);
        }
        let mut clean = true;
        for (i, ch) in item.prompt.char_indices() {
            if ch.is_whitespace() {
                continue;
            }
            a.total += 1;
            if want[i] == got[i] {
                a.agreeing += 1;
            } else {
                clean = false;
            }
        }
        if !clean {
            a.mismatched.push(item.prompt.clone());
        }
    }
    a
}

/// Kind of the whole prompt, if the classifier gives it a single kind.
pub fn whole_kind(prompt: &str) -> Option<SpanKind> {
    let spans = classify_spans(prompt).unwrap();
    let kinds: Vec<SpanKind> = spans
        .iter()
        .filter(|s| !prompt[s.start..s.end].trim().is_empty())
        .map(|s| s.kind)
        .collect();
    match kinds.as_slice() {
        [k] => Some(*k),
        _ => None,
    }
}

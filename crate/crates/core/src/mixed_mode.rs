//! Mixed-mode prompt analysis.
//!
//! Prompts freely interleave natural language with code syntax. This module
//! splits a prompt into [`MixedSpan`]s of either kind and tokenizes
//! identifiers, both for prompts and for generated code. Detection is lexical:
//! fragments such as `.predict()` are not valid programs, so no parser is
//! involved.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{LadderError, Result};
use crate::prompt_tree::PROMPT_LIMIT;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Nl,
    Code,
}

/// A classified byte range of a prompt.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedSpan {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifierToken {
    pub text: String,
    pub normalized: Vec<String>,
    pub start: usize,
    pub end: usize,
}

/// Target-language vocabulary used by the classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixedModeConfig {
    /// Keywords that open a suite and end their line with `:`.
    pub suite_keywords: BTreeSet<String>,
    /// Keywords that lead a simple statement.
    pub simple_keywords: BTreeSet<String>,
    /// Keywords that may stand alone on a line.
    pub bare_keywords: BTreeSet<String>,
    /// Keywords allowed between operands inside a statement header.
    pub operator_keywords: BTreeSet<String>,
    /// Words never reported as identifiers.
    pub reserved: BTreeSet<String>,
}

fn set(words: &[&str]) -> BTreeSet<String> {
    words.iter().map(|w| w.to_string()).collect()
}

impl Default for MixedModeConfig {
    fn default() -> Self {
        let suite = [
            "for", "while", "if", "elif", "else", "def", "class", "with", "try", "except", "finally",
            "async",
        ];
        let simple = ["return", "raise", "assert", "del", "yield", "global", "nonlocal", "await"];
        let bare = ["pass", "break", "continue", "return"];
        let ops = [
            "in", "not", "and", "or", "is", "as", "if", "else", "for", "lambda", "None", "True",
            "False", "async", "await", "from",
        ];
        let mut reserved = set(&suite);
        reserved.extend(set(&simple));
        reserved.extend(set(&bare));
        reserved.extend(set(&ops));
        reserved.extend(set(&["import", "elif", "def", "class"]));
        MixedModeConfig {
            suite_keywords: set(&suite),
            simple_keywords: set(&simple),
            bare_keywords: set(&bare),
            operator_keywords: set(&ops),
            reserved,
        }
    }
}

/// Identifiers already present in generated code. Words matching one of these
/// are treated as code even when they appear alone in natural language.
pub type KnownIdentifiers = BTreeSet<String>;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Tok {
    Ident,
    Number,
    Str,
    Punct,
    Space,
    Newline,
    /// Non-ASCII text and anything else that can only be prose.
    Other,
}

#[derive(Copy, Clone, Debug)]
struct Token {
    kind: Tok,
    start: usize,
    end: usize,
}

const TWO_CHAR_OPS: [&str; 12] = ["==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "->", "**", "//", "%="];

fn lex(text: &str) -> Vec<Token> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = if c == b'\n' {
            i += 1;
            Tok::Newline
        } else if c == b' ' || c == b'\t' || c == b'\r' {
            while i < bytes.len() && matches!(bytes[i], b' ' | b'\t' | b'\r') {
                i += 1;
            }
            Tok::Space
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            Tok::Ident
        } else if c.is_ascii_digit() {
            while i < bytes.len()
                && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || (bytes[i] == b'.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit()))
            {
                i += 1;
            }
            Tok::Number
        } else if (c == b'\'' || c == b'"') && string_may_open(bytes, i) {
            match string_end(bytes, i) {
                Some(end) => {
                    i = end;
                    Tok::Str
                }
                None => {
                    i += 1;
                    Tok::Punct
                }
            }
        } else if c.is_ascii() {
            if i + 1 < bytes.len() && TWO_CHAR_OPS.contains(&&text[i..i + 2]) {
                i += 2;
            } else {
                i += 1;
            }
            Tok::Punct
        } else {
            let ch = text[i..].chars().next().expect("char boundary");
            i += ch.len_utf8();
            Tok::Other
        };
        out.push(Token { kind, start, end: i });
    }
    out
}

fn string_may_open(bytes: &[u8], i: usize) -> bool {
    // An apostrophe inside a word ("don't") never opens a literal.
    i == 0 || matches!(bytes[i - 1], b' ' | b'\t' | b'\n' | b'(' | b'[' | b'{' | b',' | b'=' | b':' | b'f' | b'r' | b'b')
        && (i < 2 || !(bytes[i - 1].is_ascii_alphabetic() && bytes[i - 2].is_ascii_alphanumeric()))
}

fn string_end(bytes: &[u8], open: usize) -> Option<usize> {
    let quote = bytes[open];
    let mut j = open + 1;
    while j < bytes.len() && bytes[j] != b'\n' {
        if bytes[j] == b'\\' {
            j += 2;
            continue;
        }
        if bytes[j] == quote {
            let after = bytes.get(j + 1).copied();
            let closes = after.is_none_or(|a| !a.is_ascii_alphanumeric() && a != b'_');
            return closes.then_some(j + 1);
        }
        j += 1;
    }
    None
}

struct Line<'t> {
    text: &'t str,
    toks: &'t [Token],
}

impl<'t> Line<'t> {
    fn s(&self, i: usize) -> &'t str {
        let t = self.toks[i];
        &self.text[t.start..t.end]
    }

    fn is(&self, i: usize, p: &str) -> bool {
        i < self.toks.len() && self.toks[i].kind == Tok::Punct && self.s(i) == p
    }

    fn kind(&self, i: usize) -> Option<Tok> {
        self.toks.get(i).map(|t| t.kind)
    }

    fn next_solid(&self, i: usize) -> Option<usize> {
        (i..self.toks.len()).find(|&k| self.toks[k].kind != Tok::Space)
    }

    fn prev_solid(&self, i: usize) -> Option<usize> {
        (0..i).rev().find(|&k| self.toks[k].kind != Tok::Space)
    }

    /// Index of the bracket closing the one at `open`, on this line.
    fn matching(&self, open: usize) -> Option<usize> {
        let mut depth = 0i32;
        for k in open..self.toks.len() {
            if self.toks[k].kind != Tok::Punct {
                continue;
            }
            match self.s(k) {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(k);
                    }
                    if depth < 0 {
                        return None;
                    }
                }
                _ => {}
            }
        }
        None
    }
}

struct Classifier<'c> {
    config: &'c MixedModeConfig,
    known: &'c KnownIdentifiers,
}

impl Classifier<'_> {
    fn operand(&self, line: &Line, i: usize) -> bool {
        match line.kind(i) {
            Some(Tok::Ident) => !self.config.operator_keywords.contains(line.s(i)),
            Some(Tok::Number) | Some(Tok::Str) => true,
            _ => false,
        }
    }

    /// True when no two operands sit next to each other with only whitespace
    /// between them, which is what distinguishes `epoch in range(...)` from
    /// `each row in the table`.
    fn code_like(&self, line: &Line, from: usize, to: usize) -> bool {
        let mut prev_operand = false;
        let mut k = from;
        while k < to {
            let t = line.toks[k];
            match t.kind {
                Tok::Space => {}
                Tok::Other => return false,
                Tok::Newline => return false,
                _ if self.operand(line, k) => {
                    if prev_operand {
                        return false;
                    }
                    prev_operand = true;
                }
                Tok::Punct if matches!(line.s(k), "(" | "[" | "{") => {
                    match line.matching(k) {
                        Some(close) => {
                            k = close + 1;
                            prev_operand = true;
                            continue;
                        }
                        None => return false,
                    }
                }
                Tok::Punct if line.s(k) == "." => {
                    // attribute access keeps the chain going
                    if line.kind(k + 1) == Some(Tok::Ident) {
                        k += 2;
                        prev_operand = true;
                        continue;
                    }
                    prev_operand = false;
                }
                _ => prev_operand = false,
            }
            k += 1;
        }
        true
    }

    fn keyword_statement(&self, line: &Line) -> bool {
        let Some(first) = line.next_solid(0) else { return false };
        if line.kind(first) != Some(Tok::Ident) {
            return false;
        }
        let kw = line.s(first);
        let last = line.prev_solid(line.toks.len()).expect("line has a solid token");
        if kw == "import" {
            return self.import_list(line, first + 1, line.toks.len());
        }
        if kw == "from" {
            let Some(imp) = (first..line.toks.len()).find(|&k| line.kind(k) == Some(Tok::Ident) && line.s(k) == "import")
            else {
                return false;
            };
            return self.dotted_only(line, first + 1, imp)
                && (self.import_list(line, imp + 1, line.toks.len())
                    || line.next_solid(imp + 1).is_some_and(|k| line.is(k, "*")));
        }
        if self.config.bare_keywords.contains(kw) && first == last {
            return true;
        }
        if self.config.suite_keywords.contains(kw) {
            return line.is(last, ":") && self.code_like(line, first + 1, last);
        }
        if self.config.simple_keywords.contains(kw) {
            return first != last && self.code_like(line, first + 1, last + 1);
        }
        false
    }

    fn dotted_only(&self, line: &Line, from: usize, to: usize) -> bool {
        let solid: Vec<usize> = (from..to).filter(|&k| line.toks[k].kind != Tok::Space).collect();
        !solid.is_empty()
            && solid.iter().enumerate().all(|(n, &k)| {
                if n % 2 == 0 {
                    line.kind(k) == Some(Tok::Ident)
                } else {
                    line.is(k, ".")
                }
            })
            && solid.len() % 2 == 1
    }

    /// `a.b [as c] (, d [as e])*` up to `to`.
    fn import_list(&self, line: &Line, from: usize, to: usize) -> bool {
        let solid: Vec<usize> = (from..to).filter(|&k| line.toks[k].kind != Tok::Space).collect();
        if solid.is_empty() {
            return false;
        }
        let mut items = solid.split(|&k| line.is(k, ","));
        items.all(|item| {
            let (names, alias): (&[usize], &[usize]) =
                match item.iter().position(|&k| line.kind(k) == Some(Tok::Ident) && line.s(k) == "as") {
                    Some(p) => (&item[..p], &item[p + 1..]),
                    None => (item, &[]),
                };
            let names_ok = !names.is_empty()
                && names.len() % 2 == 1
                && names.iter().enumerate().all(|(n, &k)| {
                    if n % 2 == 0 {
                        line.kind(k) == Some(Tok::Ident)
                    } else {
                        line.is(k, ".")
                    }
                });
            // Adjacent words ("import the data") are not an import list.
            let adjacent_words = names.windows(2).any(|w| line.toks[w[1]].start != line.toks[w[0]].end);
            let alias_ok = alias.is_empty() || (alias.len() == 1 && line.kind(alias[0]) == Some(Tok::Ident));
            names_ok && alias_ok && !adjacent_words
        })
    }

    /// Extends a primary expression to the left over `a.b.` chains.
    fn chain_start(&self, line: &Line, mut i: usize) -> usize {
        while i >= 1 && line.is(i - 1, ".") {
            if i >= 2 && matches!(line.kind(i - 2), Some(Tok::Ident)) {
                i -= 2;
            } else if i >= 2 && (line.is(i - 2, ")") || line.is(i - 2, "]")) {
                // walk back over the bracket group
                let close = i - 2;
                let mut depth = 0i32;
                let mut k = close;
                loop {
                    if line.toks[k].kind == Tok::Punct {
                        match line.s(k) {
                            ")" | "]" | "}" => depth += 1,
                            "(" | "[" | "{" => depth -= 1,
                            _ => {}
                        }
                    }
                    if depth == 0 || k == 0 {
                        break;
                    }
                    k -= 1;
                }
                if depth != 0 || k == 0 || line.kind(k - 1) != Some(Tok::Ident) {
                    return i - 1;
                }
                i = k - 1;
            } else {
                // leading-dot fragment such as `.predict()`
                return i - 1;
            }
        }
        i
    }

    /// Extends a primary expression to the right over calls, subscripts and
    /// attribute access. Returns the last token index included.
    fn chain_end(&self, line: &Line, mut i: usize) -> usize {
        loop {
            if line.is(i + 1, "(") || line.is(i + 1, "[") {
                match line.matching(i + 1) {
                    Some(close) => i = close,
                    None => return i,
                }
            } else if line.is(i + 1, ".") && line.kind(i + 2) == Some(Tok::Ident) {
                i += 2;
            } else {
                return i;
            }
        }
    }

    fn mark_line(&self, line: &Line, code: &mut [bool]) {
        let n = line.toks.len();
        if n == 0 || line.next_solid(0).is_none() {
            return;
        }
        if self.keyword_statement(line) {
            code.iter_mut().for_each(|c| *c = true);
            return;
        }
        let mark = |from: usize, to: usize, code: &mut [bool]| {
            for c in &mut code[from..=to] {
                *c = true;
            }
        };
        for i in 0..n {
            let t = line.toks[i];
            match t.kind {
                Tok::Ident => {
                    let word = line.s(i);
                    let followed_by_group = line.is(i + 1, "(") || line.is(i + 1, "[");
                    let attr = line.is(i + 1, ".") && line.kind(i + 2) == Some(Tok::Ident);
                    let leading_dot = line.is(i.wrapping_sub(1), ".")
                        && (i < 2 || matches!(line.kind(i - 2), Some(Tok::Space) | Some(Tok::Newline) | Some(Tok::Punct))
                            && !line.is(i - 2, ")")
                            && !line.is(i - 2, "]"));
                    if followed_by_group && line.matching(i + 1).is_some() {
                        mark(self.chain_start(line, i), self.chain_end(line, i), code);
                    } else if attr && !self.abbreviation(line, i) {
                        mark(self.chain_start(line, i), self.chain_end(line, i), code);
                    } else if leading_dot && i >= 1 {
                        mark(i - 1, self.chain_end(line, i), code);
                    } else if identifier_shaped(word) || self.known.contains(word) {
                        mark(i, i, code);
                    }
                }
                Tok::Str => mark(i, i, code),
                Tok::Punct if matches!(line.s(i), "=" | "+=" | "-=" | "*=" | "/=" | "%=") => {
                    if let Some((from, to)) = self.assignment(line, i) {
                        mark(from, to, code);
                    }
                }
                _ => {}
            }
        }
    }

    /// `e.g` and `i.e` look like attribute access but are prose.
    fn abbreviation(&self, line: &Line, i: usize) -> bool {
        let start = self.chain_start(line, i);
        let end = self.chain_end(line, i);
        (start..=end)
            .filter(|&k| line.kind(k) == Some(Tok::Ident))
            .all(|k| line.s(k).len() == 1)
    }

    fn assignment(&self, line: &Line, eq: usize) -> Option<(usize, usize)> {
        // left side: target (chain) optionally preceded by `a, b,` targets
        let mut lhs_end = line.prev_solid(eq)?;
        if !(line.kind(lhs_end) == Some(Tok::Ident) || line.is(lhs_end, "]") || line.is(lhs_end, ")")) {
            return None;
        }
        if line.is(lhs_end, "]") || line.is(lhs_end, ")") {
            // subscript target: find its opening bracket
            let mut depth = 0i32;
            let mut k = lhs_end;
            loop {
                if line.toks[k].kind == Tok::Punct {
                    match line.s(k) {
                        ")" | "]" => depth += 1,
                        "(" | "[" => depth -= 1,
                        _ => {}
                    }
                }
                if depth == 0 || k == 0 {
                    break;
                }
                k -= 1;
            }
            if depth != 0 || k == 0 || line.kind(k - 1) != Some(Tok::Ident) {
                return None;
            }
            lhs_end = k - 1;
        }
        if self.config.reserved.contains(line.s(lhs_end)) {
            return None;
        }
        let mut from = self.chain_start(line, lhs_end);
        while let Some(comma) = line.prev_solid(from) {
            if !line.is(comma, ",") {
                break;
            }
            match line.prev_solid(comma) {
                Some(k) if line.kind(k) == Some(Tok::Ident) => from = self.chain_start(line, k),
                _ => break,
            }
        }

        // right side: operands separated by operators, stopping at prose
        let mut k = eq + 1;
        let mut last_operand = None;
        let mut expect_operand = true;
        while let Some(s) = line.next_solid(k) {
            let kind = line.kind(s);
            let is_operand = matches!(kind, Some(Tok::Number) | Some(Tok::Str))
                || (kind == Some(Tok::Ident) && !self.config.reserved.contains(line.s(s)))
                || line.is(s, "(")
                || line.is(s, "[")
                || line.is(s, "{")
                || line.is(s, "-") && expect_operand;
            if is_operand {
                if !expect_operand {
                    break;
                }
                if line.is(s, "-") {
                    k = s + 1;
                    continue;
                }
                let end = if kind == Some(Tok::Ident) {
                    self.chain_end(line, s)
                } else if matches!(kind, Some(Tok::Punct)) {
                    match line.matching(s) {
                        Some(close) => self.chain_end(line, close),
                        None => break,
                    }
                } else {
                    s
                };
                last_operand = Some(end);
                expect_operand = false;
                k = end + 1;
            } else if kind == Some(Tok::Punct)
                && matches!(line.s(s), "+" | "-" | "*" | "/" | "%" | "**" | "//" | "<" | ">" | "<=" | ">=" | "==" | "!=" | "," | "@" | "&" | "|")
                && !expect_operand
            {
                expect_operand = true;
                k = s + 1;
            } else {
                break;
            }
        }
        last_operand.map(|to| (from, to))
    }
}

/// `snake_case`, `CamelCase` and `SCREAMING_CASE` names are unambiguous code
/// even in prose; plain words are not.
fn identifier_shaped(word: &str) -> bool {
    let bytes = word.as_bytes();
    let snake = bytes.len() > 1
        && word.contains('_')
        && bytes.iter().any(|b| b.is_ascii_alphanumeric());
    let camel = bytes.first().is_some_and(|b| b.is_ascii_uppercase())
        && bytes.windows(2).any(|w| w[0].is_ascii_lowercase() && w[1].is_ascii_uppercase());
    snake || camel
}

/// Classifies a prompt with the default vocabulary and no known identifiers.
pub fn classify_spans(prompt: &str) -> Result<Vec<MixedSpan>> {
    classify_spans_with(prompt, &MixedModeConfig::default(), &KnownIdentifiers::new())
}

pub fn classify_spans_with(
    prompt: &str,
    config: &MixedModeConfig,
    known: &KnownIdentifiers,
) -> Result<Vec<MixedSpan>> {
    if prompt.len() > PROMPT_LIMIT {
        return Err(LadderError::InputTooLarge {
            len: prompt.len(),
            limit: PROMPT_LIMIT,
        });
    }
    let toks = lex(prompt);
    let code = code_mask(prompt, &toks, config, known);

    // Code tokens separated only by spaces join into one region.
    let mut regions: Vec<(usize, usize)> = Vec::new();
    let mut last_solid_was_code = false;
    for (t, is_code) in toks.iter().zip(&code) {
        if t.kind == Tok::Space {
            continue;
        }
        match regions.last_mut() {
            Some(r) if *is_code && last_solid_was_code => r.1 = t.end,
            _ if *is_code => regions.push((t.start, t.end)),
            _ => {}
        }
        last_solid_was_code = *is_code;
    }
    Ok(spans_from_regions(prompt.len(), &regions))
}

fn code_mask(prompt: &str, toks: &[Token], config: &MixedModeConfig, known: &KnownIdentifiers) -> Vec<bool> {
    let classifier = Classifier { config, known };
    let mut code = vec![false; toks.len()];
    let mut line_start = 0;
    for i in 0..=toks.len() {
        if i == toks.len() || toks[i].kind == Tok::Newline {
            let line = Line {
                text: prompt,
                toks: &toks[line_start..i],
            };
            classifier.mark_line(&line, &mut code[line_start..i]);
            line_start = i + 1;
        }
    }
    code
}

fn spans_from_regions(len: usize, regions: &[(usize, usize)]) -> Vec<MixedSpan> {
    let mut spans = Vec::new();
    let mut pos = 0;
    for &(start, end) in regions {
        if start > pos {
            spans.push(MixedSpan { start: pos, end: start, kind: SpanKind::Nl });
        }
        spans.push(MixedSpan { start, end, kind: SpanKind::Code });
        pos = end;
    }
    if pos < len || spans.is_empty() && len > 0 {
        spans.push(MixedSpan { start: pos, end: len, kind: SpanKind::Nl });
    }
    spans
}

/// Whether the whole prompt (ignoring surrounding whitespace) is code syntax.
pub fn is_pure_code(prompt: &str, config: &MixedModeConfig, known: &KnownIdentifiers) -> Result<bool> {
    let spans = classify_spans_with(prompt, config, known)?;
    Ok(!prompt.trim().is_empty()
        && spans
            .iter()
            .filter(|s| s.kind == SpanKind::Nl)
            .all(|s| prompt[s.start..s.end].trim().is_empty()))
}

/// Splits an identifier into lowercase word pieces: on underscores and other
/// separators, at camel-case boundaries, with digits dropped.
///
/// Only ASCII letters form pieces, which keeps the function idempotent:
/// `normalize(&normalize(x).join("_")) == normalize(x)`.
pub fn normalize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if !c.is_ascii_alphabetic() {
            if !cur.is_empty() {
                pieces.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if c.is_ascii_uppercase() && !cur.is_empty() {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_ascii_lowercase());
            // fooBar -> foo|Bar ; HTMLParser -> HTML|Parser
            if prev.is_ascii_lowercase() || (prev.is_ascii_uppercase() && next_lower) {
                pieces.push(std::mem::take(&mut cur));
            }
        }
        cur.push(c.to_ascii_lowercase());
    }
    if !cur.is_empty() {
        pieces.push(cur);
    }
    pieces
}

impl IdentifierToken {
    pub fn new(text: &str, start: usize) -> Self {
        IdentifierToken {
            text: text.to_string(),
            normalized: normalize(text),
            start,
            end: start + text.len(),
        }
    }
}

pub fn extract_identifiers(prompt: &str) -> Result<Vec<IdentifierToken>> {
    extract_identifiers_with(prompt, &MixedModeConfig::default(), &KnownIdentifiers::new())
}

/// Identifier tokens inside the prompt's code spans. Natural-language words
/// that match a known identifier are classified as code and so included.
pub fn extract_identifiers_with(
    prompt: &str,
    config: &MixedModeConfig,
    known: &KnownIdentifiers,
) -> Result<Vec<IdentifierToken>> {
    let spans = classify_spans_with(prompt, config, known)?;
    let in_code = |t: &Token| {
        spans
            .iter()
            .any(|s| s.kind == SpanKind::Code && s.start <= t.start && t.end <= s.end)
    };
    Ok(lex(prompt)
        .iter()
        .filter(|t| t.kind == Tok::Ident && in_code(t))
        .map(|t| (&prompt[t.start..t.end], t.start))
        .filter(|(w, _)| !config.reserved.contains(*w) && *w != "import")
        .map(|(w, start)| IdentifierToken::new(w, start))
        .collect())
}

/// How an identifier is used in code.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    /// Immediately followed by a call.
    Call,
    /// Target of an assignment.
    Assigned,
    Plain,
}

/// An identifier occurrence in source code. Lines and columns are 0-based;
/// columns are byte offsets within the line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeToken {
    pub line: usize,
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub after_dot: bool,
    pub role: TokenRole,
}

/// Identifier tokens of source code, skipping comments, string literals and
/// reserved words.
pub fn code_tokens(code: &str, config: &MixedModeConfig) -> Vec<CodeToken> {
    let mut out = Vec::new();
    let mut in_triple: Option<&str> = None;
    for (line_no, line) in code.split('\n').enumerate() {
        let bytes = line.as_bytes();
        let mut i = 0;
        let mut line_tokens: Vec<(usize, usize)> = Vec::new();
        while i < bytes.len() {
            if let Some(q) = in_triple {
                match line[i..].find(q) {
                    Some(p) => {
                        i += p + 3;
                        in_triple = None;
                        continue;
                    }
                    None => break,
                }
            }
            let c = bytes[i];
            if c == b'#' {
                break;
            }
            if c == b'\'' || c == b'"' {
                let triple = if c == b'"' { "\"\"\"" } else { "'''" };
                if line[i..].starts_with(triple) {
                    in_triple = Some(triple);
                    i += 3;
                    continue;
                }
                let mut j = i + 1;
                while j < bytes.len() && bytes[j] != c {
                    j += if bytes[j] == b'\\' { 2 } else { 1 };
                }
                i = j + 1;
                continue;
            }
            if c.is_ascii_alphabetic() || c == b'_' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                // string prefixes such as f"..." are not identifiers
                if i < bytes.len() && (bytes[i] == b'"' || bytes[i] == b'\'') && i - start <= 2 {
                    continue;
                }
                line_tokens.push((start, i));
                continue;
            }
            if c.is_ascii_digit() {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                    i += 1;
                }
                continue;
            }
            i += 1;
        }
        for (start, end) in line_tokens {
            let text = &line[start..end];
            if config.reserved.contains(text) || text == "import" {
                continue;
            }
            let rest = line[end..].trim_start();
            let role = if rest.starts_with('(') {
                TokenRole::Call
            } else if (rest.starts_with('=') && !rest.starts_with("=="))
                || rest.starts_with("+=")
                || rest.starts_with("-=")
                || (rest.starts_with(',') && line.contains(" = ") && line.find(" = ").is_some_and(|p| p > end))
            {
                TokenRole::Assigned
            } else {
                TokenRole::Plain
            };
            out.push(CodeToken {
                line: line_no,
                start,
                end,
                text: text.to_string(),
                after_dot: start > 0 && bytes[start - 1] == b'.',
                role,
            });
        }
    }
    out
}

/// Every identifier used in `code`, for classification of later prompts.
pub fn known_identifiers<'a>(codes: impl IntoIterator<Item = &'a str>, config: &MixedModeConfig) -> KnownIdentifiers {
    codes
        .into_iter()
        .flat_map(|c| code_tokens(c, config))
        .map(|t| t.text)
        .collect()
}

//! Small text helpers shared across modules.

use std::borrow::Cow;

/// Converts CRLF and lone CR line endings to LF.
pub fn normalize_newlines(text: &str) -> Cow<'_, str> {
    if text.contains('\r') {
        Cow::Owned(text.replace("\r\n", "\n").replace('\r', "\n"))
    } else {
        Cow::Borrowed(text)
    }
}

/// Splits code into lines. Empty text has no lines; a single trailing newline
/// does not produce an extra empty line.
pub fn code_lines(code: &str) -> Vec<&str> {
    if code.is_empty() {
        return Vec::new();
    }
    code.strip_suffix('\n').unwrap_or(code).split('\n').collect()
}

pub fn leading_whitespace(line: &str) -> &str {
    let trimmed = line.trim_start_matches([' ', '\t']);
    &line[..line.len() - trimmed.len()]
}

//! Character-offset helpers.
//!
//! Every offset exposed by this crate counts Unicode scalar values, not bytes.

/// Number of characters in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Byte index of character offset `offset`, clamped to the end of `text`.
pub fn byte_index(text: &str, offset: usize) -> usize {
    text.char_indices()
        .nth(offset)
        .map(|(i, _)| i)
        .unwrap_or(text.len())
}

/// Substring between two character offsets.
pub fn slice(text: &str, start: usize, end: usize) -> &str {
    let s = byte_index(text, start);
    let e = byte_index(text, end);
    &text[s..e]
}

/// Replace the characters in `[start, end)` with `replacement`.
pub fn splice(text: &mut String, start: usize, end: usize, replacement: &str) {
    let s = byte_index(text, start);
    let e = byte_index(text, end);
    text.replace_range(s..e, replacement);
}

/// True when `[a_start, a_end)` and `[b_start, b_end)` share at least one character.
pub fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

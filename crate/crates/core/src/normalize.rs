//! Text normalization shared by the KB loader, corpus filter and matcher.

use unicode_normalization::UnicodeNormalization;

/// NFC, whitespace runs collapsed to one space, trimmed.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Single-scalar lowercase fold. Characters whose lowercase expands to more
/// than one scalar are kept as-is so character offsets stay stable.
#[inline]
pub fn fold_char(c: char) -> char {
    if c.is_ascii() {
        return c.to_ascii_lowercase();
    }
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Normalized surface form: [`normalize_text`] followed by [`fold_char`].
pub fn normalize_form(s: &str) -> String {
    normalize_text(s).chars().map(fold_char).collect()
}

#[inline]
pub fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

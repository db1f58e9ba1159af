//! Sentence filtering: length bounds, encoding checks and content dedup.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_128;

use crate::error::{Error, Result};
use crate::io;
use crate::normalize::normalize_text;

pub const MIN_CHARS: usize = 32;
pub const MAX_CHARS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSentence {
    pub sid: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    TooShort,
    TooLong,
    Duplicate,
    EncodingError,
    /// Missing `sid<TAB>text` structure, empty sid or a repeated sid.
    Malformed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub kept: usize,
    pub too_short: usize,
    pub too_long: usize,
    pub duplicate: usize,
    pub encoding_error: usize,
    pub malformed: usize,
}

impl FilterStats {
    fn record(&mut self, r: Rejection) {
        match r {
            Rejection::TooShort => self.too_short += 1,
            Rejection::TooLong => self.too_long += 1,
            Rejection::Duplicate => self.duplicate += 1,
            Rejection::EncodingError => self.encoding_error += 1,
            Rejection::Malformed => self.malformed += 1,
        }
    }

    pub fn rejected(&self) -> usize {
        self.too_short + self.too_long + self.duplicate + self.encoding_error + self.malformed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LengthBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for LengthBounds {
    fn default() -> Self {
        LengthBounds { min: MIN_CHARS, max: MAX_CHARS }
    }
}

fn check_line(raw: &[u8], bounds: LengthBounds) -> std::result::Result<RawSentence, Rejection> {
    let line = std::str::from_utf8(raw).map_err(|_| Rejection::EncodingError)?;
    let line = line.strip_suffix('\r').unwrap_or(line);
    let (sid, text) = line.split_once('\t').ok_or(Rejection::Malformed)?;
    if sid.is_empty() {
        return Err(Rejection::Malformed);
    }
    let text = normalize_text(text);
    let n = text.chars().count();
    if n < bounds.min {
        return Err(Rejection::TooShort);
    }
    if n > bounds.max {
        return Err(Rejection::TooLong);
    }
    Ok(RawSentence { sid: sid.to_string(), text })
}

/// Streams `lines` through the length, encoding and uniqueness filters.
/// Output order follows input order.
pub fn filter_sentences(lines: &[Vec<u8>], bounds: LengthBounds) -> (Vec<RawSentence>, FilterStats) {
    let checked: Vec<_> = lines.par_iter().map(|l| check_line(l, bounds)).collect();

    let mut stats = FilterStats { input: lines.len(), ..Default::default() };
    let mut seen_text: HashSet<u128> = HashSet::new();
    let mut seen_sid: HashSet<String> = HashSet::new();
    let mut kept = Vec::new();
    for item in checked {
        match item {
            Err(r) => stats.record(r),
            Ok(s) => {
                if !seen_text.insert(xxh3_128(s.text.as_bytes())) {
                    stats.record(Rejection::Duplicate);
                } else if !seen_sid.insert(s.sid.clone()) {
                    stats.record(Rejection::Malformed);
                } else {
                    kept.push(s);
                }
            }
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

pub fn read_sentences(path: &Path) -> Result<Vec<RawSentence>> {
    io::read_lines(path)?
        .into_iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (sid, text) = l.split_once('\t').ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected sid<TAB>text".into(),
            })?;
            Ok(RawSentence { sid: sid.to_string(), text: text.to_string() })
        })
        .collect()
}

pub fn write_sentences(path: &Path, sentences: &[RawSentence]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        let _ = writeln!(out, "{}\t{}", s.sid, s.text);
    }
    io::write_text(path, &out)
}

//! Turning tagged bags into model inputs: a token vocabulary for the
//! trainable encoder, or frozen states from an embedding archive.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{EncodedBag, EncodedSentence, SentenceInput};
use super::Scalar;
use crate::bag_builder::Bag;
use crate::error::{Error, Result};
use crate::io;
use crate::rng;
use crate::tagging::{TaggedSentence, TokenSpan, CARET, CLS, DOLLAR, SEP};

pub const UNK: &str = "[UNK]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl TokenVocab {
    /// `[UNK]`, the sentinels and markers, then every token seen in `bags`
    /// in sorted order.
    pub fn build<'a>(bags: impl IntoIterator<Item = &'a Bag>) -> Self {
        let seen: BTreeSet<&str> = bags
            .into_iter()
            .flat_map(|b| b.sentences.iter().flat_map(|s| s.tokens.iter().map(String::as_str)))
            .collect();
        let mut tokens: Vec<String> = [UNK, CLS, SEP, DOLLAR, CARET].map(String::from).to_vec();
        tokens
            .extend(seen.into_iter().filter(|t| !tokens.iter().any(|k| k == t)).map(String::from).collect::<Vec<_>>());
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        TokenVocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids; unknown tokens map to `[UNK]` and are counted in `unknown`.
    pub fn ids(&self, tokens: &[String], unknown: &mut usize) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| match self.index.get(t) {
                Some(&i) => i,
                None => {
                    *unknown += 1;
                    0
                }
            })
            .collect()
    }
}

/// Index line of an embedding archive. `offset` is in bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveEntry {
    pub sid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<[String; 2]>,
    pub offset: u64,
    pub rows: usize,
    pub cols: usize,
}

/// Optional alignment line: for each tagged token, the half-open row range
/// it occupies in the archive matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentEntry {
    pub sid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<[String; 2]>,
    pub token_rows: Vec<[usize; 2]>,
}

type ArchiveKey = (String, Option<[String; 2]>);

/// Frozen per-token states exported by an external encoder:
/// `<prefix>.index.jsonl`, `<prefix>.bin` and optionally
/// `<prefix>.align.jsonl`.
#[derive(Debug, Clone)]
pub struct EmbeddingArchive {
    entries: HashMap<ArchiveKey, ArchiveEntry>,
    align: HashMap<ArchiveKey, Vec<[usize; 2]>>,
    data: Vec<f32>,
    cols: usize,
}

pub fn archive_paths(prefix: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".index.jsonl"), with(".bin"), with(".align.jsonl"))
}

impl EmbeddingArchive {
    pub fn load(prefix: &Path) -> Result<Self> {
        let (index_path, bin_path, align_path) = archive_paths(prefix);
        let index: Vec<ArchiveEntry> = io::read_jsonl(&index_path)?;
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        check_consistency(&index, bytes.len() as u64)?;
        let cols = index.first().map_or(0, |e| e.cols);
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let align = if align_path.exists() {
            io::read_jsonl::<AlignmentEntry>(&align_path)?
                .into_iter()
                .map(|a| ((a.sid, a.group), a.token_rows))
                .collect()
        } else {
            HashMap::new()
        };
        let entries = index.into_iter().map(|e| ((e.sid.clone(), e.group.clone()), e)).collect();
        Ok(EmbeddingArchive { entries, align, data, cols })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn key_for(&self, s: &TaggedSentence) -> Option<ArchiveKey> {
        let with_group = (s.sid.clone(), Some(s.group.clone()));
        if self.entries.contains_key(&with_group) {
            return Some(with_group);
        }
        let bare = (s.sid.clone(), None);
        self.entries.contains_key(&bare).then_some(bare)
    }

    /// The stored matrix, bit-exact, and the `[$, ^]` spans mapped to rows.
    pub fn states<T: Scalar>(&self, s: &TaggedSentence) -> Result<(Array2<T>, [TokenSpan; 2])> {
        let key = self.key_for(s).ok_or_else(|| Error::MissingSid(s.sid.clone()))?;
        let e = &self.entries[&key];
        let start = (e.offset / 4) as usize;
        let slice = &self.data[start..start + e.rows * e.cols];
        let h = Array2::from_shape_fn((e.rows, e.cols), |(r, c)| T::from_f32(slice[r * e.cols + c]).unwrap());
        let spans = match self.align.get(&key) {
            Some(rows) => {
                let map = |(a, b): TokenSpan| -> Result<TokenSpan> {
                    let (ra, rb) = (rows.get(a), rows.get(b));
                    match (ra, rb) {
                        (Some(ra), Some(rb)) if rb[1] > ra[0] => Ok((ra[0], rb[1] - 1)),
                        _ => Err(Error::SpanOutOfBounds { span: (a, b), rows: e.rows }),
                    }
                };
                [map(s.dollar_span)?, map(s.caret_span)?]
            }
            None => {
                if e.rows != s.tokens.len() {
                    return Err(Error::Shape(format!(
                        "archive rows {} != tagged tokens {} for `{}` and no alignment",
                        e.rows,
                        s.tokens.len(),
                        s.sid
                    )));
                }
                [s.dollar_span, s.caret_span]
            }
        };
        Ok((h, spans))
    }
}

/// Byte accounting: `Σ rows × cols × 4` equals the binary size, offsets are
/// monotone and non-overlapping, widths agree.
pub fn check_consistency(index: &[ArchiveEntry], bin_len: u64) -> Result<()> {
    let mut expected = 0u64;
    let mut cols = None;
    for e in index {
        if e.offset != expected {
            return Err(Error::Shape(format!(
                "archive entry `{}` at offset {} (expected {expected})",
                e.sid, e.offset
            )));
        }
        if *cols.get_or_insert(e.cols) != e.cols {
            return Err(Error::Shape("archive entries disagree on cols".into()));
        }
        expected += (e.rows * e.cols * 4) as u64;
    }
    if expected != bin_len {
        return Err(Error::Shape(format!("archive index accounts for {expected} bytes, binary has {bin_len}")));
    }
    Ok(())
}

/// Writes an archive with random states for every tagged sentence, keyed by
/// `(sid, group)`. Used where no pretrained encoder is available.
pub fn write_stub_archive(tagged: &[&TaggedSentence], cols: usize, seed: u64, prefix: &Path) -> Result<()> {
    let (index_path, bin_path, _) = archive_paths(prefix);
    let mut rng = rng::stream(seed, "stub-archive");
    let mut index = Vec::new();
    let mut bin = io::create(&bin_path)?;
    let mut offset = 0u64;
    let mut seen = BTreeSet::new();
    for s in tagged {
        if !seen.insert((s.sid.clone(), s.group.clone())) {
            continue;
        }
        let rows = s.tokens.len();
        for _ in 0..rows * cols {
            let v: f32 = rng.gen_range(-1.0..1.0);
            bin.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
        }
        index.push(ArchiveEntry { sid: s.sid.clone(), group: Some(s.group.clone()), offset, rows, cols });
        offset += (rows * cols * 4) as u64;
    }
    bin.flush().map_err(|e| Error::io(&bin_path, e))?;
    io::write_jsonl(&index_path, &index)
}

/// How bags become model inputs.
#[derive(Debug, Clone)]
pub enum Encoding {
    Lite(TokenVocab),
    Precomputed(Arc<EmbeddingArchive>),
}

impl Encoding {
    /// Encodes a bag; `unknown` counts tokens mapped to `[UNK]`.
    pub fn encode_bag<T: Scalar>(&self, bag: &Bag, unknown: &mut usize) -> Result<EncodedBag<T>> {
        let sentences = bag.sentences.iter().map(|s| self.encode_sentence(s, unknown)).collect::<Result<_>>()?;
        Ok(EncodedBag { label: bag.label(), sentences })
    }

    pub fn encode_sentence<T: Scalar>(&self, s: &TaggedSentence, unknown: &mut usize) -> Result<EncodedSentence<T>> {
        match self {
            Encoding::Lite(vocab) => Ok(EncodedSentence {
                input: SentenceInput::Tokens(vocab.ids(&s.tokens, unknown)),
                spans: [s.dollar_span, s.caret_span],
            }),
            Encoding::Precomputed(archive) => {
                let (h, spans) = archive.states(s)?;
                Ok(EncodedSentence { input: SentenceInput::States(Arc::new(h)), spans })
            }
        }
    }
}

//! Entity marking. `$` and `^` tokens are inserted around the two entity
//! spans of a linked sentence. Under k-tag, `$` always wraps the KB head;
//! under s-tag (and s-tag+exprels) it wraps whichever entity appears first.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_linker::{CharSpan, Polarity};
use crate::kb_store::{RelId, RelationVocab, NA};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const DOLLAR: &str = "$";
pub const CARET: &str = "^";
/// Prefix of a token glued to its predecessor (no whitespace between).
pub const GLUE: &str = "##";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaggingScheme {
    #[serde(rename = "k-tag")]
    KTag,
    #[serde(rename = "s-tag")]
    STag,
    #[serde(rename = "s-tag+exprels")]
    STagExpRels,
}

impl TaggingScheme {
    pub fn expands_relations(self) -> bool {
        self == TaggingScheme::STagExpRels
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaggingScheme::KTag => "k-tag",
            TaggingScheme::STag => "s-tag",
            TaggingScheme::STagExpRels => "s-tag+exprels",
        }
    }
}

impl fmt::Display for TaggingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaggingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k-tag" | "ktag" => Ok(TaggingScheme::KTag),
            "s-tag" | "stag" => Ok(TaggingScheme::STag),
            "s-tag+exprels" | "stag-exprels" => Ok(TaggingScheme::STagExpRels),
            other => Err(Error::Config(format!("unknown tagging scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    /// Half-open character span of the underlying text (glue prefix excluded).
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token>;

    /// Inverse of [`Tokenizer::tokenize`] on whitespace-normalized text.
    fn detokenize(&self, tokens: &[String]) -> String;
}

/// Whitespace split, then leading and trailing punctuation peeled off into
/// single-character tokens. Pieces after the first in a whitespace chunk
/// carry the `##` glue prefix.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultTokenizer;

impl Tokenizer for DefaultTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                i += 1;
                continue;
            }
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            chunk_tokens(&chars, start, i, &mut out);
        }
        out
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        let mut out = String::new();
        for (i, t) in tokens.iter().enumerate() {
            match t.strip_prefix(GLUE) {
                Some(rest) if !rest.is_empty() => out.push_str(rest),
                _ => {
                    if i > 0 {
                        out.push(' ');
                    }
                    out.push_str(t);
                }
            }
        }
        out
    }
}

fn chunk_tokens(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let word = |c: char| c.is_alphanumeric();
    let first_word = (start..end).find(|&k| word(chars[k]));
    let mut pieces: Vec<(usize, usize)> = Vec::new();
    match first_word {
        None => pieces.extend((start..end).map(|k| (k, k + 1))),
        Some(fw) => {
            let lw = (start..end).rev().find(|&k| word(chars[k])).expect("has a word char");
            pieces.extend((start..fw).map(|k| (k, k + 1)));
            pieces.push((fw, lw + 1));
            pieces.extend((lw + 1..end).map(|k| (k, k + 1)));
        }
    }
    for (n, (s, e)) in pieces.into_iter().enumerate() {
        let body: String = chars[s..e].iter().collect();
        let text = if n == 0 { body } else { format!("{GLUE}{body}") };
        out.push(Token { text, start: s, end: e });
    }
}

/// Inclusive token-index span.
pub type TokenSpan = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedSentence {
    pub sid: String,
    /// `[head_cui, tail_cui]` in KB order.
    pub group: [String; 2],
    pub polarity: Polarity,
    pub scheme: TaggingScheme,
    pub tokens: Vec<String>,
    /// Span delimited by `$`: the KB head under k-tag, the first-appearing
    /// entity under s-tag.
    #[serde(rename = "head_span")]
    pub dollar_span: TokenSpan,
    /// Span delimited by `^`.
    #[serde(rename = "tail_span")]
    pub caret_span: TokenSpan,
    /// Whether the first-appearing entity is the KB head.
    pub e1_is_head: bool,
}

impl TaggedSentence {
    /// Drops sentinels and markers and detokenizes.
    pub fn untagged_text(&self, tokenizer: &dyn Tokenizer) -> String {
        let markers = [self.dollar_span.0 - 1, self.dollar_span.1 + 1, self.caret_span.0 - 1, self.caret_span.1 + 1];
        let last = self.tokens.len() - 1;
        let kept: Vec<String> = self
            .tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 0 && *i != last && !markers.contains(i))
            .map(|(_, t)| t.clone())
            .collect();
        tokenizer.detokenize(&kept)
    }

    /// `(head span, tail span)` in token indices, whatever the scheme.
    pub fn head_tail_spans(&self) -> (TokenSpan, TokenSpan) {
        match self.scheme {
            TaggingScheme::KTag => (self.dollar_span, self.caret_span),
            _ if self.e1_is_head => (self.dollar_span, self.caret_span),
            _ => (self.caret_span, self.dollar_span),
        }
    }

    /// Entity whose mention `$` delimits: true for the head.
    pub fn dollar_is_head(&self) -> bool {
        self.scheme == TaggingScheme::KTag || self.e1_is_head
    }
}

fn token_range(tokens: &[Token], span: CharSpan) -> Result<(usize, usize)> {
    let first = tokens.iter().position(|t| t.start == span.0).ok_or(Error::SpanMisaligned)?;
    let last = tokens.iter().position(|t| t.end == span.1).ok_or(Error::SpanMisaligned)?;
    if last < first {
        return Err(Error::SpanMisaligned);
    }
    Ok((first, last))
}

pub struct MatchView<'a> {
    pub sid: &'a str,
    pub head_cui: &'a str,
    pub tail_cui: &'a str,
    pub polarity: Polarity,
    pub head_span: CharSpan,
    pub tail_span: CharSpan,
}

/// Marks the two entity spans of `m` in `text`.
pub fn tag_sentence(
    m: &MatchView<'_>,
    text: &str,
    tokenizer: &dyn Tokenizer,
    scheme: TaggingScheme,
) -> Result<TaggedSentence> {
    let (h, t) = (m.head_span, m.tail_span);
    if h.0 >= h.1 || t.0 >= t.1 || (h.0 < t.1 && t.0 < h.1) {
        return Err(Error::OverlappingSpans);
    }
    let tokens = tokenizer.tokenize(text);
    if let Some(tok) = tokens.iter().find(|t| t.text == DOLLAR || t.text == CARET) {
        return Err(Error::MarkerCollision(tok.text.clone()));
    }
    let head = token_range(&tokens, h)?;
    let tail = token_range(&tokens, t)?;
    let e1_is_head = h.0 < t.0;
    let dollar_on_head = match scheme {
        TaggingScheme::KTag => true,
        TaggingScheme::STag | TaggingScheme::STagExpRels => e1_is_head,
    };
    let (dollar, caret) = if dollar_on_head { (head, tail) } else { (tail, head) };

    let mut out = Vec::with_capacity(tokens.len() + 6);
    out.push(CLS.to_string());
    let mut dollar_span = (0, 0);
    let mut caret_span = (0, 0);
    for (i, tok) in tokens.iter().enumerate() {
        for (range, marker, slot) in [(dollar, DOLLAR, &mut dollar_span), (caret, CARET, &mut caret_span)] {
            if i == range.0 {
                out.push(marker.to_string());
                slot.0 = out.len();
            }
        }
        out.push(tok.text.clone());
        for (range, marker, slot) in [(dollar, DOLLAR, &mut dollar_span), (caret, CARET, &mut caret_span)] {
            if i == range.1 {
                slot.1 = out.len() - 1;
                out.push(marker.to_string());
            }
        }
    }
    out.push(SEP.to_string());
    Ok(TaggedSentence {
        sid: m.sid.to_string(),
        group: [m.head_cui.to_string(), m.tail_cui.to_string()],
        polarity: m.polarity,
        scheme,
        tokens: out,
        dollar_span,
        caret_span,
        e1_is_head,
    })
}

/// Direction-expanded relation vocabulary: every non-NA relation `r` becomes
/// `r(e1,e2)` and `r(e2,e1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedVocab {
    pub vocab: RelationVocab,
}

impl ExpandedVocab {
    /// Label for relation `r` given whether the first-appearing entity is the
    /// KB head.
    pub fn map(&self, r: RelId, e1_is_head: bool) -> RelId {
        if r == RelId::NA {
            return RelId::NA;
        }
        let base = 2 * r.0 - 1;
        RelId(if e1_is_head { base } else { base + 1 })
    }

    /// Inverse of [`ExpandedVocab::map`]; NA maps to `(NA, true)`.
    pub fn collapse(&self, expanded: RelId) -> (RelId, bool) {
        if expanded == RelId::NA {
            return (RelId::NA, true);
        }
        let r = expanded.0.div_ceil(2);
        (RelId(r), expanded.0 % 2 == 1)
    }
}

pub fn expand_relation_labels(vocab: &RelationVocab) -> ExpandedVocab {
    let mut names = Vec::with_capacity(2 * vocab.len());
    for r in vocab.relations() {
        let n = vocab.name(r);
        debug_assert_ne!(n, NA);
        names.push(format!("{n}(e1,e2)"));
        names.push(format!("{n}(e2,e1)"));
    }
    ExpandedVocab { vocab: RelationVocab::from_ordered(names) }
}

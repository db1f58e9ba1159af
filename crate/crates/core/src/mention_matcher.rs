//! Dictionary mention matching over normalized sentences.
//!
//! The index is a character trie over normalized surface forms. Scanning is
//! leftmost-longest, non-overlapping, and restricted to word boundaries: the
//! character before a match start and the character after a match end must
//! be non-alphanumeric or the string edge.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_ingest::RawSentence;
use crate::kb_store::{EntityId, EntitySet};
use crate::normalize::{fold_char, is_word_char};

const NO_OWNER: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    // sorted by char
    children: Vec<(char, u32)>,
    owners: u32,
}

impl Node {
    fn new() -> Self {
        Node { children: Vec::new(), owners: NO_OWNER }
    }

    #[inline]
    fn child(&self, c: char) -> Option<u32> {
        self.children.binary_search_by_key(&c, |&(k, _)| k).ok().map(|i| self.children[i].1)
    }
}

#[derive(Debug, Clone)]
pub struct MentionIndex {
    nodes: Vec<Node>,
    owner_sets: Vec<Vec<EntityId>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub entity: EntityId,
    /// Half-open character span `[start, end)` over Unicode scalar values.
    pub start: usize,
    pub end: usize,
    /// The matched slice of the sentence text.
    pub form: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    DuplicateEntity,
    InsufficientEntities,
}

impl MentionIndex {
    pub fn build(entities: &EntitySet) -> Self {
        let mut nodes = vec![Node::new()];
        let mut owners: BTreeMap<u32, BTreeSet<EntityId>> = BTreeMap::new();
        for (id, rec) in entities.iter() {
            for form in &rec.forms {
                let mut cur = 0u32;
                for c in form.chars().map(fold_char) {
                    let node = &nodes[cur as usize];
                    cur = match node.child(c) {
                        Some(next) => next,
                        None => {
                            let next = nodes.len() as u32;
                            nodes.push(Node::new());
                            let children = &mut nodes[cur as usize].children;
                            let pos = children.partition_point(|&(k, _)| k < c);
                            children.insert(pos, (c, next));
                            next
                        }
                    };
                }
                if cur != 0 {
                    owners.entry(cur).or_default().insert(id);
                }
            }
        }
        let mut owner_sets = Vec::with_capacity(owners.len());
        for (node, ids) in owners {
            nodes[node as usize].owners = owner_sets.len() as u32;
            owner_sets.push(ids.into_iter().collect());
        }
        MentionIndex { nodes, owner_sets }
    }

    /// Entity ids whose normalized form equals `form` exactly.
    pub fn lookup(&self, form: &str) -> &[EntityId] {
        let mut cur = 0u32;
        for c in form.chars().map(fold_char) {
            match self.nodes[cur as usize].child(c) {
                Some(next) => cur = next,
                None => return &[],
            }
        }
        match self.nodes[cur as usize].owners {
            NO_OWNER => &[],
            i => &self.owner_sets[i as usize],
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Leftmost-longest word-bounded matches, sorted by start offset. A form
    /// owned by several entities yields one mention per owner at that span.
    pub fn find_mentions(&self, text: &str) -> Vec<Mention> {
        let chars: Vec<char> = text.chars().collect();
        let n = chars.len();
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            if i > 0 && is_word_char(chars[i - 1]) {
                i += 1;
                continue;
            }
            let mut cur = 0u32;
            let mut best: Option<(usize, u32)> = None;
            let mut j = i;
            while j < n {
                match self.nodes[cur as usize].child(fold_char(chars[j])) {
                    Some(next) => cur = next,
                    None => break,
                }
                j += 1;
                let node = &self.nodes[cur as usize];
                if node.owners != NO_OWNER && (j == n || !is_word_char(chars[j])) {
                    best = Some((j, node.owners));
                }
            }
            match best {
                Some((end, owners)) => {
                    let form: String = chars[i..end].iter().collect();
                    for &entity in &self.owner_sets[owners as usize] {
                        out.push(Mention { entity, start: i, end, form: form.clone() });
                    }
                    i = end;
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Keeps a sentence only if every matched entity occurs once and at least two
/// distinct entities matched.
pub fn enforce_unique(mentions: &[Mention]) -> Verdict {
    let mut seen = BTreeSet::new();
    for m in mentions {
        if !seen.insert(m.entity) {
            return Verdict::DuplicateEntity;
        }
    }
    if seen.len() < 2 {
        Verdict::InsufficientEntities
    } else {
        Verdict::Keep
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchStats {
    pub sentences: usize,
    pub kept: usize,
    pub duplicate_entity: usize,
    pub insufficient_entities: usize,
    pub mentions: usize,
}

/// A kept sentence with its mentions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchedSentence {
    pub sid: String,
    pub text: String,
    pub mentions: Vec<Mention>,
}

/// Matches every sentence in parallel and applies [`enforce_unique`]; output
/// preserves input order.
pub fn match_corpus(index: &MentionIndex, sentences: &[RawSentence]) -> (Vec<MatchedSentence>, MatchStats) {
    let results: Vec<_> = sentences
        .par_iter()
        .map(|s| {
            let mentions = index.find_mentions(&s.text);
            let verdict = enforce_unique(&mentions);
            (verdict, mentions)
        })
        .collect();
    let mut stats = MatchStats { sentences: sentences.len(), ..Default::default() };
    let mut kept = Vec::new();
    for (s, (verdict, mentions)) in sentences.iter().zip(results) {
        match verdict {
            Verdict::DuplicateEntity => stats.duplicate_entity += 1,
            Verdict::InsufficientEntities => stats.insufficient_entities += 1,
            Verdict::Keep => {
                stats.kept += 1;
                stats.mentions += mentions.len();
                kept.push(MatchedSentence { sid: s.sid.clone(), text: s.text.clone(), mentions });
            }
        }
    }
    (kept, stats)
}

/// Line of the mentions file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MentionsRecord {
    pub sid: String,
    pub text: String,
    pub mentions: Vec<MentionRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MentionRecord {
    pub cui: String,
    pub start: usize,
    pub end: usize,
    pub form: String,
}

impl MatchedSentence {
    pub fn to_record(&self, entities: &EntitySet) -> MentionsRecord {
        MentionsRecord {
            sid: self.sid.clone(),
            text: self.text.clone(),
            mentions: self
                .mentions
                .iter()
                .map(|m| MentionRecord {
                    cui: entities.cui(m.entity).to_string(),
                    start: m.start,
                    end: m.end,
                    form: m.form.clone(),
                })
                .collect(),
        }
    }

    pub fn from_record(rec: MentionsRecord, entities: &EntitySet) -> crate::Result<Self> {
        let mentions = rec
            .mentions
            .into_iter()
            .map(|m| {
                let entity = entities.id(&m.cui).ok_or_else(|| crate::Error::UnknownEntity(m.cui.clone()))?;
                Ok(Mention { entity, start: m.start, end: m.end, form: m.form })
            })
            .collect::<crate::Result<_>>()?;
        Ok(MatchedSentence { sid: rec.sid, text: rec.text, mentions })
    }
}

//! Knowledge-base loading: entities with surface forms, fact triples, the
//! relation vocabulary and the ordered-group index.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::normalize::normalize_form;

pub const NA: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelId(pub u32);

impl RelId {
    pub const NA: RelId = RelId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Ordered `(head, tail)` pair.
pub type Group = (EntityId, EntityId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub cui: String,
    pub forms: Vec<String>,
}

impl EntityRecord {
    /// Normalizes and deduplicates forms, keeping first-seen order. Returns
    /// `None` if no nonempty form survives.
    pub fn new(cui: impl Into<String>, forms: impl IntoIterator<Item = impl AsRef<str>>) -> Option<Self> {
        let mut seen = BTreeSet::new();
        let forms: Vec<String> = forms
            .into_iter()
            .map(|f| normalize_form(f.as_ref()))
            .filter(|f| !f.is_empty() && seen.insert(f.clone()))
            .collect();
        if forms.is_empty() {
            return None;
        }
        Some(EntityRecord { cui: cui.into(), forms })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntitySet {
    records: Vec<EntityRecord>,
    by_cui: HashMap<String, EntityId>,
}

impl EntitySet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a record, or returns the existing id if the cui is known.
    pub fn insert(&mut self, record: EntityRecord) -> EntityId {
        if let Some(&id) = self.by_cui.get(&record.cui) {
            return id;
        }
        let id = EntityId(self.records.len() as u32);
        self.by_cui.insert(record.cui.clone(), id);
        self.records.push(record);
        id
    }

    pub fn id(&self, cui: &str) -> Option<EntityId> {
        self.by_cui.get(cui).copied()
    }

    pub fn get(&self, id: EntityId) -> &EntityRecord {
        &self.records[id.0 as usize]
    }

    pub fn cui(&self, id: EntityId) -> &str {
        &self.records[id.0 as usize].cui
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (EntityId, &EntityRecord)> {
        self.records.iter().enumerate().map(|(i, r)| (EntityId(i as u32), r))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Line {
            cui: String,
            forms: Vec<String>,
        }
        let mut set = EntitySet::new();
        for (i, line) in io::read_lines(path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |msg: String| Error::Malformed { path: path.to_path_buf(), line: i + 1, msg };
            let parsed: Line = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            if parsed.cui.is_empty() {
                return Err(malformed("empty cui".into()));
            }
            if set.id(&parsed.cui).is_some() {
                return Err(malformed(format!("duplicate cui `{}`", parsed.cui)));
            }
            let record = EntityRecord::new(parsed.cui.clone(), &parsed.forms)
                .ok_or_else(|| malformed(format!("entity `{}` has no nonempty forms", parsed.cui)))?;
            set.insert(record);
        }
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.records)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationVocab {
    names: Vec<String>,
}

impl RelationVocab {
    /// Builds a vocabulary with `NA` at index 0 followed by `names` sorted and
    /// deduplicated. Any `NA` in the input is ignored.
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = names.into_iter().map(Into::into).filter(|n| n != NA).collect();
        Self::from_ordered(set)
    }

    /// Keeps the given order; `NA` is prepended.
    pub fn from_ordered<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![NA.to_string()];
        all.extend(names.into_iter().map(Into::into).filter(|n| n != NA));
        RelationVocab { names: all }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self, id: RelId) -> &str {
        &self.names[id.index()]
    }

    pub fn id(&self, name: &str) -> Option<RelId> {
        self.names.iter().position(|n| n == name).map(|i| RelId(i as u32))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Non-NA relation ids.
    pub fn relations(&self) -> impl Iterator<Item = RelId> {
        (1..self.names.len()).map(|i| RelId(i as u32))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let vocab: RelationVocab = io::read_json(path)?;
        if vocab.names.first().map(String::as_str) != Some(NA) {
            return Err(Error::Config(format!("{}: relation vocabulary must start with NA", path.display())));
        }
        let unique: BTreeSet<_> = vocab.names.iter().collect();
        if unique.len() != vocab.names.len() {
            return Err(Error::Config(format!("{}: duplicate relation names", path.display())));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelId,
    pub tail: EntityId,
}

/// Relation-name predicate applied while loading triples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RelationFilter {
    #[default]
    All,
    Include(BTreeSet<String>),
    Exclude(BTreeSet<String>),
    /// Keep names whose category (text before the first `:`) is listed.
    Category(BTreeSet<String>),
}

impl RelationFilter {
    /// UMLS export convention: relation names written as `REL:RELA`, keep `RO`.
    pub fn ro() -> Self {
        RelationFilter::Category(["RO".to_string()].into())
    }

    pub fn accepts(&self, name: &str) -> bool {
        match self {
            RelationFilter::All => true,
            RelationFilter::Include(s) => s.contains(name),
            RelationFilter::Exclude(s) => !s.contains(name),
            RelationFilter::Category(s) => name.split_once(':').is_some_and(|(cat, _)| s.contains(cat)),
        }
    }
}

/// Deduplicated triples in `(head, rel, tail)` id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleStore {
    triples: Vec<Triple>,
}

impl TripleStore {
    pub fn from_triples(iter: impl IntoIterator<Item = Triple>) -> Self {
        let set: BTreeSet<Triple> = iter.into_iter().collect();
        TripleStore { triples: set.into_iter().collect() }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter()
    }

    pub fn write(&self, path: &Path, entities: &EntitySet, vocab: &RelationVocab) -> Result<()> {
        let mut rows: Vec<(&str, &str, &str)> =
            self.triples.iter().map(|t| (entities.cui(t.head), vocab.name(t.rel), entities.cui(t.tail))).collect();
        rows.sort_unstable();
        let mut text = String::new();
        for (h, r, t) in rows {
            let _ = writeln!(text, "{h}\t{r}\t{t}");
        }
        io::write_text(path, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    pub entities: EntitySet,
    pub triples: TripleStore,
    pub vocab: RelationVocab,
}

impl KnowledgeBase {
    /// Serialized form used for idempotence checks and the `kb` stage output.
    pub fn write(&self, entities_path: &Path, triples_path: &Path, vocab_path: &Path) -> Result<()> {
        self.entities.write(entities_path)?;
        self.triples.write(triples_path, &self.entities, &self.vocab)?;
        io::write_json(vocab_path, &self.vocab)
    }
}

/// Loads entities (JSON Lines) and triples (TSV), drops relations rejected by
/// `filter`, deduplicates, and builds the vocabulary from surviving names.
pub fn load_kb(triples_path: &Path, entities_path: &Path, filter: &RelationFilter) -> Result<KnowledgeBase> {
    let entities = EntitySet::load(entities_path)?;
    let lines = io::read_lines(triples_path)?;

    let mut raw = Vec::new();
    let mut unknown = BTreeSet::new();
    for (i, line) in lines.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::Malformed {
                path: triples_path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 3 nonempty tab-separated columns, got {}", cols.len()),
            });
        }
        let (h, r, t) = (cols[0], cols[1], cols[2]);
        if r == NA {
            return Err(Error::Malformed {
                path: triples_path.to_path_buf(),
                line: i + 1,
                msg: "relation name NA is reserved".into(),
            });
        }
        if !filter.accepts(r) {
            continue;
        }
        for cui in [h, t] {
            if entities.id(cui).is_none() {
                unknown.insert(cui.to_string());
            }
        }
        raw.push((h, r, t));
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownEntities(unknown.into_iter().collect()));
    }

    let vocab = RelationVocab::new(raw.iter().map(|&(_, r, _)| r));
    let rel_ids: HashMap<&str, RelId> =
        vocab.names().iter().enumerate().map(|(i, n)| (n.as_str(), RelId(i as u32))).collect();
    let triples = TripleStore::from_triples(raw.iter().map(|&(h, r, t)| Triple {
        head: entities.id(h).expect("checked above"),
        rel: rel_ids[r],
        tail: entities.id(t).expect("checked above"),
    }));
    Ok(KnowledgeBase { entities, triples, vocab })
}

/// Positive groups with their relation sets, plus negative groups added by
/// the linker. The two sets are kept disjoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroupIndex {
    positives: BTreeMap<Group, BTreeSet<RelId>>,
    negatives: BTreeSet<Group>,
}

impl GroupIndex {
    pub fn relations(&self, group: &Group) -> Option<&BTreeSet<RelId>> {
        self.positives.get(group)
    }

    pub fn is_positive(&self, group: &Group) -> bool {
        self.positives.contains_key(group)
    }

    pub fn is_negative(&self, group: &Group) -> bool {
        self.negatives.contains(group)
    }

    pub fn positives(&self) -> impl Iterator<Item = (&Group, &BTreeSet<RelId>)> {
        self.positives.iter()
    }

    pub fn negatives(&self) -> impl Iterator<Item = &Group> {
        self.negatives.iter()
    }

    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }

    pub fn num_negative(&self) -> usize {
        self.negatives.len()
    }

    /// Records a negative group. Returns `false` (and records nothing) if the
    /// group is positive.
    pub fn add_negative(&mut self, group: Group) -> bool {
        if self.is_positive(&group) {
            return false;
        }
        self.negatives.insert(group);
        true
    }

    /// Total relation memberships across groups.
    pub fn num_memberships(&self) -> usize {
        self.positives.values().map(BTreeSet::len).sum()
    }
}

pub fn build_group_index(store: &TripleStore) -> GroupIndex {
    let mut positives: BTreeMap<Group, BTreeSet<RelId>> = BTreeMap::new();
    for t in store.iter() {
        positives.entry((t.head, t.tail)).or_default().insert(t.rel);
    }
    GroupIndex { positives, negatives: BTreeSet::new() }
}

/// Cartesian product of head forms and tail forms for one ordered group.
pub fn textual_pairs(group: Group, entities: &EntitySet) -> Result<Vec<(String, String)>> {
    let (h, t) = group;
    if h == t {
        return Err(Error::SelfPair(entities.cui(h).to_string()));
    }
    let head = entities.get(h);
    let tail = entities.get(t);
    for rec in [head, tail] {
        if rec.forms.is_empty() {
            return Err(Error::NoForms(rec.cui.clone()));
        }
    }
    Ok(head.forms.iter().flat_map(|hf| tail.forms.iter().map(move |tf| (hf.clone(), tf.clone()))).collect())
}

//! Bag composition and leakage-free dataset splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_linker::Polarity;
use crate::kb_store::{RelId, RelationVocab};
use crate::rng::{self, Rng};
use crate::tagging::{expand_relation_labels, TaggedSentence, TaggingScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    Uniform,
    Mix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bag {
    pub group: [String; 2],
    pub label: u32,
    pub composition: Composition,
    pub sentences: Vec<TaggedSentence>,
}

impl Bag {
    pub fn label(&self) -> RelId {
        RelId(self.label)
    }
}

/// One `(group, label)` training instance with its full sentence pool. Under
/// uniform s-tag bagging a group is further split by surface orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub group: [String; 2],
    /// Label in the active (possibly direction-expanded) vocabulary.
    pub label: RelId,
    /// Relation name in the base vocabulary; the split unit is
    /// `(head, relation, tail)`.
    pub relation: String,
    /// `Some(e1_is_head)` when the pool was partitioned by orientation.
    pub orientation: Option<bool>,
    pub pool: Vec<TaggedSentence>,
}

impl Instance {
    pub fn triple(&self) -> (String, String, String) {
        (self.group[0].clone(), self.relation.clone(), self.group[1].clone())
    }

    pub fn rng_key(&self) -> String {
        let o = match self.orientation {
            None => "-",
            Some(true) => "e1h",
            Some(false) => "e1t",
        };
        format!("bag|{}|{}|{}|{}", self.group[0], self.relation, self.group[1], o)
    }

    fn composition(&self) -> Composition {
        let first = self.pool[0].dollar_is_head();
        if self.pool.iter().all(|s| s.dollar_is_head() == first) {
            Composition::Uniform
        } else {
            Composition::Mix
        }
    }

    pub fn compose(&self, bag_size: usize, seed: u64) -> Result<Bag> {
        let mut rng = rng::stream(seed, &self.rng_key());
        let sentences = compose_bag(&self.pool, bag_size, &mut rng)?;
        Ok(Bag { group: self.group.clone(), label: self.label.0, composition: self.composition(), sentences })
    }
}

/// Samples exactly `bag_size` sentences: without replacement when the pool is
/// larger, every sentence once when equal, and every sentence at least once
/// plus uniform draws with replacement when smaller.
pub fn compose_bag<T: Clone>(pool: &[T], bag_size: usize, rng: &mut Rng) -> Result<Vec<T>> {
    if pool.is_empty() {
        return Err(Error::EmptyBag);
    }
    if bag_size == 0 {
        return Err(Error::Config("bag_size must be >= 1".into()));
    }
    let n = pool.len();
    let out = if n > bag_size {
        let mut idx = sample(rng, n, bag_size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    } else {
        let mut out = pool.to_vec();
        for _ in n..bag_size {
            out.push(pool[rng.gen_range(0..n)].clone());
        }
        out
    };
    Ok(out)
}

/// Relation labels for positive groups, keyed by `[head, tail]` cuis.
pub type GroupRelations = BTreeMap<[String; 2], BTreeSet<String>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BagConfig {
    pub bag_size: usize,
    /// Partition s-tag pools by orientation so each bag is uniform.
    pub uniform: bool,
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig { bag_size: 16, uniform: true }
    }
}

/// Active label vocabulary for a scheme.
pub fn label_vocab(base: &RelationVocab, scheme: TaggingScheme) -> RelationVocab {
    if scheme.expands_relations() {
        expand_relation_labels(base).vocab
    } else {
        base.clone()
    }
}

/// Groups tagged sentences into instances. Positive groups get one instance
/// per relation in `relations` that is present in `base`; negative groups get
/// one NA instance.
pub fn build_instances(
    tagged: &[TaggedSentence],
    relations: &GroupRelations,
    base: &RelationVocab,
    scheme: TaggingScheme,
    config: &BagConfig,
) -> Vec<Instance> {
    let expanded = expand_relation_labels(base);
    let mut pools: BTreeMap<([String; 2], Polarity), Vec<TaggedSentence>> = BTreeMap::new();
    for t in tagged {
        pools.entry((t.group.clone(), t.polarity)).or_default().push(t.clone());
    }
    let partition = scheme.expands_relations() || (scheme == TaggingScheme::STag && config.uniform);

    let mut out = Vec::new();
    for ((group, polarity), mut pool) in pools {
        pool.sort_by(|a, b| a.sid.cmp(&b.sid));
        let labels: Vec<RelId> = match polarity {
            Polarity::Negative => vec![RelId::NA],
            Polarity::Positive => {
                relations.get(&group).into_iter().flatten().filter_map(|name| base.id(name)).collect()
            }
        };
        let parts: Vec<(Option<bool>, Vec<TaggedSentence>)> = if partition {
            [true, false]
                .into_iter()
                .map(|o| (Some(o), pool.iter().filter(|s| s.e1_is_head == o).cloned().collect::<Vec<_>>()))
                .filter(|(_, p)| !p.is_empty())
                .collect()
        } else {
            vec![(None, pool)]
        };
        for r in labels {
            for (orientation, part) in &parts {
                let label = match (scheme.expands_relations(), orientation) {
                    (true, Some(o)) => expanded.map(r, *o),
                    _ => r,
                };
                out.push(Instance {
                    group: group.clone(),
                    label,
                    relation: base.name(r).to_string(),
                    orientation: *orientation,
                    pool: part.clone(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitFractions {
    pub test: f64,
    pub valid_of_remainder: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { test: 0.20, valid_of_remainder: 0.10 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("test", self.test), ("valid_of_remainder", self.valid_of_remainder)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("fraction `{name}` = {v} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// `(train, valid, test)` triple counts for `n` triples.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let test = (self.test * n as f64).round() as usize;
        let valid = (self.valid_of_remainder * (n - test) as f64).round() as usize;
        (n - test - valid, valid, test)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub triples: usize,
    pub triples_without_na: usize,
    pub groups: usize,
    pub bags: usize,
    pub sentences_sampled: usize,
    pub dropped_by_overlap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub bag_size: usize,
    pub scheme: TaggingScheme,
    pub counts: BTreeMap<String, SplitCounts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Bag>,
    pub valid: Vec<Bag>,
    pub test: Vec<Bag>,
    pub manifest: Manifest,
}

fn counts(bags: &[Bag], triples: &BTreeSet<(String, String, String)>, dropped: usize) -> SplitCounts {
    SplitCounts {
        triples: triples.len(),
        triples_without_na: triples.iter().filter(|t| t.1 != crate::kb_store::NA).count(),
        groups: bags.iter().map(|b| &b.group).collect::<BTreeSet<_>>().len(),
        bags: bags.len(),
        sentences_sampled: bags.iter().map(|b| b.sentences.len()).sum(),
        dropped_by_overlap: dropped,
    }
}

/// Assigns triples to train/valid/test, composes bags, and prunes held-out
/// pools of any sentence that appears in a training bag. Held-out instances
/// left empty are dropped.
pub fn split_dataset(
    instances: &[Instance],
    fractions: SplitFractions,
    bag_size: usize,
    scheme: TaggingScheme,
    seed: u64,
) -> Result<DatasetSplits> {
    fractions.validate()?;
    let mut triples: Vec<(String, String, String)> =
        instances.iter().map(Instance::triple).collect::<BTreeSet<_>>().into_iter().collect();
    triples.shuffle(&mut rng::stream(seed, "split"));
    let (n_train, n_valid, _) = fractions.counts(triples.len());
    let mut assign: BTreeMap<(String, String, String), usize> = BTreeMap::new();
    for (i, t) in triples.into_iter().enumerate() {
        let split = if i < n_train {
            0
        } else if i < n_train + n_valid {
            1
        } else {
            2
        };
        assign.insert(t, split);
    }

    let mut train = Vec::new();
    let mut train_triples = BTreeSet::new();
    for inst in instances.iter().filter(|i| assign[&i.triple()] == 0) {
        train.push(inst.compose(bag_size, seed)?);
        train_triples.insert(inst.triple());
    }
    let train_sids: HashSet<&str> = train.iter().flat_map(|b| b.sentences.iter().map(|s| s.sid.as_str())).collect();

    let mut held = [Vec::new(), Vec::new()];
    let mut held_triples = [BTreeSet::new(), BTreeSet::new()];
    let mut dropped = [0usize; 2];
    for inst in instances {
        let split = assign[&inst.triple()];
        if split == 0 {
            continue;
        }
        let k = split - 1;
        let pool: Vec<TaggedSentence> =
            inst.pool.iter().filter(|s| !train_sids.contains(s.sid.as_str())).cloned().collect();
        if pool.is_empty() {
            dropped[k] += 1;
            continue;
        }
        let pruned = Instance { pool, ..inst.clone() };
        held[k].push(pruned.compose(bag_size, seed)?);
        held_triples[k].insert(inst.triple());
    }
    let [valid, test] = held;

    let mut c = BTreeMap::new();
    c.insert("train".to_string(), counts(&train, &train_triples, 0));
    c.insert("valid".to_string(), counts(&valid, &held_triples[0], dropped[0]));
    c.insert("test".to_string(), counts(&test, &held_triples[1], dropped[1]));
    Ok(DatasetSplits { train, valid, test, manifest: Manifest { seed, fractions, bag_size, scheme, counts: c } })
}

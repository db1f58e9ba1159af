//! Sentence-to-group linking, open-world negative sampling and dataset-level
//! group constraints.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb_store::{EntitySet, Group, GroupIndex, RelId, RelationVocab};
use crate::mention_matcher::{MatchedSentence, Mention};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "pos")]
    Positive,
    #[serde(rename = "neg")]
    Negative,
}

/// Half-open character span.
pub type CharSpan = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SentenceGroupMatch {
    pub sid: String,
    pub group: Group,
    pub polarity: Polarity,
    pub head_span: CharSpan,
    pub tail_span: CharSpan,
}

fn overlaps(a: CharSpan, b: CharSpan) -> bool {
    a.0 < b.1 && b.0 < a.1
}

fn span(m: &Mention) -> CharSpan {
    (m.start, m.end)
}

/// Every ordered pair of distinct, non-overlapping mentions whose group is
/// positive in the KB.
pub fn link_positives(sentence: &MatchedSentence, index: &GroupIndex) -> Vec<SentenceGroupMatch> {
    let ms = &sentence.mentions;
    let mut out = Vec::new();
    for a in ms {
        for b in ms {
            if a.entity == b.entity || overlaps(span(a), span(b)) {
                continue;
            }
            let group = (a.entity, b.entity);
            if index.is_positive(&group) {
                out.push(SentenceGroupMatch {
                    sid: sentence.sid.clone(),
                    group,
                    polarity: Polarity::Positive,
                    head_span: span(a),
                    tail_span: span(b),
                });
            }
        }
    }
    out
}

/// Replaces the head (coin heads) or tail of `positive` with another entity
/// mentioned in the same sentence such that the new ordered group is neither
/// positive nor already emitted for this sentence.
pub fn sample_negative(
    positive: &SentenceGroupMatch,
    mentions: &[Mention],
    index: &GroupIndex,
    emitted: &mut BTreeSet<Group>,
    rng: &mut Rng,
) -> Option<SentenceGroupMatch> {
    let (h, t) = positive.group;
    let replace_head = rng.gen_bool(0.5);
    let kept_span = if replace_head { positive.tail_span } else { positive.head_span };
    let candidates: Vec<(Group, CharSpan)> = mentions
        .iter()
        .filter(|m| m.entity != h && m.entity != t && !overlaps(span(m), kept_span))
        .map(|m| {
            let g = if replace_head { (m.entity, t) } else { (h, m.entity) };
            (g, span(m))
        })
        .filter(|(g, _)| !index.is_positive(g) && !emitted.contains(g))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let (group, new_span) = candidates[rng.gen_range(0..candidates.len())];
    emitted.insert(group);
    let (head_span, tail_span) =
        if replace_head { (new_span, positive.tail_span) } else { (positive.head_span, new_span) };
    Some(SentenceGroupMatch { sid: positive.sid.clone(), group, polarity: Polarity::Negative, head_span, tail_span })
}

/// Positives followed by sampled negatives for one sentence, using a random
/// stream keyed by `(seed, sid)`.
pub fn link_sentence(sentence: &MatchedSentence, index: &GroupIndex, seed: u64) -> Vec<SentenceGroupMatch> {
    let positives = link_positives(sentence, index);
    let mut rng = rng::stream(seed, &sentence.sid);
    let mut emitted = BTreeSet::new();
    let negatives: Vec<_> = positives
        .iter()
        .filter_map(|p| sample_negative(p, &sentence.mentions, index, &mut emitted, &mut rng))
        .collect();
    let mut out = positives;
    out.extend(negatives);
    out
}

pub fn link_corpus(sentences: &[MatchedSentence], index: &GroupIndex, seed: u64) -> Vec<SentenceGroupMatch> {
    sentences.par_iter().map(|s| link_sentence(s, index, seed)).collect::<Vec<_>>().into_iter().flatten().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkerConfig {
    pub min_group: usize,
    pub max_group: usize,
    pub neg_to_pos_ratio: f64,
}

impl Default for LinkerConfig {
    fn default() -> Self {
        LinkerConfig { min_group: 10, max_group: 1500, neg_to_pos_ratio: 0.7 }
    }
}

impl LinkerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_group > self.max_group {
            return Err(Error::Config(format!("min_group ({}) > max_group ({})", self.min_group, self.max_group)));
        }
        if !(self.neg_to_pos_ratio >= 0.0 && self.neg_to_pos_ratio.is_finite()) {
            return Err(Error::Config("neg_to_pos_ratio must be finite and >= 0".into()));
        }
        Ok(())
    }
}

pub fn requested_negatives(positive_groups: usize, ratio: f64) -> usize {
    (ratio * positive_groups as f64).round() as usize
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSummary {
    /// Surviving non-NA relation types.
    pub relations: usize,
    pub positive_groups: usize,
    pub negative_groups: usize,
    pub negatives_requested: usize,
    pub negatives_available: usize,
    pub dropped_relations: Vec<String>,
    pub positive_matches: usize,
    pub negative_matches: usize,
}

#[derive(Debug, Clone)]
pub struct ConstraintOutcome {
    pub matches: Vec<SentenceGroupMatch>,
    pub kept_relations: BTreeSet<RelId>,
    pub summary: LinkSummary,
}

/// Drops relations supported by too few or too many positive groups, drops
/// groups with no surviving relation, then downsamples negative groups to
/// `ratio × |positive groups|`. Negatives whose sentence no longer supports
/// any positive are dropped first.
pub fn apply_constraints(
    matches: Vec<SentenceGroupMatch>,
    index: &GroupIndex,
    vocab: &RelationVocab,
    config: &LinkerConfig,
    rng: &mut Rng,
) -> Result<ConstraintOutcome> {
    config.validate()?;

    let pos_groups: BTreeSet<Group> =
        matches.iter().filter(|m| m.polarity == Polarity::Positive).map(|m| m.group).collect();
    let mut support: BTreeMap<RelId, usize> = BTreeMap::new();
    for g in &pos_groups {
        for &r in index.relations(g).into_iter().flatten() {
            *support.entry(r).or_default() += 1;
        }
    }
    let kept_relations: BTreeSet<RelId> =
        support.iter().filter(|(_, &n)| (config.min_group..=config.max_group).contains(&n)).map(|(&r, _)| r).collect();
    let dropped_relations =
        vocab.relations().filter(|r| !kept_relations.contains(r)).map(|r| vocab.name(r).to_string()).collect();
    let surviving: BTreeSet<Group> = pos_groups
        .into_iter()
        .filter(|g| index.relations(g).is_some_and(|rs| rs.iter().any(|r| kept_relations.contains(r))))
        .collect();

    let positive_sids: HashSet<&str> = matches
        .iter()
        .filter(|m| m.polarity == Polarity::Positive && surviving.contains(&m.group))
        .map(|m| m.sid.as_str())
        .collect();
    let neg_groups: Vec<Group> = matches
        .iter()
        .filter(|m| m.polarity == Polarity::Negative && positive_sids.contains(m.sid.as_str()))
        .map(|m| m.group)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let requested = requested_negatives(surviving.len(), config.neg_to_pos_ratio);
    let chosen: BTreeSet<Group> = if neg_groups.len() > requested {
        let mut picks = sample(rng, neg_groups.len(), requested).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| neg_groups[i]).collect()
    } else {
        neg_groups.iter().copied().collect()
    };

    let keep = |m: &SentenceGroupMatch| match m.polarity {
        Polarity::Positive => surviving.contains(&m.group),
        Polarity::Negative => chosen.contains(&m.group) && positive_sids.contains(m.sid.as_str()),
    };
    let kept: Vec<bool> = matches.iter().map(keep).collect();
    let matches: Vec<SentenceGroupMatch> = matches.into_iter().zip(kept).filter_map(|(m, k)| k.then_some(m)).collect();

    let summary = LinkSummary {
        relations: kept_relations.len(),
        positive_groups: surviving.len(),
        negative_groups: chosen.len(),
        negatives_requested: requested,
        negatives_available: neg_groups.len(),
        dropped_relations,
        positive_matches: matches.iter().filter(|m| m.polarity == Polarity::Positive).count(),
        negative_matches: matches.iter().filter(|m| m.polarity == Polarity::Negative).count(),
    };
    Ok(ConstraintOutcome { matches, kept_relations, summary })
}

/// Line of the matches file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchRecord {
    pub sid: String,
    pub head_cui: String,
    pub tail_cui: String,
    pub polarity: Polarity,
    pub head_span: [usize; 2],
    pub tail_span: [usize; 2],
}

impl SentenceGroupMatch {
    pub fn to_record(&self, entities: &EntitySet) -> MatchRecord {
        MatchRecord {
            sid: self.sid.clone(),
            head_cui: entities.cui(self.group.0).to_string(),
            tail_cui: entities.cui(self.group.1).to_string(),
            polarity: self.polarity,
            head_span: [self.head_span.0, self.head_span.1],
            tail_span: [self.tail_span.0, self.tail_span.1],
        }
    }

    pub fn from_record(rec: &MatchRecord, entities: &EntitySet) -> Result<Self> {
        let id = |cui: &str| entities.id(cui).ok_or_else(|| Error::UnknownEntity(cui.to_string()));
        Ok(SentenceGroupMatch {
            sid: rec.sid.clone(),
            group: (id(&rec.head_cui)?, id(&rec.tail_cui)?),
            polarity: rec.polarity,
            head_span: (rec.head_span[0], rec.head_span[1]),
            tail_span: (rec.tail_span[0], rec.tail_span[1]),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb_store::{build_group_index, EntityId, Triple, TripleStore};

    const A: EntityId = EntityId(0);
    const B: EntityId = EntityId(1);
    const E: EntityId = EntityId(2);

    fn mention(entity: EntityId, start: usize) -> Mention {
        Mention { entity, start, end: start + 3, form: "xxx".into() }
    }

    fn sentence(ids: &[EntityId]) -> MatchedSentence {
        MatchedSentence {
            sid: "s1".into(),
            text: String::new(),
            mentions: ids.iter().enumerate().map(|(i, &e)| mention(e, i * 10)).collect(),
        }
    }

    fn index(triples: &[(EntityId, EntityId)]) -> GroupIndex {
        build_group_index(&TripleStore::from_triples(triples.iter().map(|&(h, t)| Triple {
            head: h,
            rel: RelId(1),
            tail: t,
        })))
    }

    #[test]
    fn single_positive_pair() {
        let idx = index(&[(A, B)]);
        let ms = link_positives(&sentence(&[A, B]), &idx);
        assert_eq!(ms.len(), 1);
        assert_eq!(ms[0].group, (A, B));
        assert_eq!(ms[0].head_span, (0, 3));
    }

    #[test]
    fn all_permutations_examined() {
        let all: Vec<_> = [A, B, E]
            .iter()
            .flat_map(|&x| [A, B, E].into_iter().filter(move |&y| y != x).map(move |y| (x, y)))
            .collect();
        assert_eq!(all.len(), 6);
        let ms = link_positives(&sentence(&[A, B, E]), &index(&all));
        assert_eq!(ms.len(), 6);
        assert!(link_positives(&sentence(&[A, B]), &index(&[(A, E)])).is_empty());
    }

    #[test]
    fn no_novel_entity_no_negative() {
        let idx = index(&[(A, B)]);
        let s = sentence(&[A, B]);
        let pos = &link_positives(&s, &idx)[0];
        let mut rng = rng::seeded(0);
        assert!(sample_negative(pos, &s.mentions, &idx, &mut BTreeSet::new(), &mut rng).is_none());
    }

    #[test]
    fn negative_replaces_chosen_side() {
        let idx = index(&[(A, B)]);
        let s = sentence(&[A, B, E]);
        let pos = &link_positives(&s, &idx)[0];
        let mut seen_head = false;
        let mut seen_tail = false;
        for seed in 0..64 {
            let mut rng = rng::seeded(seed);
            let neg = sample_negative(pos, &s.mentions, &idx, &mut BTreeSet::new(), &mut rng).unwrap();
            assert_eq!(neg.polarity, Polarity::Negative);
            match neg.group {
                (E, B) => {
                    seen_head = true;
                    assert_eq!(neg.head_span, (20, 23));
                    assert_eq!(neg.tail_span, pos.tail_span);
                }
                (A, E) => {
                    seen_tail = true;
                    assert_eq!(neg.tail_span, (20, 23));
                }
                g => panic!("unexpected group {g:?}"),
            }
        }
        assert!(seen_head && seen_tail);
    }

    #[test]
    fn open_world_blocks_known_groups() {
        let idx = index(&[(A, B), (E, B), (A, E)]);
        let s = sentence(&[A, B, E]);
        let pos = link_positives(&s, &idx).into_iter().find(|m| m.group == (A, B)).unwrap();
        for seed in 0..32 {
            let mut rng = rng::seeded(seed);
            assert!(sample_negative(&pos, &s.mentions, &idx, &mut BTreeSet::new(), &mut rng).is_none());
        }
    }

    fn matches_for(groups: &[(u32, u32, Polarity, &str)]) -> Vec<SentenceGroupMatch> {
        groups
            .iter()
            .map(|&(h, t, p, sid)| SentenceGroupMatch {
                sid: sid.into(),
                group: (EntityId(h), EntityId(t)),
                polarity: p,
                head_span: (0, 1),
                tail_span: (2, 3),
            })
            .collect()
    }

    #[test]
    fn relation_support_bounds() {
        // relation 1 supported by 9 groups, 2 by 10, 3 by 1501
        let mut triples = Vec::new();
        let mut ms = Vec::new();
        let mut next = 0u32;
        for (rel, n) in [(1u32, 9usize), (2, 10), (3, 1501)] {
            for _ in 0..n {
                let (h, t) = (EntityId(next), EntityId(next + 1));
                next += 2;
                triples.push(Triple { head: h, rel: RelId(rel), tail: t });
                ms.extend(matches_for(&[(h.0, t.0, Polarity::Positive, "s")]));
            }
        }
        let idx = build_group_index(&TripleStore::from_triples(triples));
        let vocab = RelationVocab::new(["r1", "r2", "r3"]);
        let out = apply_constraints(ms, &idx, &vocab, &LinkerConfig::default(), &mut rng::seeded(1)).unwrap();
        assert_eq!(out.kept_relations, [RelId(2)].into());
        assert_eq!(out.summary.positive_groups, 10);
        assert_eq!(out.summary.dropped_relations, vec!["r1", "r3"]);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = LinkerConfig { min_group: 5, max_group: 4, ..Default::default() };
        let out =
            apply_constraints(vec![], &GroupIndex::default(), &RelationVocab::new(["r"]), &cfg, &mut rng::seeded(0));
        assert!(matches!(out, Err(Error::Config(_))));
    }

    #[test]
    fn ratio_rounding() {
        assert_eq!(requested_negatives(92_070, 0.7), 64_449);
        assert_eq!(requested_negatives(10, 0.7), 7);
    }

    #[test]
    fn negatives_downsampled_and_tied_to_positive_sids() {
        let idx = index(&[(A, B)]);
        let mut ms = matches_for(&[(0, 1, Polarity::Positive, "s1")]);
        for e in 3..10 {
            ms.extend(matches_for(&[(e, 1, Polarity::Negative, "s1")]));
        }
        ms.extend(matches_for(&[(20, 21, Polarity::Negative, "orphan")]));
        let cfg = LinkerConfig { min_group: 1, max_group: 10, neg_to_pos_ratio: 2.0 };
        let vocab = RelationVocab::new(["r"]);
        let out = apply_constraints(ms, &idx, &vocab, &cfg, &mut rng::seeded(3)).unwrap();
        assert_eq!(out.summary.negatives_available, 7);
        assert_eq!(out.summary.negative_groups, 2);
        assert!(out.matches.iter().all(|m| m.sid == "s1"));
    }
}

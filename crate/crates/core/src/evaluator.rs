//! Candidate-triple ranking and PR / AUC / F1 / P@k.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bag_builder::Bag;
use crate::error::{Error, Result};
use crate::io;
use crate::kb_store::{RelId, RelationVocab};
use crate::tagging::{expand_relation_labels, TaggingScheme};

pub const DEFAULT_KS: [usize; 6] = [100, 200, 300, 2000, 4000, 6000];

pub type TripleKey = (String, String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub head: String,
    pub rel: String,
    pub tail: String,
    pub score: f64,
}

impl Candidate {
    pub fn key(&self) -> TripleKey {
        (self.head.clone(), self.rel.clone(), self.tail.clone())
    }
}

/// One candidate per distinct group and non-NA relation.
pub fn build_candidates(groups: &[[String; 2]], vocab: &RelationVocab) -> Result<Vec<TripleKey>> {
    let distinct: BTreeSet<&[String; 2]> = groups.iter().collect();
    if distinct.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let mut out = Vec::with_capacity(distinct.len() * vocab.len().saturating_sub(1));
    for [h, t] in distinct {
        for r in vocab.relations().filter(|&r| r != RelId::NA) {
            out.push((h.clone(), vocab.name(r).to_string(), t.clone()));
        }
    }
    Ok(out)
}

/// Model output for one test bag.
#[derive(Debug, Clone, PartialEq)]
pub struct BagScores {
    pub group: [String; 2],
    /// Surface orientation of the bag, used to pick the directional class
    /// under relation expansion.
    pub e1_is_head: bool,
    pub probs: Vec<f64>,
}

/// Scores every candidate of the test groups with the mean probability of
/// its relation over the group's bags. Under relation expansion each bag
/// contributes the probability of its orientation's subclass.
pub fn score_candidates(bags: &[BagScores], base: &RelationVocab, scheme: TaggingScheme) -> Result<Vec<Candidate>> {
    let groups: Vec<[String; 2]> = bags.iter().map(|b| b.group.clone()).collect();
    let keys = build_candidates(&groups, base)?;
    let expanded = scheme.expands_relations().then(|| expand_relation_labels(base));
    let mut by_group: BTreeMap<&[String; 2], Vec<&BagScores>> = BTreeMap::new();
    for b in bags {
        by_group.entry(&b.group).or_default().push(b);
    }
    let mut out = Vec::with_capacity(keys.len());
    for (h, rel, t) in keys {
        let r = base.id(&rel).expect("candidate relation from vocab");
        let members = &by_group[&[h.clone(), t.clone()]];
        let sum: f64 = members
            .iter()
            .map(|b| {
                let idx = match &expanded {
                    Some(e) => e.map(r, b.e1_is_head),
                    None => r,
                };
                b.probs[idx.index()]
            })
            .sum();
        out.push(Candidate { head: h, rel, tail: t, score: sum / members.len() as f64 });
    }
    Ok(out)
}

/// Gold triples of held-out bags, with expanded labels collapsed to the
/// base relation.
pub fn gold_triples(bags: &[Bag], base: &RelationVocab, scheme: TaggingScheme) -> BTreeSet<TripleKey> {
    let expanded = scheme.expands_relations().then(|| expand_relation_labels(base));
    bags.iter()
        .filter(|b| b.label() != RelId::NA)
        .map(|b| {
            let r = match &expanded {
                Some(e) => e.collapse(b.label()).0,
                None => b.label(),
            };
            (b.group[0].clone(), base.name(r).to_string(), b.group[1].clone())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionAtK {
    pub k: usize,
    pub precision: f64,
    /// `k` exceeded the candidate count; precision is over all candidates.
    pub truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub candidates: usize,
    pub gold: usize,
    pub gold_retrieved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub max_f1: f64,
    pub p_at_k: Vec<PrecisionAtK>,
    pub counts: EvalCounts,
    pub pr: Vec<PrPoint>,
}

/// Descending score, ties broken by ascending `(head, rel, tail)`.
pub fn rank(candidates: &[Candidate]) -> Vec<&Candidate> {
    let mut order: Vec<&Candidate> = candidates.iter().collect();
    order.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| (&a.head, &a.rel, &a.tail).cmp(&(&b.head, &b.rel, &b.tail)))
    });
    order
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Ranks candidates globally and scores them against `gold`. AUC is average
/// precision; F1 is the maximum over the PR curve.
pub fn evaluate(candidates: &[Candidate], gold: &BTreeSet<TripleKey>, ks: &[usize]) -> Result<EvalReport> {
    if candidates.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let groups: BTreeSet<(&str, &str)> = candidates.iter().map(|c| (c.head.as_str(), c.tail.as_str())).collect();
    if let Some((h, r, t)) = gold.iter().find(|(h, _, t)| !groups.contains(&(h.as_str(), t.as_str()))) {
        return Err(Error::GoldWithoutGroup(h.clone(), r.clone(), t.clone()));
    }
    let ranked = rank(candidates);
    let n_gold = gold.len();
    let mut pr = Vec::with_capacity(ranked.len());
    let mut hits_at = Vec::with_capacity(ranked.len());
    let (mut hits, mut ap_sum, mut max_f1) = (0usize, 0.0, 0.0f64);
    for (i, c) in ranked.iter().enumerate() {
        let rank = i + 1;
        let is_gold = gold.contains(&c.key());
        if is_gold {
            hits += 1;
        }
        let precision = hits as f64 / rank as f64;
        let recall = if n_gold == 0 { 0.0 } else { hits as f64 / n_gold as f64 };
        if is_gold {
            ap_sum += precision;
        }
        max_f1 = max_f1.max(f1(precision, recall));
        hits_at.push(hits);
        pr.push(PrPoint { rank, precision, recall });
    }
    let p_at_k = ks
        .iter()
        .map(|&k| {
            let n = k.min(ranked.len());
            PrecisionAtK { k, precision: hits_at[n - 1] as f64 / n as f64, truncated: k > ranked.len() }
        })
        .collect();
    Ok(EvalReport {
        auc: if n_gold == 0 { 0.0 } else { ap_sum / n_gold as f64 },
        max_f1,
        p_at_k,
        counts: EvalCounts { candidates: ranked.len(), gold: n_gold, gold_retrieved: hits },
        pr,
    })
}

/// `head ⇥ relation ⇥ tail ⇥ score` in rank order.
pub fn write_predictions(path: &Path, candidates: &[Candidate]) -> Result<()> {
    let mut out = String::new();
    for c in rank(candidates) {
        writeln!(out, "{}\t{}\t{}\t{}", c.head, c.rel, c.tail, c.score).unwrap();
    }
    io::write_text(path, &out)
}

pub fn write_pr_curve(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("rank,precision,recall\n");
    for p in &report.pr {
        writeln!(out, "{},{},{}", p.rank, p.precision, p.recall).unwrap();
    }
    io::write_text(path, &out)
}

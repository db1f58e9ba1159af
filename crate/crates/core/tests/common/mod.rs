//! Shared helpers for the integration tests: independent oracles, random
//! instance generators and small pipeline runners.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bagforge::bag_builder::Bag;
use bagforge::evaluator::{self, Candidate, TripleKey};
use bagforge::group_linker::{apply_constraints, LinkSummary, LinkerConfig, MatchRecord, Polarity, SentenceGroupMatch};
use bagforge::io;
use bagforge::kb_store::{
    build_group_index, EntityId, EntityRecord, EntitySet, RelId, RelationVocab, Triple, TripleStore,
};
use bagforge::mention_matcher::MentionIndex;
use bagforge::mil_model::{
    aggregate, probs_from_reps, Aggregation, Dims, EmbeddingArchive, EncodedBag, Encoding, ModelParams, TokenVocab,
};
use bagforge::normalize::{fold_char, is_word_char, normalize_form};
use bagforge::pipeline::{Pipeline, PipelineConfig, Stage};
use bagforge::rng::{self, Rng};
use bagforge::synthgen::{SynthConfig, SynthPaths};
use bagforge::tagging::{expand_relation_labels, TaggedSentence};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde_json::Value;

// ---------------------------------------------------------------------------
// Matcher oracle

/// Leftmost-longest, word-bounded, non-overlapping scan by direct comparison
/// against every dictionary form. Returns `(entity index, start, end)`.
pub fn naive_mentions(entities: &EntitySet, text: &str) -> Vec<(u32, usize, usize)> {
    let folded: Vec<char> = text.chars().map(fold_char).collect();
    let raw: Vec<char> = text.chars().collect();
    let mut forms: BTreeMap<Vec<char>, BTreeSet<u32>> = BTreeMap::new();
    for (id, rec) in entities.iter() {
        for f in &rec.forms {
            forms.entry(f.chars().map(fold_char).collect()).or_default().insert(id.0);
        }
    }
    let n = raw.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let starts_word = i == 0 || !is_word_char(raw[i - 1]);
        let mut best: Option<(usize, &BTreeSet<u32>)> = None;
        if starts_word {
            for (form, owners) in &forms {
                let end = i + form.len();
                let fits = end <= n && folded[i..end] == form[..];
                let bounded = end == n || (end <= n && !is_word_char(raw[end]));
                if fits && bounded && best.is_none_or(|(e, _)| end > e) {
                    best = Some((end, owners));
                }
            }
        }
        match best {
            Some((end, owners)) => {
                out.extend(owners.iter().map(|&e| (e, i, end)));
                i = end;
            }
            None => i += 1,
        }
    }
    out
}

const TEXT_ALPHABET: &[char] = &['a', 'b', 'A', 'B', 'c', ' ', ' ', '-', '.', '1', 'é', 'É', 'İ', 'ß'];
const FORM_ALPHABET: &[char] = &['a', 'b', 'B', 'c', ' ', '-', '1', 'é', 'İ'];

fn random_string(r: &mut Rng, alphabet: &[char], len: usize) -> String {
    (0..len).map(|_| *alphabet.choose(r).unwrap()).collect()
}

/// A random dictionary over a tiny alphabet (so forms overlap, nest and
/// collide) and a sentence over the same alphabet.
pub fn random_matcher_instance(r: &mut Rng) -> (EntitySet, String) {
    let mut set = EntitySet::new();
    let n_entities = r.gen_range(1..=6);
    let mut forms_so_far: Vec<String> = Vec::new();
    for e in 0..n_entities {
        let n_forms = r.gen_range(1..=3);
        let forms: Vec<String> = (0..n_forms)
            .map(|_| {
                // Reuse an earlier form now and then so some forms are shared.
                if !forms_so_far.is_empty() && r.gen_bool(0.15) {
                    forms_so_far.choose(r).unwrap().clone()
                } else {
                    let len = r.gen_range(1..=4);
                    random_string(r, FORM_ALPHABET, len)
                }
            })
            .collect();
        if let Some(rec) = EntityRecord::new(format!("C{e}"), &forms) {
            forms_so_far.extend(rec.forms.iter().cloned());
            set.insert(rec);
        }
    }
    let len = r.gen_range(0..=40);
    let mut text = random_string(r, TEXT_ALPHABET, len);
    // Plant a few dictionary forms so matches are common.
    for _ in 0..r.gen_range(0..4) {
        if let Some(f) = forms_so_far.choose(r) {
            let at = r.gen_range(0..=text.chars().count());
            let mut chars: Vec<char> = text.chars().collect();
            let sep = if r.gen_bool(0.7) { " " } else { "" };
            let insert: Vec<char> = format!("{sep}{f}{sep}").chars().collect();
            chars.splice(at..at, insert);
            text = chars.into_iter().collect();
        }
    }
    (set, text)
}

/// Runs `n` seeded matcher instances; returns the first disagreement.
pub fn matcher_oracle(n: usize, seed: u64) -> Result<usize, String> {
    let mut r = rng::stream(seed, "matcher-oracle");
    let mut mentions = 0;
    for case in 0..n {
        let (set, text) = random_matcher_instance(&mut r);
        let index = MentionIndex::build(&set);
        let got: Vec<(u32, usize, usize)> =
            index.find_mentions(&text).iter().map(|m| (m.entity.0, m.start, m.end)).collect();
        let want = naive_mentions(&set, &text);
        if got != want {
            return Err(format!("case {case}: text {text:?}\n  got  {got:?}\n  want {want:?}"));
        }
        mentions += got.len();
    }
    Ok(mentions)
}

/// Forms as the matcher sees them, for debugging oracle failures.
pub fn forms(set: &EntitySet) -> Vec<(u32, String)> {
    set.iter().flat_map(|(id, rec)| rec.forms.iter().map(move |f| (id.0, normalize_form(f)))).collect()
}

// ---------------------------------------------------------------------------
// Metric oracle

#[derive(Debug, Clone, PartialEq)]
pub struct BruteMetrics {
    pub auc: f64,
    pub max_f1: f64,
    pub p_at_k: Vec<f64>,
    pub gold_retrieved: usize,
}

/// Ranks by counting, for each candidate, how many others precede it, then
/// accumulates precision at gold ranks in rank order.
pub fn brute_metrics(cands: &[Candidate], gold: &BTreeSet<TripleKey>, ks: &[usize]) -> BruteMetrics {
    let n = cands.len();
    let precedes = |a: &Candidate, b: &Candidate| {
        a.score > b.score || (a.score == b.score && (&a.head, &a.rel, &a.tail) < (&b.head, &b.rel, &b.tail))
    };
    let mut rank_of = vec![0usize; n];
    for (i, c) in cands.iter().enumerate() {
        rank_of[i] = 1 + cands.iter().filter(|d| precedes(d, c)).count();
    }
    let mut at_rank: Vec<Option<&Candidate>> = vec![None; n + 1];
    for (i, c) in cands.iter().enumerate() {
        assert!(at_rank[rank_of[i]].is_none(), "ranks must be a permutation");
        at_rank[rank_of[i]] = Some(c);
    }
    let hits_up_to = |r: usize| (1..=r).filter(|&q| gold.contains(&at_rank[q].unwrap().key())).count();
    let g = gold.len();
    let mut ap = 0.0;
    let mut max_f1 = 0.0f64;
    for (r, c) in at_rank.iter().enumerate().skip(1) {
        let h = hits_up_to(r);
        let p = h as f64 / r as f64;
        let rec = if g == 0 { 0.0 } else { h as f64 / g as f64 };
        if gold.contains(&c.unwrap().key()) {
            ap += p;
        }
        let f = if p + rec == 0.0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
        max_f1 = max_f1.max(f);
    }
    let p_at_k = ks
        .iter()
        .map(|&k| {
            let m = k.min(n);
            hits_up_to(m) as f64 / m as f64
        })
        .collect();
    BruteMetrics { auc: if g == 0 { 0.0 } else { ap / g as f64 }, max_f1, p_at_k, gold_retrieved: hits_up_to(n) }
}

/// Up to 100 candidates over a few groups with heavily tied scores; gold is
/// a random subset plus triples of candidate groups that were never scored.
pub fn random_metric_instance(r: &mut Rng) -> (Vec<Candidate>, BTreeSet<TripleKey>, Vec<usize>) {
    let n_groups = r.gen_range(1..=10);
    let n_rels = r.gen_range(1..=10);
    let mut cands = Vec::new();
    'outer: for g in 0..n_groups {
        for rel in 0..n_rels {
            if cands.len() == 100 {
                break 'outer;
            }
            let score = if r.gen_bool(0.5) { r.gen_range(0..5) as f64 / 4.0 } else { r.gen::<f64>() };
            cands.push(Candidate { head: format!("h{g}"), rel: format!("r{rel}"), tail: format!("t{g}"), score });
        }
    }
    cands.shuffle(r);
    let mut gold: BTreeSet<TripleKey> = cands.iter().filter(|_| r.gen_bool(0.3)).map(Candidate::key).collect();
    for _ in 0..r.gen_range(0..3) {
        let g = r.gen_range(0..n_groups);
        gold.insert((format!("h{g}"), "unscored".into(), format!("t{g}")));
    }
    let ks: Vec<usize> = (0..3).map(|_| r.gen_range(1..=120)).collect();
    (cands, gold, ks)
}

/// Runs `n` seeded metric instances; AUC and P@k must match bit for bit.
/// Max F1 uses the same formula on the same operands, so it must too.
pub fn metric_oracle(n: usize, seed: u64) -> Result<(), String> {
    let mut r = rng::stream(seed, "metric-oracle");
    for case in 0..n {
        let (cands, gold, ks) = random_metric_instance(&mut r);
        let want = brute_metrics(&cands, &gold, &ks);
        let got = evaluator::evaluate(&cands, &gold, &ks).map_err(|e| format!("case {case}: {e}"))?;
        let got_p: Vec<f64> = got.p_at_k.iter().map(|p| p.precision).collect();
        let same = got.auc == want.auc
            && got.max_f1 == want.max_f1
            && got_p == want.p_at_k
            && got.counts.gold_retrieved == want.gold_retrieved
            && got.counts.gold == gold.len()
            && got.counts.candidates == cands.len();
        if !same {
            return Err(format!(
                "case {case}: evaluator auc {} f1 {} p@k {:?}; oracle {:?}",
                got.auc, got.max_f1, got_p, want
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Aggregation invariants

#[derive(Debug, Default, Clone, Copy)]
pub struct AggregationDeviation {
    pub permutation: f64,
    pub alpha_sum: f64,
    pub alpha_range: f64,
    pub uniform: f64,
    pub duplication_avg: f64,
    pub duplication_attn: f64,
}

impl AggregationDeviation {
    pub fn max(&self) -> f64 {
        [self.permutation, self.alpha_sum, self.alpha_range, self.uniform, self.duplication_avg, self.duplication_attn]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn max_abs_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst deviation of every aggregation invariant over `n` random bags.
pub fn aggregation_deviation(n: usize, seed: u64) -> AggregationDeviation {
    let mut r = rng::stream(seed, "aggregation");
    let mut dev = AggregationDeviation::default();
    for _ in 0..n {
        let m = r.gen_range(1..=16);
        let d = r.gen_range(1..=6);
        let rels = r.gen_range(2..=5);
        let scale = [0.1, 1.0, 5.0][r.gen_range(0..3)];
        let reps = Array2::from_shape_fn((m, 3 * d), |_| r.gen_range(-scale..scale));
        let p =
            ModelParams::<f64>::init(Dims { dim: d, relations: rels, vocab: 0, max_len: 0, lite: false }, 1.0, &mut r);
        let q = p.rel.row(r.gen_range(0..rels)).to_owned();

        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut r);
        let permuted = reps.select(ndarray::Axis(0), &perm);
        let a = aggregate(reps.view(), Aggregation::Avg, None).unwrap().vector;
        let b = aggregate(permuted.view(), Aggregation::Avg, None).unwrap().vector;
        dev.permutation = dev.permutation.max(max_abs_diff(&a, &b));

        let att = aggregate(reps.view(), Aggregation::Attn, Some(q.view())).unwrap();
        let alpha = att.alpha.unwrap();
        dev.alpha_sum = dev.alpha_sum.max((alpha.sum() - 1.0).abs());
        let outside = alpha.iter().map(|&x| (-x).max(x - 1.0).max(0.0)).fold(0.0, f64::max);
        dev.alpha_range = dev.alpha_range.max(outside);

        let row = reps.row(0).to_owned();
        let same = Array2::from_shape_fn((m, 3 * d), |(_, j)| row[j]);
        let ua = aggregate(same.view(), Aggregation::Attn, Some(q.view())).unwrap().alpha.unwrap();
        let uniform = ua.iter().map(|&x| (x - 1.0 / m as f64).abs()).fold(0.0, f64::max);
        dev.uniform = dev.uniform.max(uniform);

        let k = r.gen_range(2..=4);
        let dup_idx: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let dup = reps.select(ndarray::Axis(0), &dup_idx);
        for (mode, slot) in
            [(Aggregation::Avg, &mut dev.duplication_avg), (Aggregation::Attn, &mut dev.duplication_attn)]
        {
            let x = probs_from_reps(&p, reps.view(), mode).unwrap();
            let y = probs_from_reps(&p, dup.view(), mode).unwrap();
            *slot = slot.max(max_abs_diff(&x, &y));
        }
    }
    dev
}

// ---------------------------------------------------------------------------
// Pipeline runners

/// Config rooted at `dir`: inputs under `dir/data`, artifacts under
/// `dir/<work>`.
pub fn config_in(dir: &Path, work: &str, seed: u64, synth: SynthConfig) -> PipelineConfig {
    let mut c = PipelineConfig::with_seed(seed);
    let paths = SynthPaths::in_dir(&dir.join("data"));
    c.inputs.entities = paths.entities;
    c.inputs.triples = paths.triples;
    c.inputs.sentences = paths.sentences;
    c.work_dir = dir.join(work);
    c.synth = SynthConfig { seed, ..synth };
    c
}

/// A synthetic set small enough for debug-build tests.
pub fn small_synth() -> SynthConfig {
    SynthConfig { n_entities: 30, n_relations: 4, n_triples: 90, sentences_per_triple: 4, ..Default::default() }
}

/// Shrinks model and group-size limits to suit [`small_synth`].
pub fn small_config(dir: &Path, work: &str, seed: u64) -> PipelineConfig {
    let mut c = config_in(dir, work, seed, small_synth());
    c.linker.min_group = 2;
    c.bags.bag_size = 4;
    c.train.epochs = 2;
    c.train.dim = 8;
    c.train.max_len = 64;
    c.eval.ks = vec![10, 50];
    c
}

pub struct RunOutcome {
    pub pipeline: Pipeline,
    pub stats: BTreeMap<&'static str, Value>,
}

impl RunOutcome {
    pub fn stat(&self, stage: &str, key: &str) -> f64 {
        self.stats[stage][key].as_f64().unwrap_or(f64::NAN)
    }
}

/// Generates inputs unless present, then runs every stage.
pub fn run_pipeline(config: PipelineConfig) -> bagforge::Result<RunOutcome> {
    let pipeline = Pipeline::new(config)?;
    let mut stats = BTreeMap::new();
    if !pipeline.config.inputs.sentences.exists() {
        stats.insert("synth", pipeline.run(Stage::Synth)?);
    }
    for s in Stage::ALL {
        stats.insert(s.name(), pipeline.run(s)?);
    }
    Ok(RunOutcome { pipeline, stats })
}

fn read_kb_pairs(path: &Path) -> BTreeSet<(String, String)> {
    io::read_lines(path)
        .unwrap()
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[2].to_string())
        })
        .collect()
}

/// Checks the end-to-end invariants against the artifacts on disk:
/// negatives never positive in the KB, fact- and sentence-disjoint splits,
/// exact bag sizes and the label-vocabulary size.
pub fn check_pipeline_invariants(p: &Pipeline) -> Result<(), String> {
    let a = &p.artifacts;
    let c = &p.config;
    let positives = read_kb_pairs(&c.inputs.triples);
    let matches: Vec<MatchRecord> = io::read_jsonl(&a.matches()).map_err(|e| e.to_string())?;
    if let Some(m) = matches
        .iter()
        .find(|m| m.polarity == Polarity::Negative && positives.contains(&(m.head_cui.clone(), m.tail_cui.clone())))
    {
        return Err(format!("negative group ({}, {}) is a KB pair", m.head_cui, m.tail_cui));
    }

    let base = RelationVocab::load(&a.vocab()).map_err(|e| e.to_string())?;
    let labels = RelationVocab::load(&a.labels()).map_err(|e| e.to_string())?;
    let expected_labels = if c.scheme.expands_relations() { 2 * (base.len() - 1) + 1 } else { base.len() };
    if labels.len() != expected_labels {
        return Err(format!("{} labels for {} base relations under {}", labels.len(), base.len(), c.scheme));
    }

    let load = |name: &str| -> Result<Vec<Bag>, String> { io::read_jsonl(&a.split(name)).map_err(|e| e.to_string()) };
    let (train, valid, test) = (load("train")?, load("valid")?, load("test")?);
    let all: Vec<Bag> = io::read_jsonl(&a.bags()).map_err(|e| e.to_string())?;
    for (name, bags) in [("bags", &all), ("train", &train), ("valid", &valid), ("test", &test)] {
        if let Some(b) = bags.iter().find(|b| b.sentences.len() != c.bags.bag_size) {
            return Err(format!("{name}: bag {:?} has {} sentences", b.group, b.sentences.len()));
        }
    }

    let expanded = expand_relation_labels(&base);
    let facts = |bags: &[Bag]| -> BTreeSet<(String, String, String)> {
        bags.iter()
            .map(|b| {
                let rel = if c.scheme.expands_relations() {
                    base.name(expanded.collapse(b.label()).0).to_string()
                } else {
                    labels.name(b.label()).to_string()
                };
                (b.group[0].clone(), rel, b.group[1].clone())
            })
            .collect()
    };
    let (ft, fv, fs) = (facts(&train), facts(&valid), facts(&test));
    if !ft.is_disjoint(&fv) || !ft.is_disjoint(&fs) || !fv.is_disjoint(&fs) {
        return Err("a fact occurs in two splits".into());
    }
    let sids = |bags: &[Bag]| -> BTreeSet<String> {
        bags.iter().flat_map(|b| b.sentences.iter().map(|s| s.sid.clone())).collect()
    };
    let train_sids = sids(&train);
    let held: BTreeSet<String> = sids(&valid).union(&sids(&test)).cloned().collect();
    if let Some(s) = train_sids.intersection(&held).next() {
        return Err(format!("sentence {s} is in train and a held-out split"));
    }
    if test.is_empty() {
        return Err("empty test split".into());
    }
    Ok(())
}

/// Every file under `dir`, relative path to bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Names of files whose bytes differ between two snapshots.
pub fn snapshot_diff(a: &BTreeMap<PathBuf, Vec<u8>>, b: &BTreeMap<PathBuf, Vec<u8>>) -> Vec<String> {
    let keys: BTreeSet<&PathBuf> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).map(|k| k.display().to_string()).collect()
}

// ---------------------------------------------------------------------------
// Encoded bags from a real run

pub fn train_bags(p: &Pipeline) -> Vec<Bag> {
    io::read_jsonl(&p.artifacts.split("train")).unwrap()
}

/// First training bag with a non-NA label, encoded for the lite encoder.
pub fn lite_bag(p: &Pipeline) -> (TokenVocab, EncodedBag<f64>) {
    let bags = train_bags(p);
    let vocab = TokenVocab::build(&bags);
    let bag = bags.iter().find(|b| b.label != 0).expect("a positive training bag");
    let enc = Encoding::Lite(vocab.clone());
    let mut unknown = 0;
    let encoded = enc.encode_bag(bag, &mut unknown).unwrap();
    (vocab, encoded)
}

/// Writes a stub archive over every training sentence under `prefix` and
/// encodes the first positive training bag from it.
pub fn stub_archive_bag(p: &Pipeline, cols: usize, prefix: &Path) -> (Arc<EmbeddingArchive>, EncodedBag<f64>) {
    let bags = train_bags(p);
    let tagged: Vec<&TaggedSentence> = bags.iter().flat_map(|b| &b.sentences).collect();
    bagforge::mil_model::encoding::write_stub_archive(&tagged, cols, p.config.seed, prefix).unwrap();
    let archive = Arc::new(EmbeddingArchive::load(prefix).unwrap());
    let bag = bags.iter().find(|b| b.label != 0).expect("a positive training bag");
    let enc = Encoding::Precomputed(archive.clone());
    let mut unknown = 0;
    let encoded = enc.encode_bag(bag, &mut unknown).unwrap();
    (archive, encoded)
}

// ---------------------------------------------------------------------------
// Negative sampling

/// Runs `apply_constraints` on `n` positive groups spread over 100
/// relations, each sentence also carrying one candidate negative group.
pub fn constraint_summary(n: u32, ratio: f64) -> LinkSummary {
    let rels = 100u32;
    let vocab = RelationVocab::new((0..rels).map(|i| format!("r{i:03}")));
    let store = TripleStore::from_triples((0..n).map(|i| Triple {
        head: EntityId(i),
        rel: RelId(1 + i % rels),
        tail: EntityId(n + i),
    }));
    let index = build_group_index(&store);
    let mut matches = Vec::with_capacity(2 * n as usize);
    for i in 0..n {
        let sid = format!("s{i}");
        matches.push(SentenceGroupMatch {
            sid: sid.clone(),
            group: (EntityId(i), EntityId(n + i)),
            polarity: Polarity::Positive,
            head_span: (0, 1),
            tail_span: (2, 3),
        });
        matches.push(SentenceGroupMatch {
            sid,
            group: (EntityId(n + i), EntityId(2 * n + i)),
            polarity: Polarity::Negative,
            head_span: (2, 3),
            tail_span: (4, 5),
        });
    }
    let config = LinkerConfig { neg_to_pos_ratio: ratio, ..Default::default() };
    apply_constraints(matches, &index, &vocab, &config, &mut rng::seeded(1)).unwrap().summary
}

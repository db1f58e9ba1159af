//! Synthetic KB and corpus with controllable noise.
//!
//! Relations come in converse pairs `(R2i, R2i+1)`. Each base fact may also
//! be recorded in the reverse direction under the partner relation, so the
//! same sentences support both `(h, t)` and `(t, h)`; only the direction of
//! the markers tells the two apart. Expressive sentences use the relation's
//! active phrase with the head first, or (when flipped) its passive phrase
//! with the tail first.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus_ingest::{MAX_CHARS, MIN_CHARS};
use crate::error::{Error, Result};
use crate::io;
use crate::kb_store::EntityRecord;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_triples: usize,
    pub sentences_per_triple: usize,
    /// Probability that a sentence names the tail before the head.
    pub flip_prob: f64,
    /// Probability that a sentence is filler that mentions the pair without
    /// expressing the relation.
    pub noise_prob: f64,
    /// Probability of a third entity in the sentence.
    pub distractor_prob: f64,
    /// Probability that a fact is also recorded as its converse.
    pub converse_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_entities: 60,
            n_relations: 6,
            n_triples: 400,
            sentences_per_triple: 6,
            flip_prob: 0.5,
            noise_prob: 0.3,
            distractor_prob: 0.5,
            converse_prob: 0.5,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("noise_prob", self.noise_prob),
            ("distractor_prob", self.distractor_prob),
            ("converse_prob", self.converse_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.n_relations < 2 {
            return Err(Error::Config("n_relations must be >= 2".into()));
        }
        if self.n_entities < 3 {
            return Err(Error::Config("n_entities must be >= 3".into()));
        }
        if self.noise_prob < 1.0 && (self.sentences_per_triple == 0 || self.n_triples < self.n_relations) {
            return Err(Error::Underdetermined(format!(
                "{} triples x {} sentences leave some of {} relations without expressive sentences",
                self.n_triples, self.sentences_per_triple, self.n_relations
            )));
        }
        // Each base fact claims both orientations of its pair.
        let pairs = self.n_entities * (self.n_entities - 1) / 2;
        if self.n_triples > pairs {
            return Err(Error::Underdetermined(format!(
                "{} triples need distinct entity pairs but only {pairs} exist",
                self.n_triples
            )));
        }
        Ok(())
    }
}

/// Per-sentence ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub sid: String,
    pub head: String,
    pub rel: String,
    pub tail: String,
    pub expressive: bool,
    pub flipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distractor: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub entities: Vec<EntityRecord>,
    pub triples: Vec<(String, String, String)>,
    pub sentences: Vec<(String, String)>,
    pub manifest: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub entities: PathBuf,
    pub triples: PathBuf,
    pub sentences: PathBuf,
    pub manifest: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            entities: dir.join("entities.jsonl"),
            triples: dir.join("triples.tsv"),
            sentences: dir.join("sentences.tsv"),
            manifest: dir.join("synth_manifest.jsonl"),
        }
    }
}

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "v"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
const FILLER: [&str; 16] = [
    "the", "report", "notes", "that", "in", "this", "cohort", "we", "also", "observed", "data", "from", "a", "large",
    "recent", "series",
];
const NOISE: [&str; 8] = ["and", "were", "both", "listed", "among", "several", "other", "items"];

/// A fresh pseudo-word of `syllables` CV syllables, unique within `used`.
fn pseudo_word(rng: &mut Rng, syllables: usize, used: &mut BTreeSet<String>) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(NUCLEI.choose(rng).unwrap());
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn rel_name(i: usize) -> String {
    format!("R{i}")
}

fn converse(r: usize, n: usize) -> Option<usize> {
    let p = r ^ 1;
    (p < n).then_some(p)
}

struct Templates {
    active: Vec<String>,
    passive: Vec<String>,
}

fn filler(rng: &mut Rng, words: &[&str], n: usize) -> Vec<String> {
    (0..n).map(|_| words.choose(rng).unwrap().to_string()).collect()
}

/// Builds one sentence around the ordered pair `(first, second)` joined by
/// `middle`, with an optional distractor, padded into the length bounds.
fn realize(rng: &mut Rng, first: &str, middle: &[String], second: &str, distractor: Option<&str>) -> String {
    let lead = rng.gen_range(0..3);
    let mut words = filler(rng, &FILLER, lead);
    words.push(first.to_string());
    words.extend(middle.iter().cloned());
    words.push(second.to_string());
    if let Some(d) = distractor {
        let tail = ["along", "with"].map(String::from);
        if rng.gen_bool(0.5) {
            words.extend(tail);
            words.push(d.to_string());
        } else {
            words.splice(0..0, [d.to_string(), "was".into(), "noted".into(), "and".into()]);
        }
    }
    while words.join(" ").chars().count() < MIN_CHARS {
        let w = FILLER.choose(rng).unwrap().to_string();
        words.push(w);
    }
    let mut text = words.join(" ");
    text.push_str(" .");
    debug_assert!(text.chars().count() <= MAX_CHARS);
    text
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let mut used: BTreeSet<String> = FILLER.iter().chain(&NOISE).map(|s| s.to_string()).collect();
    used.extend(["along", "with", "was", "noted"].map(String::from));

    let names: Vec<String> = (0..cfg.n_entities).map(|_| pseudo_word(&mut rng, 3, &mut used)).collect();
    let cuis: Vec<String> = (0..cfg.n_entities).map(|i| format!("E{i:04}")).collect();
    let entities = cuis
        .iter()
        .zip(&names)
        .map(|(c, n)| EntityRecord::new(c.clone(), [n]).expect("pseudo-words are nonempty"))
        .collect();
    let templates = Templates {
        active: (0..cfg.n_relations)
            .map(|_| format!("{} {}", pseudo_word(&mut rng, 2, &mut used), pseudo_word(&mut rng, 2, &mut used)))
            .collect(),
        passive: (0..cfg.n_relations)
            .map(|_| format!("{} {}", pseudo_word(&mut rng, 2, &mut used), pseudo_word(&mut rng, 2, &mut used)))
            .collect(),
    };

    let mut pairs: Vec<(usize, usize)> =
        (0..cfg.n_entities).flat_map(|a| (a + 1..cfg.n_entities).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut rng);

    let chosen = &pairs[..cfg.n_triples];
    // Distractors never form a KB pair with either argument, so at noise 0
    // every sentence of a positive group expresses its relation.
    let linked: BTreeSet<(usize, usize)> = chosen.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    let mut triples = BTreeSet::new();
    let mut sentences = Vec::new();
    let mut manifest = Vec::new();
    for (i, &(a, b)) in chosen.iter().enumerate() {
        let (h, t) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        let r = i % cfg.n_relations;
        triples.insert((cuis[h].clone(), rel_name(r), cuis[t].clone()));
        if let Some(c) = converse(r, cfg.n_relations) {
            if rng.gen_bool(cfg.converse_prob) {
                triples.insert((cuis[t].clone(), rel_name(c), cuis[h].clone()));
            }
        }
        for _ in 0..cfg.sentences_per_triple {
            let flipped = rng.gen_bool(cfg.flip_prob);
            let expressive = !rng.gen_bool(cfg.noise_prob);
            let distractor = if rng.gen_bool(cfg.distractor_prob) {
                let free: Vec<usize> = (0..cfg.n_entities)
                    .filter(|&e| e != h && e != t && !linked.contains(&(h, e)) && !linked.contains(&(t, e)))
                    .collect();
                free.choose(&mut rng).copied()
            } else {
                None
            };
            let (first, second) = if flipped { (t, h) } else { (h, t) };
            let middle: Vec<String> = if expressive {
                let phrase = if flipped { &templates.passive[r] } else { &templates.active[r] };
                phrase.split(' ').map(String::from).collect()
            } else {
                filler(&mut rng, &NOISE, 2)
            };
            let text = realize(&mut rng, &names[first], &middle, &names[second], distractor.map(|e| names[e].as_str()));
            let sid = format!("s{:06}", sentences.len());
            manifest.push(ManifestRecord {
                sid: sid.clone(),
                head: cuis[h].clone(),
                rel: rel_name(r),
                tail: cuis[t].clone(),
                expressive,
                flipped,
                distractor: distractor.map(|e| cuis[e].clone()),
            });
            sentences.push((sid, text));
        }
    }
    Ok(SynthData { entities, triples: triples.into_iter().collect(), sentences, manifest })
}

impl SynthData {
    pub fn write(&self, paths: &SynthPaths) -> Result<()> {
        io::write_jsonl(&paths.entities, &self.entities)?;
        let mut tsv = String::new();
        for (h, r, t) in &self.triples {
            writeln!(tsv, "{h}\t{r}\t{t}").unwrap();
        }
        io::write_text(&paths.triples, &tsv)?;
        let mut corpus = String::new();
        for (sid, text) in &self.sentences {
            writeln!(corpus, "{sid}\t{text}").unwrap();
        }
        io::write_text(&paths.sentences, &corpus)?;
        io::write_jsonl(&paths.manifest, &self.manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_generate_expected_sizes() {
        let d = generate(&SynthConfig::default()).unwrap();
        assert_eq!(d.entities.len(), 60);
        assert_eq!(d.sentences.len(), 400 * 6);
        assert!(d.triples.len() >= 400);
        for (_, s) in &d.sentences {
            let n = s.chars().count();
            assert!((MIN_CHARS..=MAX_CHARS).contains(&n), "{n}: {s}");
        }
    }

    #[test]
    fn unflipped_sentences_put_head_first() {
        let cfg = SynthConfig { flip_prob: 0.0, ..Default::default() };
        let d = generate(&cfg).unwrap();
        let name = |cui: &str| d.entities.iter().find(|e| e.cui == cui).unwrap().forms[0].clone();
        for (m, (_, text)) in d.manifest.iter().zip(&d.sentences) {
            let words: Vec<&str> = text.split(' ').collect();
            let pos = |w: &str| words.iter().position(|x| *x == w).unwrap();
            assert!(pos(&name(&m.head)) < pos(&name(&m.tail)));
        }
    }

    #[test]
    fn full_noise_has_no_expressive_sentences() {
        let cfg = SynthConfig { noise_prob: 1.0, ..Default::default() };
        assert!(generate(&cfg).unwrap().manifest.iter().all(|m| !m.expressive));
    }

    #[test]
    fn too_few_triples_is_underdetermined() {
        let cfg = SynthConfig { n_triples: 3, ..Default::default() };
        assert!(matches!(generate(&cfg), Err(Error::Underdetermined(_))));
    }

    #[test]
    fn deterministic() {
        let a = generate(&SynthConfig::default()).unwrap();
        let b = generate(&SynthConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}

//! Stage orchestration behind one JSON config.
//!
//! Every stage reads only artifacts written by earlier stages (or the
//! configured inputs) under `work_dir`, writes its outputs under fixed names,
//! and records a `<output>.stats.json` next to its main output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bag_builder::{self, Bag, BagConfig, DatasetSplits, GroupRelations, Instance, Manifest, SplitFractions};
use crate::corpus_ingest::{self, LengthBounds};
use crate::error::{Error, Result};
use crate::evaluator::{self, BagScores, DEFAULT_KS};
use crate::group_linker::{self, LinkerConfig, MatchRecord, Polarity};
use crate::io;
use crate::kb_store::{build_group_index, load_kb, KnowledgeBase, RelationFilter, RelationVocab};
use crate::mention_matcher::{self, MatchedSentence, MentionIndex, MentionsRecord};
use crate::mil_model::{
    bag_probs, checkpoint, mean_loss, train, Aggregation, Dims, EmbeddingArchive, EncodedBag, Encoding, ModelParams,
    TokenVocab, TrainConfig,
};
use crate::rng;
use crate::synthgen::{self, SynthConfig, SynthPaths};
use crate::tagging::{self, DefaultTokenizer, MatchView, TaggedSentence, TaggingScheme};

pub const SEED_ENV: &str = "BAGFORGE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Kb,
    Corpus,
    Match,
    Link,
    Tag,
    Bags,
    Split,
    Train,
    Eval,
    Synth,
}

impl Stage {
    /// Stages run by `all`, in order. `synth` is not part of it.
    pub const ALL: [Stage; 9] = [
        Stage::Kb,
        Stage::Corpus,
        Stage::Match,
        Stage::Link,
        Stage::Tag,
        Stage::Bags,
        Stage::Split,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Kb => "kb",
            Stage::Corpus => "corpus",
            Stage::Match => "match",
            Stage::Link => "link",
            Stage::Tag => "tag",
            Stage::Bags => "bags",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Synth => "synth",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .chain([Stage::Synth])
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub entities: PathBuf,
    pub triples: PathBuf,
    pub sentences: PathBuf,
}

impl Default for InputPaths {
    fn default() -> Self {
        let p = SynthPaths::in_dir(Path::new("data"));
        InputPaths { entities: p.entities, triples: p.triples, sentences: p.sentences }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let b = LengthBounds::default();
        CorpusConfig { min_chars: b.min, max_chars: b.max }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderChoice {
    #[default]
    Lite,
    Precomputed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderChoice,
    /// Archive prefix for the precomputed encoder.
    pub archive: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { ks: DEFAULT_KS.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; `None` uses every processor.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default)]
    pub inputs: InputPaths,
    #[serde(default)]
    pub relation_filter: RelationFilter,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub linker: LinkerConfig,
    #[serde(default = "default_scheme")]
    pub scheme: TaggingScheme,
    #[serde(default)]
    pub bags: BagConfig,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

fn default_scheme() -> TaggingScheme {
    TaggingScheme::KTag
}

fn default_aggregation() -> Aggregation {
    Aggregation::Avg
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        PipelineConfig {
            seed,
            workers: None,
            work_dir: default_work_dir(),
            inputs: InputPaths::default(),
            relation_filter: RelationFilter::All,
            corpus: CorpusConfig::default(),
            linker: LinkerConfig::default(),
            scheme: default_scheme(),
            bags: BagConfig::default(),
            split: SplitFractions::default(),
            aggregation: default_aggregation(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// Builds a config from an optional JSON document, dotted-key overrides
    /// and an optional seed override. Unknown keys are rejected by name.
    pub fn resolve(file: Option<Value>, overrides: &[(String, String)], seed: Option<u64>) -> Result<Self> {
        let template = serde_json::to_value(Self::with_seed(0)).expect("config serializes");
        let mut doc = file.unwrap_or_else(|| json!({}));
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        check_keys(&doc, &template, "")?;
        for (key, raw) in overrides {
            set_dotted(&mut doc, &template, key, parse_override(raw))?;
        }
        if let Some(s) = seed {
            doc["seed"] = json!(s);
        }
        if doc.get("seed").is_none() {
            return Err(Error::Config(format!("seed is mandatory (config `seed`, --seed or {SEED_ENV})")));
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.linker.validate()?;
        self.split.validate()?;
        self.train.validate()?;
        if self.bags.bag_size == 0 {
            return Err(Error::Config("bags.bag_size must be >= 1".into()));
        }
        if self.corpus.min_chars > self.corpus.max_chars {
            return Err(Error::Config("corpus.min_chars exceeds corpus.max_chars".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.encoder.kind == EncoderChoice::Precomputed && self.encoder.archive.is_none() {
            return Err(Error::Config("encoder.archive is required for the precomputed encoder".into()));
        }
        Ok(())
    }
}

fn check_keys(doc: &Value, template: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(d), Value::Object(t)) = (doc, template) else {
        return Ok(());
    };
    for (k, v) in d {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match t.get(k) {
            None => return Err(Error::UnknownKey(path)),
            Some(sub) => check_keys(v, sub, &path)?,
        }
    }
    Ok(())
}

fn parse_override(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(doc: &mut Value, template: &Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut t = template;
    for p in &parts {
        t = t.as_object().and_then(|o| o.get(*p)).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        if !cur.get(*p).is_some_and(Value::is_object) {
            cur[*p] = json!({});
        }
        cur = cur.get_mut(*p).unwrap();
    }
    cur[*parts.last().unwrap()] = value;
    Ok(())
}

/// Fixed artifact names under `work_dir`.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn kb_entities(&self) -> PathBuf {
        self.path("kb.entities.jsonl")
    }
    pub fn kb_triples(&self) -> PathBuf {
        self.path("kb.triples.tsv")
    }
    pub fn kb_vocab(&self) -> PathBuf {
        self.path("kb.vocab.json")
    }
    pub fn sentences(&self) -> PathBuf {
        self.path("sentences.tsv")
    }
    pub fn mentions(&self) -> PathBuf {
        self.path("mentions.jsonl")
    }
    pub fn matches(&self) -> PathBuf {
        self.path("matches.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.path("vocab.json")
    }
    pub fn tagged(&self) -> PathBuf {
        self.path("tagged.jsonl")
    }
    pub fn bags(&self) -> PathBuf {
        self.path("bags.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.path("labels.json")
    }
    pub fn split(&self, name: &str) -> PathBuf {
        self.path(&format!("{name}.bags.jsonl"))
    }
    pub fn splits(&self) -> PathBuf {
        self.path("splits.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.path("model.ckpt")
    }
    pub fn checkpoint_meta(&self) -> PathBuf {
        self.path("model.ckpt.meta.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.path("train_log.csv")
    }
    pub fn predictions(&self) -> PathBuf {
        self.path("predictions.tsv")
    }
    pub fn report(&self) -> PathBuf {
        self.path("report.json")
    }
    pub fn pr_curve(&self) -> PathBuf {
        self.path("pr_curve.csv")
    }
}

pub fn stats_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".stats.json");
    PathBuf::from(s)
}

fn write_stats(output: &Path, stats: &Value) -> Result<()> {
    io::write_json(&stats_path(output), stats)
}

/// Sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub scheme: TaggingScheme,
    pub aggregation: Aggregation,
    pub encoder: EncoderChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<PathBuf>,
    pub labels: Vec<String>,
    /// Token vocabulary of the lite encoder, in id order.
    #[serde(default)]
    pub tokens: Vec<String>,
    pub seed: u64,
    pub best_epoch: usize,
    pub train: TrainConfig,
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub artifacts: Artifacts,
    pool: rayon::ThreadPool,
}

fn load_bags(path: &Path) -> Result<Vec<Bag>> {
    io::read_jsonl(path)
}

/// Relation names per positive group, restricted to `vocab`.
pub fn group_relations(kb: &KnowledgeBase, vocab: &RelationVocab) -> GroupRelations {
    let mut out = GroupRelations::new();
    for t in kb.triples.iter() {
        let name = kb.vocab.name(t.rel);
        if vocab.id(name).is_some() {
            out.entry([kb.entities.cui(t.head).to_string(), kb.entities.cui(t.tail).to_string()])
                .or_default()
                .insert(name.to_string());
        }
    }
    out
}

/// Every bag has exactly `bag_size` sentences.
pub fn check_bag_sizes(bags: &[Bag], bag_size: usize) -> Result<()> {
    match bags.iter().find(|b| b.sentences.len() != bag_size) {
        Some(b) => {
            Err(Error::Shape(format!("bag for {:?} has {} sentences, expected {bag_size}", b.group, b.sentences.len())))
        }
        None => Ok(()),
    }
}

/// Fact-level and sentence-level disjointness of the splits.
pub fn check_disjoint(splits: &DatasetSplits, base: &RelationVocab, scheme: TaggingScheme) -> Result<()> {
    let triples = |bags: &[Bag]| -> BTreeSet<(String, String, String)> {
        let expanded = scheme.expands_relations().then(|| tagging::expand_relation_labels(base));
        bags.iter()
            .map(|b| {
                let r = match &expanded {
                    Some(e) => e.collapse(b.label()).0,
                    None => b.label(),
                };
                (b.group[0].clone(), base.name(r).to_string(), b.group[1].clone())
            })
            .collect()
    };
    let (tr, va, te) = (triples(&splits.train), triples(&splits.valid), triples(&splits.test));
    if !tr.is_disjoint(&va) || !tr.is_disjoint(&te) || !va.is_disjoint(&te) {
        return Err(Error::Shape("a fact occurs in two splits".into()));
    }
    let train_sids: BTreeSet<&str> =
        splits.train.iter().flat_map(|b| b.sentences.iter().map(|s| s.sid.as_str())).collect();
    let leaked =
        splits.valid.iter().chain(&splits.test).flat_map(|b| &b.sentences).any(|s| train_sids.contains(s.sid.as_str()));
    if leaked {
        return Err(Error::Shape("a training sentence occurs in a held-out bag".into()));
    }
    Ok(())
}

fn encode_all(enc: &Encoding, bags: &[Bag]) -> Result<(Vec<EncodedBag<f32>>, usize)> {
    let encoded: Vec<(EncodedBag<f32>, usize)> = bags
        .par_iter()
        .map(|b| {
            let mut unknown = 0;
            enc.encode_bag(b, &mut unknown).map(|e| (e, unknown))
        })
        .collect::<Result<_>>()?;
    let unknown = encoded.iter().map(|(_, u)| u).sum();
    Ok((encoded.into_iter().map(|(e, _)| e).collect(), unknown))
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.workers {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let artifacts = Artifacts::new(&config.work_dir);
        Ok(Pipeline { config, artifacts, pool })
    }

    pub fn run(&self, stage: Stage) -> Result<Value> {
        self.pool.install(|| match stage {
            Stage::Kb => self.kb(),
            Stage::Corpus => self.corpus(),
            Stage::Match => self.match_stage(),
            Stage::Link => self.link(),
            Stage::Tag => self.tag(),
            Stage::Bags => self.bags(),
            Stage::Split => self.split(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval(),
            Stage::Synth => self.synth(),
        })
    }

    /// Runs every stage of `all` in order and returns the evaluation stats.
    pub fn run_all(&self) -> Result<Value> {
        let mut last = Value::Null;
        for s in Stage::ALL {
            last = self.run(s)?;
        }
        Ok(last)
    }

    fn load_work_kb(&self) -> Result<KnowledgeBase> {
        let a = &self.artifacts;
        load_kb(&a.kb_triples(), &a.kb_entities(), &RelationFilter::All)
    }

    fn kb(&self) -> Result<Value> {
        let c = &self.config;
        let kb = load_kb(&c.inputs.triples, &c.inputs.entities, &c.relation_filter)?;
        let a = &self.artifacts;
        kb.write(&a.kb_entities(), &a.kb_triples(), &a.kb_vocab())?;
        let index = build_group_index(&kb.triples);
        let stats = json!({
            "entities": kb.entities.len(),
            "triples": kb.triples.len(),
            "relations": kb.vocab.len(),
            "positive_groups": index.num_positive(),
        });
        write_stats(&a.kb_triples(), &stats)?;
        Ok(stats)
    }

    fn corpus(&self) -> Result<Value> {
        let c = &self.config;
        let lines = io::read_raw_lines(&c.inputs.sentences)?;
        let bounds = LengthBounds { min: c.corpus.min_chars, max: c.corpus.max_chars };
        let (kept, stats) = corpus_ingest::filter_sentences(&lines, bounds);
        corpus_ingest::write_sentences(&self.artifacts.sentences(), &kept)?;
        let stats = serde_json::to_value(stats)?;
        write_stats(&self.artifacts.sentences(), &stats)?;
        Ok(stats)
    }

    fn match_stage(&self) -> Result<Value> {
        let a = &self.artifacts;
        let kb = self.load_work_kb()?;
        let sentences = corpus_ingest::read_sentences(&a.sentences())?;
        let index = MentionIndex::build(&kb.entities);
        let (matched, stats) = mention_matcher::match_corpus(&index, &sentences);
        let records: Vec<MentionsRecord> = matched.iter().map(|m| m.to_record(&kb.entities)).collect();
        io::write_jsonl(&a.mentions(), &records)?;
        let stats = serde_json::to_value(stats)?;
        write_stats(&a.mentions(), &stats)?;
        Ok(stats)
    }

    fn link(&self) -> Result<Value> {
        let a = &self.artifacts;
        let kb = self.load_work_kb()?;
        let sentences: Vec<MatchedSentence> = io::read_jsonl::<MentionsRecord>(&a.mentions())?
            .into_iter()
            .map(|r| MatchedSentence::from_record(r, &kb.entities))
            .collect::<Result<_>>()?;
        let index = build_group_index(&kb.triples);
        let linked = group_linker::link_corpus(&sentences, &index, self.config.seed);
        let mut rng = rng::stream(self.config.seed, "constraints");
        let outcome = group_linker::apply_constraints(linked, &index, &kb.vocab, &self.config.linker, &mut rng)?;
        if let Some(m) =
            outcome.matches.iter().find(|m| m.polarity == Polarity::Negative && index.is_positive(&m.group))
        {
            return Err(Error::Shape(format!("negative group {:?} is in the KB", m.group)));
        }
        let records: Vec<MatchRecord> = outcome.matches.iter().map(|m| m.to_record(&kb.entities)).collect();
        io::write_jsonl(&a.matches(), &records)?;
        let kept = RelationVocab::new(outcome.kept_relations.iter().map(|&r| kb.vocab.name(r)));
        io::write_json(&a.vocab(), &kept)?;
        let stats = serde_json::to_value(&outcome.summary)?;
        write_stats(&a.matches(), &stats)?;
        Ok(stats)
    }

    fn tag(&self) -> Result<Value> {
        let a = &self.artifacts;
        let scheme = self.config.scheme;
        let texts: HashMap<String, String> =
            io::read_jsonl::<MentionsRecord>(&a.mentions())?.into_iter().map(|r| (r.sid, r.text)).collect();
        let matches: Vec<MatchRecord> = io::read_jsonl(&a.matches())?;
        let results: Vec<Result<TaggedSentence>> = matches
            .par_iter()
            .map(|m| {
                let text = texts.get(&m.sid).ok_or_else(|| Error::MissingSid(m.sid.clone()))?;
                let view = MatchView {
                    sid: &m.sid,
                    head_cui: &m.head_cui,
                    tail_cui: &m.tail_cui,
                    polarity: m.polarity,
                    head_span: (m.head_span[0], m.head_span[1]),
                    tail_span: (m.tail_span[0], m.tail_span[1]),
                };
                tagging::tag_sentence(&view, text, &DefaultTokenizer, scheme)
            })
            .collect();
        let mut rejected: BTreeMap<String, usize> = BTreeMap::new();
        let mut tagged = Vec::new();
        for r in results {
            match r {
                Ok(t) => tagged.push(t),
                Err(e @ Error::MissingSid(_)) => return Err(e),
                Err(e) => *rejected.entry(e.to_string()).or_default() += 1,
            }
        }
        io::write_jsonl(&a.tagged(), &tagged)?;
        let stats = json!({ "scheme": scheme, "tagged": tagged.len(), "rejected": rejected });
        write_stats(&a.tagged(), &stats)?;
        Ok(stats)
    }

    fn instances(&self) -> Result<(Vec<Instance>, RelationVocab, RelationVocab)> {
        let a = &self.artifacts;
        let kb = self.load_work_kb()?;
        let base: RelationVocab = RelationVocab::load(&a.vocab())?;
        let tagged: Vec<TaggedSentence> = io::read_jsonl(&a.tagged())?;
        if let Some(t) = tagged.iter().find(|t| t.scheme != self.config.scheme) {
            return Err(Error::Config(format!(
                "tagged file uses scheme {} but config says {}; rerun `tag`",
                t.scheme, self.config.scheme
            )));
        }
        let relations = group_relations(&kb, &base);
        let instances = bag_builder::build_instances(&tagged, &relations, &base, self.config.scheme, &self.config.bags);
        let labels = bag_builder::label_vocab(&base, self.config.scheme);
        Ok((instances, base, labels))
    }

    fn bags(&self) -> Result<Value> {
        let a = &self.artifacts;
        let (instances, base, labels) = self.instances()?;
        let (size, seed) = (self.config.bags.bag_size, self.config.seed);
        let bags: Vec<Bag> = instances.par_iter().map(|i| i.compose(size, seed)).collect::<Result<_>>()?;
        check_bag_sizes(&bags, size)?;
        io::write_jsonl(&a.bags(), &bags)?;
        io::write_json(&a.labels(), &labels)?;
        let stats = json!({
            "instances": instances.len(),
            "bags": bags.len(),
            "bag_size": size,
            "sentences_sampled": bags.len() * size,
            "base_relations": base.len(),
            "labels": labels.len(),
            "mix_bags": bags.iter().filter(|b| b.composition == bag_builder::Composition::Mix).count(),
        });
        write_stats(&a.bags(), &stats)?;
        Ok(stats)
    }

    fn split(&self) -> Result<Value> {
        let a = &self.artifacts;
        let (instances, base, _) = self.instances()?;
        let c = &self.config;
        let splits = bag_builder::split_dataset(&instances, c.split, c.bags.bag_size, c.scheme, c.seed)?;
        for bags in [&splits.train, &splits.valid, &splits.test] {
            check_bag_sizes(bags, c.bags.bag_size)?;
        }
        check_disjoint(&splits, &base, c.scheme)?;
        io::write_jsonl(&a.split("train"), &splits.train)?;
        io::write_jsonl(&a.split("valid"), &splits.valid)?;
        io::write_jsonl(&a.split("test"), &splits.test)?;
        io::write_json(&a.splits(), &splits.manifest)?;
        let stats = serde_json::to_value(&splits.manifest.counts)?;
        write_stats(&a.splits(), &stats)?;
        Ok(stats)
    }

    fn encoding_for(&self, train_bags: &[Bag]) -> Result<Encoding> {
        match self.config.encoder.kind {
            EncoderChoice::Lite => Ok(Encoding::Lite(TokenVocab::build(train_bags))),
            EncoderChoice::Precomputed => {
                let prefix = self.config.encoder.archive.as_ref().expect("validated");
                Ok(Encoding::Precomputed(Arc::new(EmbeddingArchive::load(prefix)?)))
            }
        }
    }

    fn train(&self) -> Result<Value> {
        let a = &self.artifacts;
        let c = &self.config;
        let splits: Manifest = io::read_json(&a.splits())?;
        if splits.scheme != c.scheme {
            return Err(Error::Config(format!(
                "splits were built with scheme {} but config says {}",
                splits.scheme, c.scheme
            )));
        }
        let labels = RelationVocab::load(&a.labels())?;
        let train_bags = load_bags(&a.split("train"))?;
        let valid_bags = load_bags(&a.split("valid"))?;
        let encoding = self.encoding_for(&train_bags)?;
        let (train_enc, _) = encode_all(&encoding, &train_bags)?;
        let (valid_enc, valid_unknown) = encode_all(&encoding, &valid_bags)?;
        let dims = match &encoding {
            Encoding::Lite(v) => {
                Dims { dim: c.train.dim, relations: labels.len(), vocab: v.len(), max_len: c.train.max_len, lite: true }
            }
            Encoding::Precomputed(arc) => {
                Dims { dim: arc.cols(), relations: labels.len(), vocab: 0, max_len: 0, lite: false }
            }
        };
        let init = ModelParams::<f32>::init(dims, c.train.init_range, &mut rng::stream(c.seed, "init"));
        let outcome = train(init, &train_enc, &valid_enc, c.aggregation, &c.train, c.seed)?;
        checkpoint::save(&outcome.params, &a.checkpoint())?;
        let meta = CheckpointMeta {
            scheme: c.scheme,
            aggregation: c.aggregation,
            encoder: c.encoder.kind,
            archive: c.encoder.archive.clone(),
            labels: labels.names().to_vec(),
            tokens: match &encoding {
                Encoding::Lite(v) => v.tokens().to_vec(),
                Encoding::Precomputed(_) => Vec::new(),
            },
            seed: c.seed,
            best_epoch: outcome.best_epoch,
            train: c.train,
        };
        io::write_json(&a.checkpoint_meta(), &meta)?;
        let mut log = String::from("step,epoch,lr,train_loss,valid_loss\n");
        for s in &outcome.trace {
            let valid = s.valid_loss.map(|v| v.to_string()).unwrap_or_default();
            writeln!(log, "{},{},{},{},{}", s.step, s.epoch, s.lr, s.train_loss, valid).unwrap();
        }
        io::write_text(&a.train_log(), &log)?;
        let last_epoch = c.train.epochs.saturating_sub(1);
        let final_epoch_loss = {
            let xs: Vec<f64> = outcome.trace.iter().filter(|s| s.epoch == last_epoch).map(|s| s.train_loss).collect();
            if xs.is_empty() {
                f64::NAN
            } else {
                xs.iter().sum::<f64>() / xs.len() as f64
            }
        };
        // Loss of the returned parameters over the whole training set.
        let model_train_loss = mean_loss(&outcome.params, &train_enc, c.aggregation)?;
        let stats = json!({
            "train_bags": train_bags.len(),
            "valid_bags": valid_bags.len(),
            "steps": outcome.trace.len(),
            "params": outcome.params.num_params(),
            "best_epoch": outcome.best_epoch,
            "final_epoch_train_loss": finite_or_null(final_epoch_loss),
            "model_train_loss": finite_or_null(model_train_loss),
            "final_valid_loss": finite_or_null(outcome.trace.last().and_then(|s| s.valid_loss).unwrap_or(f64::NAN)),
            "valid_unknown_tokens": valid_unknown,
        });
        write_stats(&a.checkpoint(), &stats)?;
        Ok(stats)
    }

    fn eval(&self) -> Result<Value> {
        let a = &self.artifacts;
        let meta: CheckpointMeta = io::read_json(&a.checkpoint_meta())?;
        let params = checkpoint::load(&a.checkpoint())?;
        let base = RelationVocab::load(&a.vocab())?;
        let test_bags = load_bags(&a.split("test"))?;
        let encoding = match meta.encoder {
            EncoderChoice::Lite => Encoding::Lite(TokenVocab::from_tokens(meta.tokens.clone())),
            EncoderChoice::Precomputed => {
                let prefix = meta
                    .archive
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("precomputed checkpoint without archive".into()))?;
                Encoding::Precomputed(Arc::new(EmbeddingArchive::load(prefix)?))
            }
        };
        let (encoded, unknown) = encode_all(&encoding, &test_bags)?;
        let scores: Vec<BagScores> = encoded
            .par_iter()
            .zip(&test_bags)
            .map(|(e, b)| {
                let p = bag_probs(&params, &e.sentences, meta.aggregation)?;
                Ok(BagScores {
                    group: b.group.clone(),
                    e1_is_head: b.sentences[0].e1_is_head,
                    probs: p.iter().map(|&x| x as f64).collect(),
                })
            })
            .collect::<Result<_>>()?;
        let candidates = evaluator::score_candidates(&scores, &base, meta.scheme)?;
        let gold = evaluator::gold_triples(&test_bags, &base, meta.scheme);
        let report = evaluator::evaluate(&candidates, &gold, &self.config.eval.ks)?;
        evaluator::write_predictions(&a.predictions(), &candidates)?;
        io::write_json(&a.report(), &report)?;
        evaluator::write_pr_curve(&a.pr_curve(), &report)?;
        let stats = json!({
            "scheme": meta.scheme,
            "aggregation": meta.aggregation,
            "auc": report.auc,
            "max_f1": report.max_f1,
            "p_at_k": report.p_at_k,
            "counts": report.counts,
            "test_bags": test_bags.len(),
            "unknown_tokens": unknown,
        });
        write_stats(&a.report(), &stats)?;
        Ok(stats)
    }

    fn synth(&self) -> Result<Value> {
        let c = &self.config;
        let data = synthgen::generate(&c.synth)?;
        let manifest = c.inputs.sentences.parent().unwrap_or(Path::new("")).join("synth_manifest.jsonl");
        let paths = SynthPaths {
            entities: c.inputs.entities.clone(),
            triples: c.inputs.triples.clone(),
            sentences: c.inputs.sentences.clone(),
            manifest,
        };
        data.write(&paths)?;
        let stats = json!({
            "entities": data.entities.len(),
            "triples": data.triples.len(),
            "sentences": data.sentences.len(),
            "expressive": data.manifest.iter().filter(|m| m.expressive).count(),
            "flipped": data.manifest.iter().filter(|m| m.flipped).count(),
        });
        write_stats(&paths.sentences, &stats)?;
        Ok(stats)
    }
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

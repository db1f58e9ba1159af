//! bagforge: a distant-supervision relation-extraction toolkit.
//!
//! The pipeline runs in stages, each a module here:
//!
//! * [`kb_store`] loads fact triples and entity surface forms.
//! * [`corpus_ingest`] filters raw sentences by length and uniqueness.
//! * [`mention_matcher`] finds dictionary mentions with a word-boundary trie.
//! * [`group_linker`] links sentences to ordered entity groups and samples
//!   open-world negatives.
//! * [`tagging`] marks entity spans with `$` / `^` in KB order (k-tag) or
//!   sentence order (s-tag).
//! * [`bag_builder`] composes fixed-size bags and leakage-free splits.
//! * [`mil_model`] is the bag-level multiple-instance classifier.
//! * [`evaluator`] ranks candidate triples and reports PR/AUC/F1/P@k.
//! * [`synthgen`] generates synthetic KB + corpus with controllable noise.
//! * [`pipeline`] wires the stages together behind one JSON config.

pub mod bag_builder;
pub mod corpus_ingest;
pub mod error;
pub mod evaluator;
pub mod group_linker;
pub mod io;
pub mod kb_store;
pub mod mention_matcher;
pub mod mil_model;
pub mod normalize;
pub mod pipeline;
pub mod rng;
pub mod synthgen;
pub mod tagging;

pub use error::{Error, Result};

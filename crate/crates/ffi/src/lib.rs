//! C ABI over `bagforge`.
//!
//! Handles are opaque pointers created by `*_new` / `*_load` and released by
//! the matching `*_free`. Every fallible call returns a [`BfStatus`]; on
//! failure the message is available from [`bf_last_error`] on the same
//! thread until the next failing call. Strings returned through out
//! parameters are owned by the caller and released with [`bf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;
use std::sync::Arc;

use bagforge::evaluator::{self, Candidate, TripleKey};
use bagforge::mil_model::{bag_probs, checkpoint, Aggregation, EncodedSentence, ModelParams, SentenceInput};
use bagforge::pipeline::{Pipeline, PipelineConfig, Stage};
use bagforge::Error;
use ndarray::Array2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Bad configuration or input files.
    Validation = 3,
    Io = 4,
    /// Dimension or span mismatch.
    Shape = 5,
    Checkpoint = 6,
    BufferTooSmall = 7,
    /// Any other runtime failure.
    Runtime = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfAggregation {
    Avg = 0,
    Attn = 1,
}

impl From<BfAggregation> for Aggregation {
    fn from(a: BfAggregation) -> Self {
        match a {
            BfAggregation::Avg => Aggregation::Avg,
            BfAggregation::Attn => Aggregation::Attn,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BfDims {
    pub dim: usize,
    pub relations: usize,
    /// Token vocabulary size; 0 for a precomputed-state model.
    pub vocab: usize,
    pub max_len: usize,
    pub lite: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BfMetrics {
    pub auc: f64,
    pub max_f1: f64,
    pub gold_retrieved: usize,
}

/// A configured pipeline bound to its work directory.
pub struct BfPipeline {
    inner: Pipeline,
}

/// A trained classifier loaded from a checkpoint.
pub struct BfModel {
    params: ModelParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', "\\0");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes escaped")));
}

fn status_of(e: &Error) -> BfStatus {
    match e {
        _ if e.is_validation() => BfStatus::Validation,
        Error::Io { .. } => BfStatus::Io,
        Error::Shape(_) | Error::SpanOutOfBounds { .. } => BfStatus::Shape,
        Error::Checkpoint(_) => BfStatus::Checkpoint,
        _ => BfStatus::Runtime,
    }
}

struct Fail(BfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> BfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside bagforge");
            BfStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> FfiResult<()> {
    if p.is_null() {
        Err(Fail(BfStatus::NullArgument, format!("`{name}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> FfiResult<&'a str> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| Fail(BfStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts(p, len))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "\\0")).expect("nul bytes escaped").into_raw()
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn bf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn bf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a pipeline from a JSON config (same schema as the CLI config
/// file; `seed` is required).
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bf_pipeline_new(config_json: *const c_char, out: *mut *mut BfPipeline) -> BfStatus {
    guard(|| {
        non_null(out, "out")?;
        let text = str_arg(config_json, "config_json")?;
        let value = serde_json::from_str(text).map_err(|e| Fail(BfStatus::Validation, format!("config JSON: {e}")))?;
        let config = PipelineConfig::resolve(Some(value), &[], None)?;
        let inner = Pipeline::new(config)?;
        *out = Box::into_raw(Box::new(BfPipeline { inner }));
        Ok(())
    })
}

/// Runs one stage by name (`kb`, `corpus`, ..., `eval`, `synth`) or `all`.
/// On success `*stats_json` receives the stage statistics as JSON; free it
/// with `bf_string_free`. `stats_json` may be NULL.
///
/// # Safety
/// `pipeline` must be live; `stage` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bf_pipeline_run(
    pipeline: *const BfPipeline,
    stage: *const c_char,
    stats_json: *mut *mut c_char,
) -> BfStatus {
    guard(|| {
        non_null(pipeline, "pipeline")?;
        let p = &(*pipeline).inner;
        let name = str_arg(stage, "stage")?;
        let stats = if name == "all" { p.run_all()? } else { p.run(name.parse::<Stage>()?)? };
        if !stats_json.is_null() {
            *stats_json = owned_string(stats.to_string());
        }
        Ok(())
    })
}

/// # Safety
/// `pipeline` must come from `bf_pipeline_new` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bf_pipeline_free(pipeline: *mut BfPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Loads a checkpoint written by the `train` stage.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_model_load(path: *const c_char, out: *mut *mut BfModel) -> BfStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let params = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(BfModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `bf_model_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bf_model_free(model: *mut BfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_model_dims(model: *const BfModel, out: *mut BfDims) -> BfStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let d = (*model).params.dims();
        *out = BfDims { dim: d.dim, relations: d.relations, vocab: d.vocab, max_len: d.max_len, lite: d.lite };
        Ok(())
    })
}

unsafe fn out_arg<'a, T>(p: *mut T, len: usize, name: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, name)?;
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn read_spans(spans: *const usize, n: usize) -> FfiResult<Vec<[(usize, usize); 2]>> {
    let flat = slice_arg(spans, 4 * n, "spans")?;
    Ok(flat.chunks_exact(4).map(|c| [(c[0], c[1]), (c[2], c[3])]).collect())
}

fn write_probs(
    model: &BfModel,
    sentences: &[EncodedSentence<f32>],
    agg: BfAggregation,
    out: &mut [f32],
) -> FfiResult<()> {
    let r = model.params.dims().relations;
    if out.len() < r {
        return Err(Fail(
            BfStatus::BufferTooSmall,
            format!("output holds {} values, model has {r} relations", out.len()),
        ));
    }
    let probs = bag_probs(&model.params, sentences, agg.into())?;
    out[..r].copy_from_slice(probs.as_slice().expect("contiguous"));
    Ok(())
}

/// Relation probabilities for one bag of token-id sentences (lite model).
///
/// Sentence `i` has `lens[i]` ids, concatenated in `ids`, starting with the
/// start sentinel. `spans` holds four inclusive row indices per sentence:
/// `$` start, `$` end, `^` start, `^` end. `out` receives one probability
/// per relation.
///
/// # Safety
/// Arrays must hold the lengths described above.
#[no_mangle]
pub unsafe extern "C" fn bf_model_bag_probs_tokens(
    model: *const BfModel,
    ids: *const u32,
    lens: *const usize,
    n_sentences: usize,
    spans: *const usize,
    aggregation: BfAggregation,
    out: *mut f32,
    out_len: usize,
) -> BfStatus {
    guard(|| {
        non_null(model, "model")?;
        let lens = slice_arg(lens, n_sentences, "lens")?;
        let ids = slice_arg(ids, lens.iter().sum(), "ids")?;
        let spans = read_spans(spans, n_sentences)?;
        let out = out_arg(out, out_len, "out")?;
        let mut at = 0;
        let sentences: Vec<_> = lens
            .iter()
            .zip(spans)
            .map(|(&n, spans)| {
                let s = EncodedSentence { input: SentenceInput::Tokens(ids[at..at + n].to_vec()), spans };
                at += n;
                s
            })
            .collect();
        let model = &*model;
        if let Some(bad) = sentences.iter().find_map(|s| match &s.input {
            SentenceInput::Tokens(t) => t.iter().find(|&&i| i as usize >= model.params.dims().vocab),
            SentenceInput::States(_) => None,
        }) {
            return Err(Fail(BfStatus::Shape, format!("token id {bad} outside the vocabulary")));
        }
        write_probs(model, &sentences, aggregation, out)
    })
}

/// Relation probabilities for one bag of frozen state matrices.
///
/// Sentence `i` is a `rows[i] × dim` row-major block of `states`. `spans`
/// is laid out as in `bf_model_bag_probs_tokens`.
///
/// # Safety
/// Arrays must hold the lengths described above.
#[no_mangle]
pub unsafe extern "C" fn bf_model_bag_probs_states(
    model: *const BfModel,
    states: *const f32,
    rows: *const usize,
    n_sentences: usize,
    spans: *const usize,
    aggregation: BfAggregation,
    out: *mut f32,
    out_len: usize,
) -> BfStatus {
    guard(|| {
        non_null(model, "model")?;
        let model = &*model;
        let dim = model.params.dims().dim;
        let rows = slice_arg(rows, n_sentences, "rows")?;
        let states = slice_arg(states, rows.iter().sum::<usize>() * dim, "states")?;
        let spans = read_spans(spans, n_sentences)?;
        let out = out_arg(out, out_len, "out")?;
        let mut at = 0;
        let mut sentences = Vec::with_capacity(n_sentences);
        for (&n, spans) in rows.iter().zip(spans) {
            let block = &states[at * dim..(at + n) * dim];
            let h = Array2::from_shape_vec((n, dim), block.to_vec()).expect("block sized from rows");
            sentences.push(EncodedSentence { input: SentenceInput::States(Arc::new(h)), spans });
            at += n;
        }
        write_probs(model, &sentences, aggregation, out)
    })
}

/// Ranks `n` scored candidates (ties by index) and reports average
/// precision, max F1 and gold hits, where `is_gold[i] != 0` marks gold.
/// `n_gold` may exceed the flagged count to account for gold triples
/// absent from the candidates.
///
/// # Safety
/// `scores` and `is_gold` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bf_rank_metrics(
    scores: *const f64,
    is_gold: *const u8,
    n: usize,
    n_gold: usize,
    out: *mut BfMetrics,
) -> BfStatus {
    guard(|| {
        non_null(out, "out")?;
        let scores = slice_arg(scores, n, "scores")?;
        let flags = slice_arg(is_gold, n, "is_gold")?;
        let flagged = flags.iter().filter(|&&g| g != 0).count();
        if n_gold < flagged {
            return Err(Fail(
                BfStatus::Validation,
                format!("n_gold {n_gold} is below the {flagged} flagged candidates"),
            ));
        }
        let width = n.max(1).to_string().len();
        let head = |i: usize| format!("{i:0width$}");
        let candidates: Vec<Candidate> = scores
            .iter()
            .enumerate()
            .map(|(i, &score)| Candidate { head: head(i), rel: "r".into(), tail: "t".into(), score })
            .collect();
        let mut gold: std::collections::BTreeSet<TripleKey> =
            candidates.iter().zip(flags).filter(|(_, &g)| g != 0).map(|(c, _)| c.key()).collect();
        // Unranked gold shares a candidate's group under a relation never scored.
        for j in 0..n_gold - flagged {
            gold.insert((head(0), format!("unranked{j}"), "t".into()));
        }
        let report = evaluator::evaluate(&candidates, &gold, &[])?;
        *out = BfMetrics { auc: report.auc, max_f1: report.max_f1, gold_retrieved: report.counts.gold_retrieved };
        Ok(())
    })
}

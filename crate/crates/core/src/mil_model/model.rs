//! Forward and backward passes: sentence encoding, relation representation,
//! bag aggregation and the softmax classifier.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::params::ModelParams;
use super::params::REL_WINDOW;
use super::Scalar;
use crate::error::{Error, Result};
use crate::kb_store::RelId;
use crate::tagging::TokenSpan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Avg,
    Attn,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(Aggregation::Avg),
            "attn" => Ok(Aggregation::Attn),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Avg => "avg",
            Aggregation::Attn => "attn",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SentenceInput<T> {
    /// Token ids for the trainable encoder.
    Tokens(Vec<u32>),
    /// Frozen token states from an exported archive.
    States(Arc<Array2<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence<T> {
    pub input: SentenceInput<T>,
    /// `[$-span, ^-span]`, inclusive row indices.
    pub spans: [TokenSpan; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBag<T> {
    pub label: RelId,
    pub sentences: Vec<EncodedSentence<T>>,
}

pub(crate) fn softmax<T: Scalar>(x: ArrayView1<T>) -> Array1<T> {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let sm = softmax(row.view());
        row.assign(&sm);
    }
    out
}

fn outer<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> Array2<T> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

/// Index into the relative-position bias for query row `i`, key row `j`.
fn rel_offset(i: usize, j: usize) -> usize {
    let w = REL_WINDOW as isize;
    ((j as isize - i as isize).clamp(-w, w) + w) as usize
}

struct EncoderCache<T> {
    ids: Vec<u32>,
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    a: Array2<T>,
    z: Array2<T>,
}

/// Trainable encoder: embeddings plus positions through one single-head
/// self-attention block with a residual connection.
fn encode_tokens<T: Scalar>(p: &ModelParams<T>, ids: &[u32]) -> Result<(Array2<T>, EncoderCache<T>)> {
    let blk = p.attn.as_ref().ok_or_else(|| Error::Shape("token input requires the trainable encoder".into()))?;
    let n = ids.len();
    if n > p.pos.nrows() {
        return Err(Error::Shape(format!("sentence has {n} tokens, encoder supports {}", p.pos.nrows())));
    }
    let d = p.embed.ncols();
    let mut x = Array2::zeros((n, d));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&p.embed.row(id as usize));
        row += &p.pos.row(i);
    }
    let q = x.dot(&blk.wq.t()) + &blk.bq;
    let k = x.dot(&blk.wk.t()) + &blk.bk;
    let v = x.dot(&blk.wv.t()) + &blk.bv;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut logits = q.dot(&k.t()) * scale;
    for ((i, j), l) in logits.indexed_iter_mut() {
        *l += blk.rel_pos[rel_offset(i, j)];
    }
    let a = softmax_rows(&logits);
    let z = a.dot(&v);
    let h = &x + &(z.dot(&blk.wo.t()) + &blk.bo);
    Ok((h, EncoderCache { ids: ids.to_vec(), x, q, k, v, a, z }))
}

fn encode_tokens_backward<T: Scalar>(p: &ModelParams<T>, c: &EncoderCache<T>, dh: &Array2<T>, g: &mut ModelParams<T>) {
    let blk = p.attn.as_ref().expect("lite encoder");
    let gb = g.attn.as_mut().expect("lite encoder grads");
    let d = p.embed.ncols();
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();

    let mut dx = dh.clone();
    gb.wo += &dh.t().dot(&c.z);
    gb.bo += &dh.sum_axis(Axis(0));
    let dz = dh.dot(&blk.wo);
    let da = dz.dot(&c.v.t());
    let dv = c.a.t().dot(&dz);
    let rowdot = (&c.a * &da).sum_axis(Axis(1)).insert_axis(Axis(1));
    let dlogits = &c.a * &(&da - &rowdot);
    for ((i, j), &g) in dlogits.indexed_iter() {
        gb.rel_pos[rel_offset(i, j)] += g;
    }
    let ds = dlogits * scale;
    let dq = ds.dot(&c.k);
    let dk = ds.t().dot(&c.q);
    for (dy, w, gw, gbias) in [
        (&dq, &blk.wq, &mut gb.wq, &mut gb.bq),
        (&dk, &blk.wk, &mut gb.wk, &mut gb.bk),
        (&dv, &blk.wv, &mut gb.wv, &mut gb.bv),
    ] {
        *gw += &dy.t().dot(&c.x);
        *gbias += &dy.sum_axis(Axis(0));
        dx += &dy.dot(w);
    }
    for (i, &id) in c.ids.iter().enumerate() {
        let mut e = g.embed.row_mut(id as usize);
        e += &dx.row(i);
        let mut pos = g.pos.row_mut(i);
        pos += &dx.row(i);
    }
}

/// Token state matrix for one sentence: `(L + 1) × d`, row 0 the start
/// sentinel.
pub fn encode<T: Scalar>(p: &ModelParams<T>, input: &SentenceInput<T>) -> Result<Array2<T>> {
    match input {
        SentenceInput::Tokens(ids) => encode_tokens(p, ids).map(|(h, _)| h),
        SentenceInput::States(h) => {
            if h.ncols() != p.w1.ncols() {
                return Err(Error::Shape(format!("state width {} != model width {}", h.ncols(), p.w1.ncols())));
            }
            Ok(h.as_ref().clone())
        }
    }
}

struct RepCache<T> {
    rows: usize,
    spans: [TokenSpan; 2],
    cls: Array1<T>,
    pooled: [Array1<T>; 2],
    h0: Array1<T>,
    he: [Array1<T>; 2],
}

fn mean_rows<T: Scalar>(h: &ArrayView2<T>, span: TokenSpan) -> Array1<T> {
    h.slice(s![span.0..=span.1, ..]).mean_axis(Axis(0)).expect("nonempty span")
}

fn check_span(span: TokenSpan, rows: usize) -> Result<()> {
    if span.0 > span.1 || span.1 >= rows {
        return Err(Error::SpanOutOfBounds { span, rows });
    }
    Ok(())
}

fn rep_forward<T: Scalar>(
    p: &ModelParams<T>,
    h: ArrayView2<T>,
    spans: [TokenSpan; 2],
) -> Result<(Array1<T>, RepCache<T>)> {
    for s in spans {
        check_span(s, h.nrows())?;
    }
    let d = p.w1.nrows();
    if h.ncols() != p.w1.ncols() {
        return Err(Error::Shape(format!("state width {} != {}", h.ncols(), p.w1.ncols())));
    }
    let cls = h.row(0).to_owned();
    let h0 = (p.w1.dot(&cls) + &p.b1).mapv(T::tanh);
    let pooled = spans.map(|s| mean_rows(&h, s));
    let he = [0, 1].map(|i| (p.w2.dot(&pooled[i]) + &p.b2).mapv(T::tanh));
    let mut rep = Array1::zeros(3 * d);
    rep.slice_mut(s![..d]).assign(&h0);
    rep.slice_mut(s![d..2 * d]).assign(&he[0]);
    rep.slice_mut(s![2 * d..]).assign(&he[1]);
    Ok((rep, RepCache { rows: h.nrows(), spans, cls, pooled, h0, he }))
}

/// `[tanh(W1·H₀ + b1); tanh(W2·mean(H[$]) + b2); tanh(W2·mean(H[^]) + b2)]`.
pub fn relation_rep<T: Scalar>(p: &ModelParams<T>, h: ArrayView2<T>, spans: [TokenSpan; 2]) -> Result<Array1<T>> {
    rep_forward(p, h, spans).map(|(r, _)| r)
}

fn rep_backward<T: Scalar>(
    p: &ModelParams<T>,
    c: &RepCache<T>,
    drep: ArrayView1<T>,
    g: &mut ModelParams<T>,
) -> Array2<T> {
    let d = p.w1.nrows();
    let one = T::one();
    let mut dh = Array2::zeros((c.rows, p.w1.ncols()));

    let dpre0 = &drep.slice(s![..d]) * &c.h0.mapv(|v| one - v * v);
    g.w1 += &outer(dpre0.view(), c.cls.view());
    g.b1 += &dpre0;
    let mut row0 = dh.row_mut(0);
    row0 += &p.w1.t().dot(&dpre0);

    for i in 0..2 {
        let seg = drep.slice(s![(i + 1) * d..(i + 2) * d]);
        let dpre = &seg * &c.he[i].mapv(|v| one - v * v);
        g.w2 += &outer(dpre.view(), c.pooled[i].view());
        g.b2 += &dpre;
        let dpool = p.w2.t().dot(&dpre);
        let (a, b) = c.spans[i];
        let share = dpool / T::from_usize(b - a + 1).unwrap();
        for r in a..=b {
            let mut row = dh.row_mut(r);
            row += &share;
        }
    }
    dh
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagRep<T> {
    pub vector: Array1<T>,
    /// Attention weights, present in attention mode.
    pub alpha: Option<Array1<T>>,
}

/// Average, or selective attention with `query` as the relation row.
pub fn aggregate<T: Scalar>(reps: ArrayView2<T>, mode: Aggregation, query: Option<ArrayView1<T>>) -> Result<BagRep<T>> {
    if reps.nrows() == 0 {
        return Err(Error::EmptyBag);
    }
    match mode {
        Aggregation::Avg => Ok(BagRep { vector: reps.mean_axis(Axis(0)).expect("nonempty"), alpha: None }),
        Aggregation::Attn => {
            let q = query.ok_or_else(|| Error::Config("attention aggregation needs a relation row".into()))?;
            let alpha = softmax(reps.dot(&q).view());
            Ok(BagRep { vector: alpha.dot(&reps), alpha: Some(alpha) })
        }
    }
}

struct SentenceState<T> {
    enc: Option<EncoderCache<T>>,
    rep: RepCache<T>,
}

fn forward_sentences<T: Scalar>(
    p: &ModelParams<T>,
    sentences: &[EncodedSentence<T>],
) -> Result<(Array2<T>, Vec<SentenceState<T>>)> {
    if sentences.is_empty() {
        return Err(Error::EmptyBag);
    }
    let width = 3 * p.w1.nrows();
    let mut reps = Array2::zeros((sentences.len(), width));
    let mut states = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let (rep, state) = match &s.input {
            SentenceInput::Tokens(ids) => {
                let (h, enc) = encode_tokens(p, ids)?;
                let (rep, rc) = rep_forward(p, h.view(), s.spans)?;
                (rep, SentenceState { enc: Some(enc), rep: rc })
            }
            SentenceInput::States(h) => {
                let (rep, rc) = rep_forward(p, h.view(), s.spans)?;
                (rep, SentenceState { enc: None, rep: rc })
            }
        };
        if rep.len() != width {
            return Err(Error::Shape(format!("relation rep has {} dims, expected {width}", rep.len())));
        }
        reps.row_mut(i).assign(&rep);
        states.push(state);
    }
    Ok((reps, states))
}

/// Sentence relation representations, one row per sentence.
pub fn sentence_reps<T: Scalar>(p: &ModelParams<T>, sentences: &[EncodedSentence<T>]) -> Result<Array2<T>> {
    forward_sentences(p, sentences).map(|(r, _)| r)
}

/// Inference probabilities over relations. In attention mode every relation
/// is scored with its own attention-weighted bag vector.
pub fn bag_probs<T: Scalar>(
    p: &ModelParams<T>,
    sentences: &[EncodedSentence<T>],
    mode: Aggregation,
) -> Result<Array1<T>> {
    let reps = sentence_reps(p, sentences)?;
    probs_from_reps(p, reps.view(), mode)
}

pub fn probs_from_reps<T: Scalar>(p: &ModelParams<T>, reps: ArrayView2<T>, mode: Aggregation) -> Result<Array1<T>> {
    let logits = match mode {
        Aggregation::Avg => {
            let b = aggregate(reps, mode, None)?.vector;
            p.rel.dot(&b) + &p.rel_bias
        }
        Aggregation::Attn => {
            let mut logits = Array1::zeros(p.rel.nrows());
            for (r, row) in p.rel.rows().into_iter().enumerate() {
                let b = aggregate(reps, mode, Some(row))?.vector;
                logits[r] = row.dot(&b) + p.rel_bias[r];
            }
            logits
        }
    };
    if logits.len() != p.rel_bias.len() {
        return Err(Error::Shape("logit width".into()));
    }
    Ok(softmax(logits.view()))
}

/// Cross-entropy of the gold label. In attention mode the gold relation row
/// drives aggregation. Accumulates gradients into `grads` when given.
pub fn bag_loss<T: Scalar>(
    p: &ModelParams<T>,
    bag: &EncodedBag<T>,
    mode: Aggregation,
    grads: Option<&mut ModelParams<T>>,
) -> Result<T> {
    let label = bag.label.index();
    if label >= p.rel.nrows() {
        return Err(Error::Shape(format!("label {label} outside {} relations", p.rel.nrows())));
    }
    let (reps, states) = forward_sentences(p, &bag.sentences)?;
    let query = p.rel.row(label);
    let agg = aggregate(reps.view(), mode, (mode == Aggregation::Attn).then_some(query))?;
    let logits = p.rel.dot(&agg.vector) + &p.rel_bias;
    let probs = softmax(logits.view());
    let loss = -probs[label].ln();

    let Some(g) = grads else {
        return Ok(loss);
    };
    let mut dlogits = probs;
    dlogits[label] -= T::one();
    g.rel += &outer(dlogits.view(), agg.vector.view());
    g.rel_bias += &dlogits;
    let db = p.rel.t().dot(&dlogits);
    let m = reps.nrows();
    let mut dreps = Array2::zeros(reps.raw_dim());
    match &agg.alpha {
        None => {
            let share = &db / T::from_usize(m).unwrap();
            for mut row in dreps.rows_mut() {
                row.assign(&share);
            }
        }
        Some(alpha) => {
            let dalpha = reps.dot(&db);
            let mean = alpha.dot(&dalpha);
            let dscore = alpha * &(dalpha - mean);
            for i in 0..m {
                let mut row = dreps.row_mut(i);
                row.scaled_add(alpha[i], &db);
                row.scaled_add(dscore[i], &query);
            }
            let mut grow = g.rel.row_mut(label);
            grow += &dscore.dot(&reps);
        }
    }
    for (i, (s, st)) in bag.sentences.iter().zip(&states).enumerate() {
        let dh = rep_backward(p, &st.rep, dreps.row(i), g);
        if let (SentenceInput::Tokens(_), Some(enc)) = (&s.input, &st.enc) {
            encode_tokens_backward(p, enc, &dh, g);
        }
    }
    Ok(loss)
}

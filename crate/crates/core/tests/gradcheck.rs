mod common;

use std::sync::Arc;

use bagforge::kb_store::RelId;
use bagforge::mil_model::{grad_check, Aggregation, Dims, EncodedBag, EncodedSentence, ModelParams, SentenceInput};
use bagforge::rng;
use ndarray::Array2;
use rand::Rng as _;

fn lite_bag(vocab: usize, label: u32) -> EncodedBag<f64> {
    let mut r = rng::seeded(7);
    let sentences = (0..3)
        .map(|i| {
            let len = 8 + i;
            let ids: Vec<u32> = (0..len).map(|_| r.gen_range(0..vocab as u32)).collect();
            EncodedSentence { input: SentenceInput::Tokens(ids), spans: [(2, 2 + i % 2), (5, 6)] }
        })
        .collect();
    EncodedBag { label: RelId(label), sentences }
}

fn states_bag(cols: usize, label: u32) -> EncodedBag<f64> {
    let mut r = rng::seeded(8);
    let sentences = (0..3)
        .map(|i| {
            let rows = 7 + i;
            let h = Array2::from_shape_fn((rows, cols), |_| r.gen_range(-1.0..1.0));
            EncodedSentence { input: SentenceInput::States(Arc::new(h)), spans: [(1, 2), (4, 4 + i % 2)] }
        })
        .collect();
    EncodedBag { label: RelId(label), sentences }
}

fn check(p: &ModelParams<f64>, bag: &EncodedBag<f64>, mode: Aggregation) {
    let rep = grad_check(p, bag, mode, 1e-5, 200, &mut rng::seeded(3)).unwrap();
    println!("{mode}: {:?}", rep);
    assert!(rep.checked >= 200);
    assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
}

#[test]
fn lite_encoder_gradients() {
    let dims = Dims { dim: 6, relations: 4, vocab: 12, max_len: 16, lite: true };
    let p = ModelParams::<f64>::init(dims, 0.5, &mut rng::seeded(1));
    for mode in [Aggregation::Avg, Aggregation::Attn] {
        check(&p, &lite_bag(12, 2), mode);
    }
}

#[test]
fn precomputed_gradients() {
    let dims = Dims { dim: 8, relations: 4, vocab: 0, max_len: 0, lite: false };
    let p = ModelParams::<f64>::init(dims, 0.5, &mut rng::seeded(1));
    for mode in [Aggregation::Avg, Aggregation::Attn] {
        check(&p, &states_bag(8, 1), mode);
    }
}

#[test]
fn gradients_on_pipeline_bags() {
    let dir = tempfile::tempdir().unwrap();
    let run = common::run_pipeline(common::small_config(dir.path(), "work", 3)).unwrap();
    let p = &run.pipeline;
    let relations = bagforge::kb_store::RelationVocab::load(&p.artifacts.labels()).unwrap().len();

    let (vocab, lite) = common::lite_bag(p);
    let max_len = lite
        .sentences
        .iter()
        .map(|s| match &s.input {
            SentenceInput::Tokens(ids) => ids.len(),
            SentenceInput::States(h) => h.nrows(),
        })
        .max()
        .unwrap();
    let dims = Dims { dim: 6, relations, vocab: vocab.len(), max_len, lite: true };
    let params = ModelParams::<f64>::init(dims, 0.5, &mut rng::seeded(5));
    for mode in [Aggregation::Avg, Aggregation::Attn] {
        check(&params, &lite, mode);
    }

    let (_, pre) = common::stub_archive_bag(p, 8, &dir.path().join("stub"));
    let dims = Dims { dim: 8, relations, vocab: 0, max_len: 0, lite: false };
    let params = ModelParams::<f64>::init(dims, 0.5, &mut rng::seeded(6));
    for mode in [Aggregation::Avg, Aggregation::Attn] {
        check(&params, &pre, mode);
    }
}

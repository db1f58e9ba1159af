mod common;

use bagforge::group_linker::Polarity;
use bagforge::mil_model::{aggregate, bag_probs, Aggregation, Dims, EncodedSentence, ModelParams, SentenceInput};
use bagforge::rng;
use bagforge::tagging::{tag_sentence, DefaultTokenizer, MatchView, TaggingScheme, Tokenizer, CARET, DOLLAR};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

const TOL: f64 = 1e-6;

#[test]
fn aggregation_invariants_over_random_bags() {
    let d = common::aggregation_deviation(1000, 21);
    println!("{d:?}");
    assert!(d.max() <= TOL, "{d:?}");
}

fn reps_strategy() -> impl Strategy<Value = (Array2<f64>, Array1<f64>)> {
    (1usize..10, 1usize..8).prop_flat_map(|(m, w)| {
        (
            prop::collection::vec(-3.0f64..3.0, m * w).prop_map(move |v| Array2::from_shape_vec((m, w), v).unwrap()),
            prop::collection::vec(-3.0f64..3.0, w).prop_map(Array1::from),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn attention_ignores_a_shared_offset((reps, q) in reps_strategy(), shift in -5.0f64..5.0) {
        // Adding the same vector to every row moves every logit by the same
        // amount, which the softmax cancels.
        let shifted = &reps + &q.mapv(|x| x * shift);
        let a = aggregate(reps.view(), Aggregation::Attn, Some(q.view())).unwrap().alpha.unwrap();
        let b = aggregate(shifted.view(), Aggregation::Attn, Some(q.view())).unwrap().alpha.unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= TOL);
        }
    }

    #[test]
    fn attention_weights_form_a_distribution((reps, q) in reps_strategy()) {
        let alpha = aggregate(reps.view(), Aggregation::Attn, Some(q.view())).unwrap().alpha.unwrap();
        prop_assert!((alpha.sum() - 1.0).abs() <= TOL);
        prop_assert!(alpha.iter().all(|&a| (0.0..=1.0).contains(&a)));
        let v = aggregate(reps.view(), Aggregation::Attn, Some(q.view())).unwrap().vector;
        let expect = alpha.dot(&reps);
        for (x, y) in v.iter().zip(&expect) {
            prop_assert!((x - y).abs() <= TOL);
        }
    }

    #[test]
    fn bag_probabilities_have_relation_shape(
        lens in prop::collection::vec(6usize..12, 1..4),
        relations in 2usize..6,
        seed in any::<u64>(),
    ) {
        let dims = Dims { dim: 4, relations, vocab: 9, max_len: 16, lite: true };
        let mut r = rng::seeded(seed);
        let p = ModelParams::<f64>::init(dims, 0.5, &mut r);
        let sentences: Vec<EncodedSentence<f64>> = lens
            .iter()
            .map(|&n| EncodedSentence {
                input: SentenceInput::Tokens((0..n as u32).map(|i| i % 9).collect()),
                spans: [(1, 1), (3, 4)],
            })
            .collect();
        for mode in [Aggregation::Avg, Aggregation::Attn] {
            let probs = bag_probs(&p, &sentences, mode).unwrap();
            prop_assert_eq!(probs.len(), relations);
            prop_assert!((probs.sum() - 1.0).abs() <= TOL);
            prop_assert!(probs.iter().all(|&x| x > 0.0));
        }
    }
}

/// A sentence of distinct words with two single- or multi-word entity spans.
fn sentence_strategy() -> impl Strategy<Value = (Vec<String>, (usize, usize), (usize, usize))> {
    (4usize..12)
        .prop_flat_map(|n| (prop::collection::vec("[a-z]{1,5}[,.]?", n), 0..n, 1usize..3, 0..n, 1usize..3))
        .prop_filter_map("overlapping spans", |(words, a, la, b, lb)| {
            let n = words.len();
            let sa = (a, (a + la).min(n) - 1);
            let sb = (b, (b + lb).min(n) - 1);
            (sa.1 < sb.0 || sb.1 < sa.0).then_some((words, sa, sb))
        })
}

/// Character span covering words `first..=last`, excluding trailing
/// punctuation on the last word.
fn char_span(words: &[String], (first, last): (usize, usize)) -> (usize, usize) {
    let start: usize = words[..first].iter().map(|w| w.chars().count() + 1).sum();
    let end: usize = words[..=last].iter().map(|w| w.chars().count() + 1).sum::<usize>() - 1;
    let trailing = words[last].chars().rev().take_while(|c| !c.is_alphanumeric()).count();
    (start, end - trailing)
}

fn marked(tokens: &[String], span: (usize, usize)) -> String {
    DefaultTokenizer.detokenize(&tokens[span.0..=span.1])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tagging_round_trips_and_orders_markers((words, hs, ts) in sentence_strategy()) {
        let text = words.join(" ");
        let view = MatchView {
            sid: "s",
            head_cui: "H",
            tail_cui: "T",
            polarity: Polarity::Positive,
            head_span: char_span(&words, hs),
            tail_span: char_span(&words, ts),
        };
        let k = tag_sentence(&view, &text, &DefaultTokenizer, TaggingScheme::KTag).unwrap();
        let s = tag_sentence(&view, &text, &DefaultTokenizer, TaggingScheme::STag).unwrap();
        for t in [&k, &s] {
            prop_assert_eq!(t.untagged_text(&DefaultTokenizer), text.clone());
            prop_assert_eq!(&t.tokens[t.dollar_span.0 - 1], DOLLAR);
            prop_assert_eq!(&t.tokens[t.dollar_span.1 + 1], DOLLAR);
            prop_assert_eq!(&t.tokens[t.caret_span.0 - 1], CARET);
            prop_assert_eq!(&t.tokens[t.caret_span.1 + 1], CARET);
            prop_assert_eq!(t.e1_is_head, hs.0 < ts.0);
            prop_assert_eq!(t.tokens.len(), k.tokens.len());
        }
        // k-tag: `$` is always the head, whatever the surface order.
        let head_text = marked(&k.tokens, k.dollar_span);
        let tail_text = marked(&k.tokens, k.caret_span);
        prop_assert_eq!(k.head_tail_spans(), (k.dollar_span, k.caret_span));
        prop_assert_eq!(&head_text, &text[view.head_span.0..view.head_span.1]);
        // s-tag: `$` is whichever entity comes first.
        prop_assert!(s.dollar_span.0 < s.caret_span.0);
        let (sh, st) = s.head_tail_spans();
        prop_assert_eq!(marked(&s.tokens, sh), head_text);
        prop_assert_eq!(marked(&s.tokens, st), tail_text);
        // Head first: the two schemes produce identical tokens.
        if hs.0 < ts.0 {
            prop_assert_eq!(&k.tokens, &s.tokens);
        }
    }
}

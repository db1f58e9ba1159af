mod common;

use std::collections::BTreeSet;

use bagforge::evaluator::{self, Candidate, TripleKey};
use bagforge::kb_store::{EntityRecord, EntitySet};
use bagforge::mention_matcher::MentionIndex;
use proptest::prelude::*;

#[test]
fn matcher_agrees_with_naive_scan() {
    let mentions = common::matcher_oracle(1000, 11).unwrap_or_else(|e| panic!("{e}"));
    // The generator must actually exercise matching.
    assert!(mentions > 500, "only {mentions} mentions over 1000 instances");
}

#[test]
fn metrics_agree_with_brute_force() {
    common::metric_oracle(1000, 12).unwrap_or_else(|e| panic!("{e}"));
}

#[test]
fn naive_scan_examples() {
    let mut set = EntitySet::new();
    set.insert(EntityRecord::new("A", ["new york"]).unwrap());
    set.insert(EntityRecord::new("B", ["york"]).unwrap());
    set.insert(EntityRecord::new("C", ["New York", "ny"]).unwrap());
    let got = common::naive_mentions(&set, "From New York to york, not nyc.");
    assert_eq!(got, vec![(0, 5, 13), (2, 5, 13), (1, 17, 21)]);
}

#[test]
fn brute_metrics_hand_example() {
    // Ranked: a(0.9, gold) b(0.5) c(0.5, gold) with c after b on the tie.
    let c = |rel: &str, score| Candidate { head: "h".into(), rel: rel.into(), tail: "t".into(), score };
    let cands = vec![c("c", 0.5), c("a", 0.9), c("b", 0.5)];
    let gold: BTreeSet<TripleKey> = [("h".into(), "a".into(), "t".into()), ("h".into(), "c".into(), "t".into())].into();
    let m = common::brute_metrics(&cands, &gold, &[1, 2, 5]);
    assert_eq!(m.auc, (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(m.p_at_k, vec![1.0, 0.5, 2.0 / 3.0]);
    assert_eq!(m.gold_retrieved, 2);
    let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
    assert_eq!(m.max_f1, f(1.0, 0.5).max(f(2.0 / 3.0, 1.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matcher_oracle_on_arbitrary_text(
        forms in prop::collection::vec(prop::collection::vec("[aAbé -]{1,4}", 1..3), 1..5),
        text in "[aAbBé .-]{0,30}",
    ) {
        let mut set = EntitySet::new();
        for (i, f) in forms.iter().enumerate() {
            if let Some(rec) = EntityRecord::new(format!("E{i}"), f) {
                set.insert(rec);
            }
        }
        let index = MentionIndex::build(&set);
        let got: Vec<(u32, usize, usize)> =
            index.find_mentions(&text).iter().map(|m| (m.entity.0, m.start, m.end)).collect();
        prop_assert_eq!(got, common::naive_mentions(&set, &text));
    }

    #[test]
    fn metric_oracle_on_arbitrary_scores(
        scores in prop::collection::vec((0u8..4, any::<bool>()), 1..60),
        ks in prop::collection::vec(1usize..80, 1..4),
    ) {
        let cands: Vec<Candidate> = scores
            .iter()
            .enumerate()
            .map(|(i, &(s, _))| Candidate {
                head: format!("h{}", i % 5),
                rel: format!("r{i}"),
                tail: format!("t{}", i % 5),
                score: f64::from(s) / 3.0,
            })
            .collect();
        let gold: BTreeSet<TripleKey> =
            cands.iter().zip(&scores).filter(|(_, &(_, g))| g).map(|(c, _)| c.key()).collect();
        let want = common::brute_metrics(&cands, &gold, &ks);
        let got = evaluator::evaluate(&cands, &gold, &ks).unwrap();
        prop_assert_eq!(got.auc, want.auc);
        prop_assert_eq!(got.max_f1, want.max_f1);
        let p: Vec<f64> = got.p_at_k.iter().map(|x| x.precision).collect();
        prop_assert_eq!(p, want.p_at_k);
    }
}

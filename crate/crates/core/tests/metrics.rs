use std::collections::BTreeMap;

use ehat_core::metrics::{
    bleu_n, brevity_penalty, cider_d, corpus_eval, rouge_l, CaptionPair, CiderCorpusStats, ReferenceSet, ROUGE_BETA,
};
use ehat_core::Error;
use proptest::prelude::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn brevity_penalty_half_length() {
    assert!((brevity_penalty(5, 10) - (-1f64).exp()).abs() < 1e-9);
    assert_eq!(brevity_penalty(10, 10), 1.0);
    assert_eq!(brevity_penalty(12, 10), 1.0);
    let r = toks("a b c d e f g h i j");
    let c = toks("a b c d e");
    assert!((bleu_n(&c, &[r], 1, false).unwrap() - (-1f64).exp()).abs() < 1e-9);
}

#[test]
fn bleu_perfect_and_zero() {
    let r = toks("two red circles and a blue square");
    assert_eq!(bleu_n(&r, std::slice::from_ref(&r), 4, false).unwrap(), 1.0);
    assert_eq!(bleu_n(&toks("x y z"), std::slice::from_ref(&r), 1, false).unwrap(), 0.0);
    // unigrams match but no bigram does
    assert_eq!(
        bleu_n(&toks("square blue a"), std::slice::from_ref(&r), 2, false).unwrap(),
        0.0
    );
    assert!(bleu_n(&toks("square blue a"), std::slice::from_ref(&r), 2, true).unwrap() > 0.0);
    assert_eq!(
        bleu_n::<String, String>(&[], std::slice::from_ref(&r), 4, false).unwrap(),
        0.0
    );
    assert!(bleu_n(&r, std::slice::from_ref(&r), 5, false).is_err());
}

#[test]
fn bleu_clips_repeated_words() {
    // "the the the" against "the cat": one clipped match of three
    let v = bleu_n(&toks("the the the"), &[toks("the cat")], 1, false).unwrap();
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn rouge_hand_cases() {
    let v = rouge_l(&toks("a b c"), &[toks("a c")], 1.0);
    assert!((v - 0.8).abs() < 1e-9);
    assert_eq!(rouge_l(&toks("x y"), &[toks("x y")], ROUGE_BETA), 1.0);
    assert_eq!(rouge_l(&toks("x y"), &[toks("p q")], ROUGE_BETA), 0.0);
    assert_eq!(rouge_l::<String, String>(&[], &[toks("p q")], ROUGE_BETA), 0.0);
}

/// Plain tf-idf/cosine CIDEr-D over a handful of captions, written from the
/// definition without sharing code with the library.
fn cider_oracle(cand: &[&str], refs: &[&str], corpus: &[&[&str]]) -> f64 {
    let grams = |t: &[&str], n: usize| -> Vec<String> {
        if t.len() < n {
            return vec![];
        }
        t.windows(n).map(|w| w.join(" ")).collect()
    };
    let docs = corpus.len() as f64;
    let df = |g: &str, n: usize| -> f64 {
        let c = corpus
            .iter()
            .filter(|img| {
                img.iter().any(|r| {
                    grams(&r.split_whitespace().collect::<Vec<_>>(), n)
                        .iter()
                        .any(|x| x == g)
                })
            })
            .count();
        (c as f64).max(1.0)
    };
    let vecf = |t: &[&str], n: usize| -> Vec<(String, f64)> {
        let gs = grams(t, n);
        let mut uniq: Vec<String> = gs.clone();
        uniq.sort();
        uniq.dedup();
        uniq.into_iter()
            .map(|g| {
                let tf = gs.iter().filter(|x| **x == g).count() as f64;
                let w = tf * (docs.ln() - df(&g, n).ln());
                (g, w)
            })
            .collect()
    };
    let mut total = 0.0;
    for r in refs {
        let rt: Vec<&str> = r.split_whitespace().collect();
        let delta = cand.len() as f64 - rt.len() as f64;
        let pen = (-(delta * delta) / 72.0).exp();
        let mut s = 0.0;
        let mut orders = 0.0;
        for n in 1..=4 {
            let (vc, vr) = (vecf(cand, n), vecf(&rt, n));
            if vc.is_empty() && vr.is_empty() {
                continue;
            }
            orders += 1.0;
            let nc: f64 = vc.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            let nr: f64 = vr.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            if nc == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = vc
                .iter()
                .filter_map(|(g, a)| vr.iter().find(|(h, _)| h == g).map(|(_, b)| a.min(*b) * b))
                .sum();
            s += dot / (nc * nr) * pen;
        }
        total += s / orders;
    }
    10.0 * total / refs.len() as f64
}

fn stats_of(corpus: &[&[&str]]) -> CiderCorpusStats {
    let refs: Vec<Vec<Vec<String>>> = corpus.iter().map(|img| img.iter().map(|r| toks(r)).collect()).collect();
    CiderCorpusStats::build(&refs)
}

#[test]
fn cider_identical_caption_scores_ten() {
    let corpus: [&[&str]; 2] = [&["a b c"], &["d e f"]];
    let stats = stats_of(&corpus);
    let v = cider_d(&toks("a b c"), &[toks("a b c")], &stats);
    let oracle = cider_oracle(&["a", "b", "c"], &["a b c"], &corpus);
    assert!((oracle - 10.0).abs() < 1e-9);
    assert!((v - 10.0).abs() < 1e-9, "{v}");
}

#[test]
fn cider_partial_match_against_hand_value() {
    // unigram cosine 2/3, bigram 1/2, trigram 0; mean over three orders
    let corpus: [&[&str]; 2] = [&["a b c"], &["d e f"]];
    let stats = stats_of(&corpus);
    let v = cider_d(&toks("a b d"), &[toks("a b c")], &stats);
    assert!((v - 70.0 / 18.0).abs() < 1e-9, "{v}");
    assert!((cider_oracle(&["a", "b", "d"], &["a b c"], &corpus) - v).abs() < 1e-9);
}

#[test]
fn cider_matches_oracle_on_longer_corpus() {
    let corpus: [&[&str]; 3] = [
        &["two red circles and a blue square", "a blue square and two red circles"],
        &["one green triangle", "a green triangle"],
        &["three blue squares", "blue squares"],
    ];
    let stats = stats_of(&corpus);
    let cands = [
        "two red circles and a green triangle",
        "one green triangle",
        "blue blue squares",
    ];
    for (i, c) in cands.iter().enumerate() {
        let ct = toks(c);
        let refs: Vec<Vec<String>> = corpus[i].iter().map(|r| toks(r)).collect();
        let got = cider_d(&ct, &refs, &stats);
        let cw: Vec<&str> = c.split_whitespace().collect();
        let want = cider_oracle(&cw, corpus[i], &corpus);
        assert!((got - want).abs() < 1e-9, "{c}: {got} vs {want}");
    }
}

#[test]
fn cider_empty_candidate() {
    let corpus: [&[&str]; 2] = [&["a b c"], &["d e f"]];
    assert_eq!(
        cider_d::<String, String>(&[], &[toks("a b c")], &stats_of(&corpus)),
        0.0
    );
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]).prop_map(String::from)
}

fn caption() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_ignore_reference_order(c in caption(), refs in prop::collection::vec(caption(), 1..4), other in prop::collection::vec(caption(), 1..3)) {
        let mut rev = refs.clone();
        rev.reverse();
        let corpus = vec![refs.clone(), other.clone()];
        let stats = CiderCorpusStats::build(&corpus);
        for n in 1..=4 {
            prop_assert_eq!(bleu_n(&c, &refs, n, false).unwrap(), bleu_n(&c, &rev, n, false).unwrap());
        }
        prop_assert_eq!(rouge_l(&c, &refs, ROUGE_BETA), rouge_l(&c, &rev, ROUGE_BETA));
        let stats_rev = CiderCorpusStats::build(&[rev.clone(), other]);
        let (x, y) = (cider_d(&c, &refs, &stats), cider_d(&c, &rev, &stats_rev));
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn extra_reference_never_lowers_rouge(c in caption(), refs in prop::collection::vec(caption(), 1..4), extra in caption()) {
        let before = rouge_l(&c, &refs, ROUGE_BETA);
        let mut more = refs.clone();
        more.push(extra);
        prop_assert!(rouge_l(&c, &more, ROUGE_BETA) >= before);
    }

    #[test]
    fn exact_match_is_maximal(c in caption()) {
        prop_assert_eq!(bleu_n(&c, std::slice::from_ref(&c), 1, false).unwrap(), 1.0);
        prop_assert_eq!(rouge_l(&c, std::slice::from_ref(&c), ROUGE_BETA), 1.0);
        let stats = CiderCorpusStats::build(&[vec![c.clone()], vec![vec!["z".to_string()]]]);
        let v = cider_d(&c, std::slice::from_ref(&c), &stats);
        prop_assert!((v - 10.0).abs() < 1e-9, "{}", v);
    }

    #[test]
    fn metrics_bounded(c in caption(), refs in prop::collection::vec(caption(), 1..4)) {
        let stats = CiderCorpusStats::build(std::slice::from_ref(&refs));
        for n in 1..=4 {
            let b = bleu_n(&c, &refs, n, false).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
        let r = rouge_l(&c, &refs, ROUGE_BETA);
        prop_assert!((0.0..=1.0).contains(&r));
        let v = cider_d(&c, &refs, &stats);
        prop_assert!((0.0..=10.0 + 1e-9).contains(&v));
    }
}

fn table_inputs(ids: &[usize]) -> (BTreeMap<usize, CaptionPair>, BTreeMap<usize, ReferenceSet>) {
    let a = ["one red circle", "two blue squares", "a green triangle"];
    let b = [
        "circle_b red_b one_b",
        "squares_b blue_b two_b",
        "triangle_b green_b a_b",
    ];
    let mut cands = BTreeMap::new();
    let mut refs = BTreeMap::new();
    for &i in ids {
        cands.insert(
            i,
            CaptionPair {
                a: toks(a[i]),
                b: toks(b[i]),
            },
        );
        refs.insert(
            i,
            ReferenceSet {
                a: vec![toks(a[i]), toks("something else")],
                b: vec![toks(b[i])],
            },
        );
    }
    (cands, refs)
}

#[test]
fn corpus_eval_perfect_and_deterministic() {
    let (c, r) = table_inputs(&[0, 1, 2]);
    let t = corpus_eval(&c, &r).unwrap();
    assert_eq!(t.lang_a.bleu1, 1.0);
    assert_eq!(t.lang_b.bleu1, 1.0);
    assert_eq!(t.images, 3);
    assert_eq!(t, corpus_eval(&c, &r).unwrap());
}

#[test]
fn corpus_eval_errors() {
    let (c, mut r) = table_inputs(&[0, 1]);
    r.remove(&1);
    assert!(matches!(corpus_eval(&c, &r), Err(Error::Data(m)) if m.contains("[1]")));
    assert!(corpus_eval(&BTreeMap::new(), &BTreeMap::new()).is_err());
}

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

type Corpus = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>);

fn random_sentence(rng: &mut ChaCha8Rng, min: usize) -> Vec<String> {
    let words = ["a", "b", "c", "d", "e"];
    let len = rng.random_range(min..9);
    (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
}

fn random_corpus(seed: u64, items: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..items {
        cands.push(random_sentence(&mut rng, 1));
        let k = rng.random_range(1..4);
        refs.push((0..k).map(|_| random_sentence(&mut rng, 1)).collect());
    }
    (cands, refs)
}

// ---- direct-formula oracles --------------------------------------------------

/// All n-grams of a sentence as space-joined strings, in order, with repeats.
fn grams(s: &[String], n: usize) -> Vec<String> {
    if s.len() < n {
        return vec![];
    }
    (0..=s.len() - n).map(|i| s[i..i + n].join(" ")).collect()
}

fn count(list: &[String], g: &str) -> usize {
    list.iter().filter(|x| x.as_str() == g).count()
}

fn bleu_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    let mut product = 1.0;
    for k in 1..=n {
        let (mut num, mut den) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = grams(c, k);
            den += cg.len();
            let mut distinct = cg.clone();
            distinct.sort();
            distinct.dedup();
            for g in &distinct {
                let best = rs.iter().map(|r| count(&grams(r, k), g)).max().unwrap();
                num += count(&cg, g).min(best);
            }
        }
        if num == 0 {
            return 0.0;
        }
        product *= num as f64 / den as f64;
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let mut r = 0;
    for (cand, rs) in cands.iter().zip(refs) {
        let mut best = rs[0].len();
        for x in rs {
            let (d, bd) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < bd || (d == bd && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * product.powf(1.0 / n as f64)
}

fn cider_oracle(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> f64 {
    let big_n = cands.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let df = |g: &str| -> f64 {
            let d = refs.iter().filter(|rs| rs.iter().any(|r| count(&grams(r, n), g) > 0)).count();
            d.max(1) as f64
        };
        let vec_of = |s: &[String]| -> BTreeMap<String, f64> {
            let gs = grams(s, n);
            let mut m = BTreeMap::new();
            for g in &gs {
                m.insert(g.clone(), count(&gs, g) as f64 * (big_n / df(g)).ln());
            }
            m
        };
        for (c, rs) in cands.iter().zip(refs) {
            let cv = vec_of(c);
            let mut acc = 0.0;
            for r in rs {
                let rv = vec_of(r);
                let dot: f64 = cv.iter().map(|(g, x)| x * rv.get(g).unwrap_or(&0.0)).sum();
                let norm = |v: &BTreeMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
                let (a, b) = (norm(&cv), norm(&rv));
                acc += if a > 0.0 && b > 0.0 { dot / (a * b) } else { 0.0 };
            }
            total += acc / rs.len() as f64;
        }
    }
    total / 4.0 / big_n * 10.0
}

fn meteor_oracle(c: &[String], r: &[String]) -> f64 {
    // alignment pairs: each candidate token takes the earliest free equal reference token
    let mut taken = vec![false; r.len()];
    let mut pairs: Vec<(usize, usize)> = vec![];
    for i in 0..c.len() {
        for j in 0..r.len() {
            if !taken[j] && r[j] == c[i] {
                taken[j] = true;
                pairs.push((i, j));
                break;
            }
        }
    }
    if pairs.is_empty() {
        return 0.0;
    }
    let breaks = pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let chunks = (breaks + 1) as f64;
    let m = pairs.len() as f64;
    let (p, rr) = (m / c.len() as f64, m / r.len() as f64);
    let f = p * rr / (0.9 * p + 0.1 * rr);
    f * (1.0 - 0.5 * (chunks / m).powi(3))
}

// ---- BLEU ---------------------------------------------------------------------

#[test]
fn identical_corpus_scores_one() {
    let c = vec![toks("the cat sat on the mat"), toks("a dog ran home now")];
    let r: Vec<Vec<Vec<String>>> = c.iter().map(|s| vec![s.clone()]).collect();
    for n in 1..=4 {
        assert_abs_diff_eq!(bleu(&c, &r, n).unwrap(), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn no_shared_four_gram_gives_zero() {
    let c = vec![toks("a b c d e")];
    let r = vec![vec![toks("a b c x d e")]];
    assert_eq!(bleu(&c, &r, 4).unwrap(), 0.0);
    assert!(bleu(&c, &r, 2).unwrap() > 0.0);
}

#[test]
fn brevity_penalty_applies_to_short_candidates() {
    let c = vec![toks("a b c")];
    let r = vec![vec![toks("a b c d e f")]];
    assert_abs_diff_eq!(bleu(&c, &r, 1).unwrap(), (1.0f64 - 2.0).exp(), epsilon = 1e-12);
}

#[test]
fn bleu_matches_oracle_on_random_corpora() {
    for seed in 0..25 {
        let (c, r) = random_corpus(seed, 1 + seed as usize % 5);
        for n in 1..=4 {
            assert_abs_diff_eq!(bleu(&c, &r, n).unwrap(), bleu_oracle(&c, &r, n), epsilon = 1e-9);
        }
    }
}

#[test]
fn bleu_rejects_empty_and_misaligned_corpora() {
    assert!(bleu(&[], &[], 4).is_err());
    assert!(bleu(&[toks("a")], &[], 1).is_err());
    assert!(bleu(&[toks("a")], &[vec![toks("a")]], 5).is_err());
}

// ---- CIDEr ----------------------------------------------------------------------

#[test]
fn cider_matches_oracle_on_random_corpora() {
    for seed in 100..125 {
        let (c, r) = random_corpus(seed, 2 + seed as usize % 4);
        assert_abs_diff_eq!(cider(&c, &r).unwrap(), cider_oracle(&c, &r), epsilon = 1e-6);
    }
}

#[test]
fn cider_is_zero_without_shared_ngrams() {
    let c = vec![toks("x y z"), toks("p q")];
    let r = vec![vec![toks("a b c")], vec![toks("d e")]];
    assert_eq!(cider(&c, &r).unwrap(), 0.0);
}

#[test]
fn cider_ignores_reference_order() {
    let (c, mut r) = random_corpus(7, 4);
    let before = cider(&c, &r).unwrap();
    for rs in &mut r {
        rs.reverse();
    }
    assert_abs_diff_eq!(cider(&c, &r).unwrap(), before, epsilon = 1e-12);
}

#[test]
fn cider_rejects_single_item_corpora() {
    let err = cider(&[toks("a b")], &[vec![toks("a b")]]).unwrap_err();
    assert!(err.to_string().contains("two items"));
}

// ---- METEOR-lite -------------------------------------------------------------------

#[test]
fn identical_four_tokens_score_the_fragmentation_limit() {
    let s = toks("open the fridge door");
    assert_abs_diff_eq!(meteor_lite(&s, &s), 0.9921875, epsilon = 1e-15);
}

#[test]
fn no_matches_score_zero() {
    assert_eq!(meteor_lite(&toks("a b"), &toks("c d")), 0.0);
}

#[test]
fn meteor_matches_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let c = random_sentence(&mut rng, 1);
        let r = random_sentence(&mut rng, 1);
        assert_abs_diff_eq!(meteor_lite(&c, &r), meteor_oracle(&c, &r), epsilon = 1e-9);
    }
    for seed in 0..20 {
        let (c, r) = random_corpus(seed + 300, 3);
        let oracle: f64 = c
            .iter()
            .zip(&r)
            .map(|(c, rs)| rs.iter().map(|x| meteor_oracle(c, x)).fold(0.0, f64::max))
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(meteor_lite_corpus(&c, &r).unwrap(), oracle, epsilon = 1e-9);
    }
}

// ---- accuracies ----------------------------------------------------------------------

#[test]
fn perfect_masks_score_one() {
    let gt = vec![vec![0, 1, 1, 0], vec![1, 1]];
    assert_eq!(snippet_accuracy(&gt, &gt).unwrap(), 1.0);
    assert_eq!(actobj_accuracy(&gt, &gt).unwrap(), 1.0);
}

#[test]
fn ten_frames_with_eight_agreements() {
    let gt = vec![vec![1, 1, 1, 0, 0, 0, 0, 1, 1, 0]];
    let pred = vec![vec![1, 0, 1, 0, 0, 1, 0, 1, 1, 0]];
    assert_abs_diff_eq!(snippet_accuracy(&pred, &gt).unwrap(), 0.8, epsilon = 1e-15);
}

#[test]
fn half_probabilities_threshold_to_one_and_score_the_positive_rate() {
    let gt = vec![vec![1, 0, 0, 1, 1, 0, 0, 0]];
    let pred = vec![crate::generation::threshold(&[0.5; 8])];
    assert_abs_diff_eq!(snippet_accuracy(&pred, &gt).unwrap(), 3.0 / 8.0, epsilon = 1e-15);
}

#[test]
fn all_zero_predictions_score_the_negative_rate_on_wide_targets() {
    let mut gt = vec![0u8; 677];
    for k in [3, 40, 41, 300, 676] {
        gt[k] = 1;
    }
    let acc = actobj_accuracy(&[vec![0; 677]], &[gt]).unwrap();
    assert_abs_diff_eq!(acc, 672.0 / 677.0, epsilon = 1e-15);
}

#[test]
fn accuracy_rejects_length_mismatch() {
    assert!(snippet_accuracy(&[vec![1, 0]], &[vec![1]]).is_err());
    assert!(actobj_accuracy(&[], &[vec![1]]).is_err());
}

// ---- properties ------------------------------------------------------------------------

fn corpus_strategy() -> impl Strategy<Value = Corpus> {
    (0u64..10_000, 2usize..6).prop_map(|(seed, n)| random_corpus(seed, n))
}

proptest! {
    #[test]
    fn a_zero_order_zeroes_every_higher_order((c, r) in corpus_strategy()) {
        let b = bleu_orders(&c, &r, 4).unwrap();
        if let Some(k) = b.iter().position(|&x| x == 0.0) {
            prop_assert!(b[k..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn metrics_ignore_item_order((c, r) in corpus_strategy(), shift in 1usize..5) {
        let k = shift % c.len();
        let mut c2 = c.clone();
        let mut r2 = r.clone();
        c2.rotate_left(k);
        r2.rotate_left(k);
        prop_assert!((bleu(&c, &r, 4).unwrap() - bleu(&c2, &r2, 4).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&c, &r).unwrap() - cider(&c2, &r2).unwrap()).abs() < 1e-9);
        prop_assert!((meteor_lite_corpus(&c, &r).unwrap() - meteor_lite_corpus(&c2, &r2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_range((c, r) in corpus_strategy()) {
        let m = meteor_lite_corpus(&c, &r).unwrap();
        let cd = cider(&c, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((0.0..=10.0 + 1e-9).contains(&cd));
        for b in bleu_orders(&c, &r, 4).unwrap() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        }
    }
}

// ---- documents -----------------------------------------------------------------------------

#[test]
fn ablation_table_has_one_row_per_setting() {
    let report = EvalReport {
        bleu1: 1.0,
        bleu2: 1.0,
        bleu3: 1.0,
        bleu4: 0.5,
        meteor_lite: 0.25,
        cider: 3.0,
        snippet_acc: 1.0,
        actobj_acc: 1.0,
        videos: 1,
        snippets: 1,
        note: METEOR_NOTE.into(),
    };
    let t = ablation_table(&[("oracle".into(), report.clone()), ("null".into(), report)]);
    assert_eq!(t.lines().count(), 4);
    assert!(t.contains("|  50.00 |  25.00 |  30.00 |"));
}

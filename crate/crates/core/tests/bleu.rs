mod common;

use proptest::prelude::*;

use common::bleu_fixtures::FIXTURES;
use sbnmt::harness::metrics::{
    accuracy_row, corpus_bleu, corpus_bleu_detailed, corpus_bleu_smoothed, length_bucket_report,
    prefix_suffix_accuracy, sweep_table, EvalReport,
};

fn w(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn fixtures_match_hand_computation() {
    for (c, r, matches, totals, plain, smooth) in FIXTURES {
        let (c, r) = (vec![w(c)], vec![w(r)]);
        let d = corpus_bleu_detailed(&c, &r, 4, false).unwrap();
        assert_eq!(d.matches, matches.to_vec());
        assert_eq!(d.totals, totals.to_vec());
        assert!(
            (corpus_bleu(&c, &r, 4).unwrap() - plain).abs() < 1e-6,
            "{c:?}"
        );
        assert!(
            (corpus_bleu_smoothed(&c, &r, 4).unwrap() - smooth).abs() < 1e-6,
            "{c:?}"
        );
    }
}

#[test]
fn the_cat_sat_closed_form() {
    let c = vec![w("the cat sat")];
    let r = vec![w("the cat sat down")];
    assert_eq!(corpus_bleu(&c, &r, 4).unwrap(), 0.0);
    let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
    assert!((corpus_bleu_smoothed(&c, &r, 4).unwrap() - want).abs() < 1e-9);
}

#[test]
fn corpus_counts_are_pooled() {
    let c: Vec<Vec<&str>> = FIXTURES.iter().map(|f| w(f.0)).collect();
    let r: Vec<Vec<&str>> = FIXTURES.iter().map(|f| w(f.1)).collect();
    let d = corpus_bleu_detailed(&c, &r, 4, false).unwrap();
    for n in 0..4 {
        assert_eq!(d.matches[n], FIXTURES.iter().map(|f| f.2[n]).sum::<usize>());
        assert_eq!(d.totals[n], FIXTURES.iter().map(|f| f.3[n]).sum::<usize>());
    }
    assert_eq!(corpus_bleu(&c, &c, 4).unwrap(), 100.0);
    assert!(corpus_bleu::<&str>(&[], &[], 4).is_err());
    assert!(corpus_bleu(&c[..2], &r[..3], 4).is_err());
}

#[test]
fn accuracy_cases() {
    let r: Vec<Vec<u8>> = vec![(0..8).collect(), (10..18).collect()];
    let half: Vec<Vec<u8>> = r
        .iter()
        .map(|x| x[..4].iter().copied().chain([99; 4]).collect())
        .collect();
    assert_eq!(prefix_suffix_accuracy(&half, &r, 4), (1.0, 0.0));
    assert_eq!(prefix_suffix_accuracy(&r, &r, 4), (1.0, 1.0));
    // Short sentences use their own length.
    let short = vec![vec![1u8, 2]];
    assert_eq!(prefix_suffix_accuracy(&short, &short, 4), (1.0, 1.0));
    assert_eq!(accuracy_row("L2R", 0.4021, 0.351), "L2R   40.21% / 35.10%");
}

#[test]
fn buckets_partition_the_corpus() {
    let c: Vec<Vec<&str>> = FIXTURES.iter().map(|f| w(f.0)).collect();
    let r: Vec<Vec<&str>> = FIXTURES.iter().map(|f| w(f.1)).collect();
    let src = c.clone();
    let b = length_bucket_report(&c, &r, &src, 3).unwrap();
    assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), c.len());
    assert!(b.iter().all(|x| x.count > 0));
    let one = length_bucket_report(&c, &r, &src, 100).unwrap();
    assert_eq!(one.len(), 1);
    assert!((one[0].bleu - corpus_bleu_smoothed(&c, &r, 4).unwrap()).abs() < 1e-12);
    // Lengths 2 and 7 only: the bucket in between is absent.
    let c2 = vec![w("a b"), w("a b c d e f g")];
    let gaps = length_bucket_report(&c2, &c2, &c2, 2).unwrap();
    assert_eq!(gaps.iter().map(|x| x.lo).collect::<Vec<_>>(), vec![2, 6]);
}

#[test]
fn report_and_table_rendering() {
    let c = vec![vec![1, 2, 3, 4, 5], vec![6, 7]];
    let r = vec![vec![1, 2, 3, 4, 5], vec![6, 8]];
    let rep = EvalReport::compute(&c, &r, &c, Some(&[true, false]), 4, 4).unwrap();
    assert_eq!(rep.exact_match, 0.5);
    assert_eq!(rep.l2r_win_rate, Some(0.5));
    let kv = rep.to_kv();
    assert!(kv.contains("exact_match=0.500000\n"));
    assert!(kv.contains("l2r_win_rate=0.500000\n"));
    assert_eq!(
        rep.to_kv(),
        EvalReport::compute(&c, &r, &c, Some(&[true, false]), 4, 4)
            .unwrap()
            .to_kv()
    );
    assert!(rep.to_table("sb").lines().count() > 6);
    let t = sweep_table(&[(2, 10.0), (4, 12.5)]);
    assert_eq!(t.lines().count(), 3);
    assert!(t.ends_with("     4     12.50\n"));
}

proptest! {
    #[test]
    fn bleu_is_invariant_to_line_order(
        lines in prop::collection::vec(
            (prop::collection::vec(0u8..6, 1..8), prop::collection::vec(0u8..6, 1..8)),
            1..8,
        ),
        rot in 0usize..8,
    ) {
        let (c, r): (Vec<_>, Vec<_>) = lines.iter().cloned().unzip();
        let k = rot % c.len();
        let mut c2 = c.clone();
        let mut r2 = r.clone();
        c2.rotate_left(k);
        r2.rotate_left(k);
        c2.reverse();
        r2.reverse();
        prop_assert_eq!(corpus_bleu_smoothed(&c, &r, 4).unwrap(), corpus_bleu_smoothed(&c2, &r2, 4).unwrap());
        prop_assert_eq!(corpus_bleu(&c, &r, 4).unwrap(), corpus_bleu(&c2, &r2, 4).unwrap());
        prop_assert_eq!(prefix_suffix_accuracy(&r, &r, 1 + rot), (1.0, 1.0));
        prop_assert!((corpus_bleu(&r, &r, 4).unwrap() - 100.0).abs() < 1e-9 || r.iter().all(|x| x.len() < 4));
    }
}

mod common;

use common::{log_softmax, tiny_model};
use sbnmt::attention::FusionConfig;
use sbnmt::decoding::{
    exhaustive_oracle, greedy_decode, standard_beam_search, sync_bidirectional_beam_search,
    DecodeResult, Direction, Fallback, Incremental, Pairing, Partner, SearchConfig, StepMode,
};
use sbnmt::model::{EOS, L2R, R2L};

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn cached_steps_match_full_reevaluation() {
    for fusion in [
        FusionConfig::default(),
        FusionConfig::linear(0.3),
        FusionConfig::gate(),
    ] {
        let m = tiny_model(3, fusion, 10);
        let src = [4, 6, 5, 7];
        let fwd = [L2R, 5, 8, 6, 4, 9];
        let bwd = [R2L, 9, 4, 4, 7, 5];
        let (lf, lb) = m.decode_dual_ids(&src, &fwd, &bwd).unwrap();
        let inc = Incremental::new(&m, &src).unwrap();
        let mut states = vec![inc.start(Direction::L2R), inc.start(Direction::R2L)];
        for t in 0..fwd.len() {
            let out = inc
                .advance(
                    &mut states,
                    &[(0, Partner::State(1)), (1, Partner::State(0))],
                    StepMode::Dual,
                )
                .unwrap();
            assert!(max_diff(&out[0], &log_softmax(lf.row(t))) <= 1e-10);
            assert!(max_diff(&out[1], &log_softmax(lb.row(t))) <= 1e-10);
            if t + 1 < fwd.len() {
                states[0].push(fwd[t + 1]);
                states[1].push(bwd[t + 1]);
            }
        }
    }
}

#[test]
fn cached_uni_steps_match_full_reevaluation() {
    let m = tiny_model(4, FusionConfig::default(), 10);
    let src = [4, 6];
    let ys = [R2L, 5, 8, 6];
    let full = m.decode_uni_ids(&src, &ys).unwrap();
    let inc = Incremental::new(&m, &src).unwrap();
    let mut states = vec![inc.start(Direction::R2L)];
    for t in 0..ys.len() {
        let out = inc
            .advance(&mut states, &[(0, Partner::HistoryOnly)], StepMode::Uni)
            .unwrap();
        assert!(max_diff(&out[0], &log_softmax(full.row(t))) <= 1e-10);
        if t + 1 < ys.len() {
            states[0].push(ys[t + 1]);
        }
    }
}

#[test]
fn advance_rejects_states_without_pending_token() {
    let m = tiny_model(4, FusionConfig::default(), 10);
    let inc = Incremental::new(&m, &[4]).unwrap();
    let mut states = vec![inc.start(Direction::L2R)];
    inc.advance(&mut states, &[(0, Partner::HistoryOnly)], StepMode::Uni)
        .unwrap();
    assert!(inc
        .advance(&mut states, &[(0, Partner::HistoryOnly)], StepMode::Uni)
        .is_err());
}

#[test]
fn greedy_equals_beam_of_one() {
    for seed in 0..20 {
        let m = tiny_model(seed, FusionConfig::default(), 8);
        let src = [4 + (seed as usize % 4), 5, 6];
        for dir in [Direction::L2R, Direction::R2L] {
            let g = greedy_decode(&m, &src, 8, dir).unwrap();
            let b = standard_beam_search(&m, &src, &SearchConfig::new(1, 8).with_alpha(0.0), dir)
                .unwrap();
            assert_eq!(g.tokens, b.best.tokens);
            assert_eq!(g.complete, !b.incomplete);
            assert!((g.logprob - b.best.logprob).abs() < 1e-12);
        }
    }
}

#[test]
fn full_width_beam_finds_the_oracle_optimum() {
    for seed in 0..10 {
        let m = tiny_model(100 + seed, FusionConfig::default(), 7);
        let src = [4, 5 + seed as usize % 3];
        let oracle = exhaustive_oracle(&m, &src, 4, Direction::L2R).unwrap();
        let cfg = SearchConfig::new(1000, 4).with_alpha(0.0);
        let beam = standard_beam_search(&m, &src, &cfg, Direction::L2R).unwrap();
        assert_eq!(beam.best.tokens, oracle.tokens);
        assert!((beam.best.logprob - oracle.logprob).abs() < 1e-9);
    }
}

#[test]
fn oracle_enumerates_and_is_monotone_in_max_len() {
    // vocab {a, EOS} plus the reserved ids
    let m = tiny_model(5, FusionConfig::default(), 5);
    let one = exhaustive_oracle(&m, &[4], 1, Direction::L2R).unwrap();
    assert_eq!(one.tokens, vec![L2R, EOS]);
    let mut prev = f64::NEG_INFINITY;
    for len in 1..6 {
        let h = exhaustive_oracle(&m, &[4], len, Direction::L2R).unwrap();
        assert!(h.logprob >= prev);
        prev = h.logprob;
    }
    let big = tiny_model(5, FusionConfig::default(), 40);
    assert!(exhaustive_oracle(&big, &[4], 6, Direction::L2R).is_err());
}

#[test]
fn beam_score_not_below_greedy() {
    for seed in 0..30 {
        let m = tiny_model(200 + seed, FusionConfig::default(), 8);
        let src = [4, 5, 6];
        let g = greedy_decode(&m, &src, 8, Direction::L2R).unwrap();
        let b = standard_beam_search(
            &m,
            &src,
            &SearchConfig::new(4, 8).with_alpha(0.0),
            Direction::L2R,
        )
        .unwrap();
        if g.complete && !b.incomplete {
            assert!(b.best.logprob >= g.logprob - 1e-12, "seed {seed}");
        }
    }
}

/// Best of two independent searches, preferring complete results.
fn independent_best(l: &DecodeResult, r: &DecodeResult) -> f64 {
    match (l.incomplete, r.incomplete) {
        (false, true) => l.score,
        (true, false) => r.score,
        _ => l.score.max(r.score),
    }
}

#[test]
fn lambda_zero_sb_search_decomposes() {
    for seed in 0..20 {
        let m = tiny_model(300 + seed, FusionConfig::linear(0.0), 8);
        let src = [4, 6, 5];
        for k in [2, 4, 6] {
            let cfg = SearchConfig::new(k, 8);
            let sb = sync_bidirectional_beam_search(&m, &src, &cfg).unwrap();
            let half = SearchConfig::new(k / 2, 8);
            let l = standard_beam_search(&m, &src, &half, Direction::L2R).unwrap();
            let r = standard_beam_search(&m, &src, &half, Direction::R2L).unwrap();
            assert_eq!(sb.score, independent_best(&l, &r), "seed {seed} k {k}");
        }
    }
}

#[test]
fn sb_search_is_step_synchronous_and_deterministic() {
    let m = tiny_model(9, FusionConfig::default(), 8);
    let mut cfg = SearchConfig::new(4, 8);
    cfg.trace = true;
    let a = sync_bidirectional_beam_search(&m, &[4, 5], &cfg).unwrap();
    let b = sync_bidirectional_beam_search(&m, &[4, 5], &cfg).unwrap();
    assert_eq!(a, b);
    for line in &a.trace {
        let step: usize = line.split_whitespace().next().unwrap()["step=".len()..]
            .parse()
            .unwrap();
        let toks = line.split("tokens=[").nth(1).unwrap().trim_end_matches(']');
        let n = toks.split_whitespace().count();
        assert_eq!(n, step, "{line}");
    }
}

#[test]
fn sb_search_variants_run() {
    let m = tiny_model(11, FusionConfig::gate(), 8);
    for pairing in [Pairing::Rank, Pairing::OneBest] {
        for fallback in [Fallback::CompletedPartner, Fallback::HistoryOnly] {
            let mut cfg = SearchConfig::new(6, 8);
            cfg.pairing = pairing;
            cfg.fallback = fallback;
            let r = sync_bidirectional_beam_search(&m, &[4, 5, 6], &cfg).unwrap();
            assert!(r.score.is_finite());
        }
    }
    assert!(sync_bidirectional_beam_search(&m, &[4], &SearchConfig::new(3, 8)).is_err());
}

use std::cmp::Ordering;

use super::{
    emittable, DecodeResult, DecoderState, Direction, Fallback, Hypothesis, Incremental, Pairing,
    Partner, SearchConfig, StepMode,
};
use crate::model::{Model, EOS};
use crate::Result;

/// One direction's beam: ranked ongoing hypotheses with their caches, plus
/// the completed ones. The width shrinks by one for every completion.
struct HalfBeam {
    hyps: Vec<Hypothesis>,
    states: Vec<DecoderState>,
    finished: Vec<Hypothesis>,
    /// Cache of each finished hypothesis, up to its last fed position.
    finished_states: Vec<DecoderState>,
    width: usize,
}

impl HalfBeam {
    fn new(inc: &Incremental<'_>, direction: Direction, width: usize) -> Self {
        HalfBeam {
            hyps: vec![Hypothesis {
                direction,
                tokens: vec![direction.start_token()],
                logprob: 0.0,
                complete: false,
            }],
            states: vec![inc.start(direction)],
            finished: Vec::new(),
            finished_states: Vec::new(),
            width,
        }
    }

    fn is_live(&self) -> bool {
        !self.hyps.is_empty() && self.width > 0
    }

    /// Keeps the top `width` one-token extensions. Ties go to the lower
    /// token id, then to the better-ranked parent.
    fn expand(&mut self, logprobs: &[Vec<f64>]) {
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for (r, (h, lp)) in self.hyps.iter().zip(logprobs).enumerate() {
            for w in emittable(lp.len()) {
                cand.push((h.logprob + lp[w], w, r));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cand.truncate(self.width);
        let mut hyps = Vec::new();
        let mut states = Vec::new();
        for (score, w, r) in cand {
            let mut tokens = self.hyps[r].tokens.clone();
            tokens.push(w);
            let h = Hypothesis {
                direction: self.hyps[r].direction,
                tokens,
                logprob: score,
                complete: w == EOS,
            };
            if w == EOS {
                self.finished.push(h);
                self.finished_states.push(self.states[r].clone());
                self.width -= 1;
            } else {
                let mut st = self.states[r].clone();
                st.push(w);
                hyps.push(h);
                states.push(st);
            }
        }
        self.hyps = hyps;
        self.states = states;
    }

    fn best_finished(&self, alpha: f64) -> Option<usize> {
        best_index(&self.finished, alpha)
    }
}

/// Index of the highest-scoring hypothesis; the earliest wins ties.
fn best_index(hyps: &[Hypothesis], alpha: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, h) in hyps.iter().enumerate() {
        if best.is_none_or(|b| h.score(alpha) > hyps[b].score(alpha)) {
            best = Some(i);
        }
    }
    best
}

fn trace_line(step: usize, rank: usize, h: &Hypothesis, partner: &str) -> String {
    let toks: Vec<String> = h.generated().iter().map(|t| t.to_string()).collect();
    format!(
        "step={step} {}#{rank} partner={partner} logprob={:.6} tokens=[{}]",
        h.direction.name(),
        h.logprob,
        toks.join(" ")
    )
}

fn finish(
    finished: Vec<Hypothesis>,
    live: Vec<Hypothesis>,
    alpha: f64,
    trace: Vec<String>,
) -> DecodeResult {
    let (best, incomplete) = match best_index(&finished, alpha) {
        Some(i) => (finished[i].clone(), false),
        None => {
            let i = best_index(&live, alpha).expect("a search always keeps a hypothesis");
            let mut h = live[i].clone();
            h.complete = false;
            (h, true)
        }
    };
    DecodeResult {
        score: best.score(alpha),
        best,
        incomplete,
        finished,
        trace,
    }
}

/// Argmax decoding over emittable tokens until EOS or `max_len`.
pub fn greedy_decode(
    model: &Model,
    src: &[usize],
    max_len: usize,
    direction: Direction,
) -> Result<Hypothesis> {
    let inc = Incremental::new(model, src)?;
    let mut states = vec![inc.start(direction)];
    let mut h = Hypothesis {
        direction,
        tokens: vec![direction.start_token()],
        logprob: 0.0,
        complete: false,
    };
    while h.len() < max_len {
        let lp = inc
            .advance(&mut states, &[(0, Partner::HistoryOnly)], StepMode::Uni)?
            .remove(0);
        let mut best = EOS;
        for w in emittable(lp.len()) {
            if lp[w] > lp[best] {
                best = w;
            }
        }
        h.tokens.push(best);
        h.logprob += lp[best];
        if best == EOS {
            h.complete = true;
            break;
        }
        states[0].push(best);
    }
    Ok(h)
}

/// Classic beam search with the unidirectional decoder.
///
/// Each step keeps the top `width` extensions; those ending in EOS are set
/// aside and shrink the width. The result maximizes the length-penalized
/// score among completed hypotheses.
pub fn standard_beam_search(
    model: &Model,
    src: &[usize],
    cfg: &SearchConfig,
    direction: Direction,
) -> Result<DecodeResult> {
    cfg.validate(false)?;
    let inc = Incremental::new(model, src)?;
    let mut beam = HalfBeam::new(&inc, direction, cfg.beam_size);
    let mut trace = Vec::new();
    for step in 0..cfg.max_len {
        if !beam.is_live() {
            break;
        }
        let queries: Vec<(usize, Partner)> = (0..beam.hyps.len())
            .map(|i| (i, Partner::HistoryOnly))
            .collect();
        let lps = inc.advance(&mut beam.states, &queries, StepMode::Uni)?;
        if cfg.trace {
            for (r, h) in beam.hyps.iter().enumerate() {
                trace.push(trace_line(step, r, h, "none"));
            }
        }
        beam.expand(&lps);
    }
    Ok(finish(beam.finished, beam.hyps, cfg.alpha, trace))
}

/// Synchronous bidirectional beam search.
///
/// Half of the beam decodes left to right, half right to left, in
/// lockstep. At every step each ongoing hypothesis attends to a partner of
/// the other direction chosen by `cfg.pairing`; completed hypotheses never
/// act as live partners. The best completed hypothesis over both halves
/// wins, L2R first on ties, and an R2L winner's output is reversed.
pub fn sync_bidirectional_beam_search(
    model: &Model,
    src: &[usize],
    cfg: &SearchConfig,
) -> Result<DecodeResult> {
    cfg.validate(true)?;
    let inc = Incremental::new(model, src)?;
    let half = cfg.beam_size / 2;
    let mut fwd = HalfBeam::new(&inc, Direction::L2R, half);
    let mut bwd = HalfBeam::new(&inc, Direction::R2L, half);
    let mut trace = Vec::new();

    for step in 0..cfg.max_len {
        let (f_live, b_live) = (fwd.is_live(), bwd.is_live());
        if !f_live && !b_live {
            break;
        }
        let nf = if f_live { fwd.hyps.len() } else { 0 };
        let nb = if b_live { bwd.hyps.len() } else { 0 };

        // Slice layout: live L2R, live R2L, then at most one frozen partner
        // per direction.
        let mut states: Vec<DecoderState> = Vec::with_capacity(nf + nb + 2);
        states.append(&mut std::mem::take(&mut fwd.states));
        states.append(&mut std::mem::take(&mut bwd.states));
        let frozen_for = |this: &HalfBeam, states: &mut Vec<DecoderState>| -> Option<usize> {
            if cfg.fallback == Fallback::HistoryOnly {
                return None;
            }
            this.best_finished(cfg.alpha).map(|i| {
                states.push(this.finished_states[i].clone());
                states.len() - 1
            })
        };
        // Frozen partner of L2R queries comes from the R2L half and vice versa.
        let frozen_bwd = if f_live && nb == 0 {
            frozen_for(&bwd, &mut states)
        } else {
            None
        };
        let frozen_fwd = if b_live && nf == 0 {
            frozen_for(&fwd, &mut states)
        } else {
            None
        };

        let pick = |rank: usize, n_other: usize, offset: usize, frozen: Option<usize>| -> Partner {
            if n_other == 0 {
                return frozen.map_or(Partner::HistoryOnly, Partner::State);
            }
            match cfg.pairing {
                Pairing::Rank if rank < n_other => Partner::State(offset + rank),
                _ => Partner::State(offset),
            }
        };
        let mut queries = Vec::with_capacity(nf + nb);
        for r in 0..nf {
            queries.push((r, pick(r, nb, nf, frozen_bwd)));
        }
        for r in 0..nb {
            queries.push((nf + r, pick(r, nf, 0, frozen_fwd)));
        }
        let lps = inc.advance(&mut states, &queries, StepMode::Dual)?;

        if cfg.trace {
            for (q, &(i, p)) in queries.iter().enumerate() {
                let (h, r) = if q < nf {
                    (&fwd.hyps[i], i)
                } else {
                    (&bwd.hyps[i - nf], i - nf)
                };
                let partner = match p {
                    Partner::State(j) if j < nf => format!("l2r#{j}"),
                    Partner::State(j) if j < nf + nb => format!("r2l#{}", j - nf),
                    Partner::State(_) => "completed".to_string(),
                    Partner::HistoryOnly => "none".to_string(),
                };
                trace.push(trace_line(step, r, h, &partner));
            }
        }

        states.truncate(nf + nb);
        bwd.states = states.split_off(nf);
        fwd.states = states;
        if f_live {
            fwd.expand(&lps[..nf]);
        }
        if b_live {
            bwd.expand(&lps[nf..]);
        }
    }

    let pick_best = |a: &HalfBeam, b: &HalfBeam| -> Option<Hypothesis> {
        let fa = a.best_finished(cfg.alpha).map(|i| a.finished[i].clone());
        let fb = b.best_finished(cfg.alpha).map(|i| b.finished[i].clone());
        match (fa, fb) {
            (Some(x), Some(y)) => match y.score(cfg.alpha).partial_cmp(&x.score(cfg.alpha)) {
                Some(Ordering::Greater) => Some(y),
                _ => Some(x),
            },
            (x, y) => x.or(y),
        }
    };
    let winner = pick_best(&fwd, &bwd);
    let mut finished = fwd.finished;
    finished.extend(bwd.finished);
    match winner {
        Some(best) => Ok(DecodeResult {
            score: best.score(cfg.alpha),
            best,
            incomplete: false,
            finished,
            trace,
        }),
        None => {
            let mut live = fwd.hyps;
            live.extend(bwd.hyps);
            Ok(finish(finished, live, cfg.alpha, trace))
        }
    }
}

//! Greedy, standard beam and synchronous bidirectional beam search.
//!
//! All searches run on [`Incremental`], which evaluates the decoder one
//! position at a time with per-hypothesis key/value caches. Generation is
//! restricted to emittable tokens (EOS and ordinary tokens); probabilities
//! still come from the softmax over the whole vocabulary.

mod incremental;
mod oracle;
mod search;

pub use incremental::{DecoderState, Direction, Incremental, Partner, StepMode};
pub use oracle::{exhaustive_oracle, score_sequence};
pub use search::{greedy_decode, standard_beam_search, sync_bidirectional_beam_search};

use crate::model::{EOS, L2R, PAD, R2L};
use crate::{Error, Result};

/// `logprob / ((5 + len) / 6)^alpha`.
pub fn length_penalized_score(logprob: f64, len: usize, alpha: f64) -> f64 {
    logprob / ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Token ids a search may emit: EOS and every ordinary token.
pub fn emittable(vocab: usize) -> impl Iterator<Item = usize> {
    (0..vocab).filter(|&t| t != PAD && t != L2R && t != R2L)
}

/// A scored partial or complete output.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub direction: Direction,
    /// Start token first; ends with EOS when `complete`.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub complete: bool,
}

impl Hypothesis {
    /// Tokens after the start token, in generation order.
    pub fn generated(&self) -> &[usize] {
        &self.tokens[1..]
    }

    /// Number of generated tokens, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The output in natural left-to-right order without EOS; R2L
    /// hypotheses are reversed.
    pub fn output(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .generated()
            .iter()
            .copied()
            .filter(|&t| t != EOS)
            .collect();
        if self.direction == Direction::R2L {
            out.reverse();
        }
        out
    }

    pub fn score(&self, alpha: f64) -> f64 {
        length_penalized_score(self.logprob, self.len().max(1), alpha)
    }
}

/// Which ongoing hypothesis of the other half a query attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    /// Rank `i` pairs with rank `i`.
    Rank,
    /// Every hypothesis pairs with the other half's best.
    OneBest,
}

/// What a hypothesis attends to once the other half has no ongoing
/// hypothesis left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fallback {
    /// The best completed hypothesis of the other direction, up to its
    /// last fed position.
    CompletedPartner,
    /// No partner term.
    HistoryOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub alpha: f64,
    pub pairing: Pairing,
    pub fallback: Fallback,
    /// Record a per-step text trace.
    pub trace: bool,
}

impl SearchConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        SearchConfig {
            beam_size,
            max_len,
            alpha: 0.6,
            pairing: Pairing::Rank,
            fallback: Fallback::CompletedPartner,
            trace: false,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    fn validate(&self, bidirectional: bool) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::invalid(
                "search",
                "beam_size and max_len must be positive",
            ));
        }
        if bidirectional && (self.beam_size < 2 || !self.beam_size.is_multiple_of(2)) {
            return Err(Error::invalid(
                "search",
                format!(
                    "bidirectional search needs an even beam of at least 2, got {}",
                    self.beam_size
                ),
            ));
        }
        Ok(())
    }
}

/// Result of one search.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub best: Hypothesis,
    /// Length-penalized score of `best`.
    pub score: f64,
    /// True when no hypothesis emitted EOS and `best` is a truncated one.
    pub incomplete: bool,
    pub finished: Vec<Hypothesis>,
    pub trace: Vec<String>,
}

impl DecodeResult {
    pub fn output(&self) -> Vec<usize> {
        self.best.output()
    }

    pub fn direction(&self) -> Direction {
        self.best.direction
    }

    /// One-line `key=value` decode record.
    pub fn record_line(&self) -> String {
        format!(
            "direction={} score={:.6} tokens={} complete={}",
            self.best.direction.name(),
            self.score,
            self.best.len(),
            !self.incomplete
        )
    }
}

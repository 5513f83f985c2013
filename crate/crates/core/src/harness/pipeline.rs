use crate::decoding::{
    greedy_decode, standard_beam_search, sync_bidirectional_beam_search, Direction, SearchConfig,
};
use crate::model::{Model, Vocabulary};
use crate::training::TrainingTriple;
use crate::Result;

use super::data::Pair;
use super::metrics::corpus_bleu_smoothed;

/// Token-id pairs.
pub type IdPair = (Vec<usize>, Vec<usize>);

pub fn encode_pairs(pairs: &[Pair], src: &Vocabulary, tgt: &Vocabulary) -> Result<Vec<IdPair>> {
    pairs
        .iter()
        .map(|(s, t)| {
            let s: Vec<&str> = s.iter().map(String::as_str).collect();
            let t: Vec<&str> = t.iter().map(String::as_str).collect();
            Ok((src.encode(&s)?, tgt.encode(&t)?))
        })
        .collect()
}

pub fn gold_triples(pairs: &[IdPair]) -> Vec<TrainingTriple> {
    pairs
        .iter()
        .map(|(s, t)| TrainingTriple::gold(s.clone(), t))
        .collect()
}

/// How a model is decoded.
#[derive(Clone, Debug, PartialEq)]
pub enum Decoder {
    Greedy(Direction),
    Beam(Direction, SearchConfig),
    Bidirectional(SearchConfig),
}

/// Output tokens in natural order plus the winning direction.
pub fn translate(
    model: &Model,
    src: &[usize],
    how: &Decoder,
    max_len: usize,
) -> Result<(Vec<usize>, Direction)> {
    Ok(match how {
        Decoder::Greedy(d) => {
            let h = greedy_decode(model, src, max_len, *d)?;
            (h.output(), *d)
        }
        Decoder::Beam(d, cfg) => {
            let r = standard_beam_search(model, src, cfg, *d)?;
            (r.output(), r.direction())
        }
        Decoder::Bidirectional(cfg) => {
            let r = sync_bidirectional_beam_search(model, src, cfg)?;
            (r.output(), r.direction())
        }
    })
}

/// Fraction of sources whose output equals the reference exactly.
pub fn exact_match(model: &Model, pairs: &[IdPair], how: &Decoder, max_len: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (s, t) in pairs {
        if translate(model, s, how, max_len)?.0 == *t {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Smoothed corpus BLEU of `how` at each beam size. Greedy decoding
/// ignores the size.
pub fn beam_sweep(
    model: &Model,
    pairs: &[IdPair],
    sizes: &[usize],
    how: &Decoder,
) -> Result<Vec<(usize, f64)>> {
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
    sizes
        .iter()
        .map(|&k| {
            let how = match how {
                Decoder::Greedy(d) => Decoder::Greedy(*d),
                Decoder::Beam(d, c) => Decoder::Beam(
                    *d,
                    SearchConfig {
                        beam_size: k,
                        ..c.clone()
                    },
                ),
                Decoder::Bidirectional(c) => Decoder::Bidirectional(SearchConfig {
                    beam_size: k,
                    ..c.clone()
                }),
            };
            let max_len = match &how {
                Decoder::Greedy(_) => model.config.max_len,
                Decoder::Beam(_, c) | Decoder::Bidirectional(c) => c.max_len,
            };
            let cands = pairs
                .iter()
                .map(|(s, _)| Ok(translate(model, s, &how, max_len)?.0))
                .collect::<Result<Vec<_>>>()?;
            Ok((k, corpus_bleu_smoothed(&cands, &refs, 4)?))
        })
        .collect()
}

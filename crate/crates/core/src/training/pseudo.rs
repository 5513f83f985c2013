use super::{Provenance, TrainingTriple};
use crate::decoding::{standard_beam_search, Direction, SearchConfig};
use crate::model::Model;
use crate::Result;

/// Pseudo references for one corpus pair, both in natural order.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoOutputs {
    pub fwd: Vec<usize>,
    pub bwd: Vec<usize>,
    /// Either search hit the length limit without EOS.
    pub truncated: bool,
}

fn decode_pair(
    src: &[usize],
    l2r: &Model,
    r2l: &Model,
    search: &SearchConfig,
) -> Result<PseudoOutputs> {
    let f = standard_beam_search(l2r, src, search, Direction::L2R)?;
    let b = standard_beam_search(r2l, src, search, Direction::R2L)?;
    Ok(PseudoOutputs {
        fwd: f.output(),
        bwd: b.output(),
        truncated: f.incomplete || b.incomplete,
    })
}

fn triple(
    src: &[usize],
    fwd: &[usize],
    bwd: &[usize],
    prov: (Provenance, Provenance),
    truncated: bool,
) -> TrainingTriple {
    let mut t = TrainingTriple::new(src.to_vec(), fwd, bwd, prov);
    t.truncated = truncated && (prov.0 == Provenance::Pseudo || prov.1 == Provenance::Pseudo);
    t
}

/// For every `(src, tgt)` pair, decodes pseudo references with the two
/// unidirectional models and emits `(src, fwd pseudo, bwd gold)` and
/// `(src, fwd gold, bwd pseudo)`.
pub fn build_pseudo_triples(
    corpus: &[(Vec<usize>, Vec<usize>)],
    l2r: &Model,
    r2l: &Model,
    search: &SearchConfig,
) -> Result<Vec<TrainingTriple>> {
    use Provenance::{Gold, Pseudo};
    let mut out = Vec::with_capacity(2 * corpus.len());
    for (src, tgt) in corpus {
        let p = decode_pair(src, l2r, r2l, search)?;
        out.push(triple(src, &p.fwd, tgt, (Pseudo, Gold), p.truncated));
        out.push(triple(src, tgt, &p.bwd, (Gold, Pseudo), p.truncated));
    }
    Ok(out)
}

/// The six gold/pseudo combinations per pair. With `g` the gold target and
/// `f`, `b` the forward and backward pseudo outputs read left to right, the
/// (forward side, backward side) pairs are `(g, b)`, `(b, g)`, `(f, g)`,
/// `(g, f)`, `(f, b)`, `(b, f)`. The two-triple set is the first and third.
pub fn expand_six_triples(
    corpus: &[(Vec<usize>, Vec<usize>)],
    l2r: &Model,
    r2l: &Model,
    search: &SearchConfig,
) -> Result<Vec<TrainingTriple>> {
    use Provenance::{Gold, Pseudo};
    let mut out = Vec::with_capacity(6 * corpus.len());
    for (src, g) in corpus {
        let p = decode_pair(src, l2r, r2l, search)?;
        let (f, b) = (&p.fwd, &p.bwd);
        let tr = p.truncated;
        out.push(triple(src, g, b, (Gold, Pseudo), tr));
        out.push(triple(src, b, g, (Pseudo, Gold), tr));
        out.push(triple(src, f, g, (Pseudo, Gold), tr));
        out.push(triple(src, g, f, (Gold, Pseudo), tr));
        out.push(triple(src, f, b, (Pseudo, Pseudo), tr));
        out.push(triple(src, b, f, (Pseudo, Pseudo), tr));
    }
    Ok(out)
}

//! Joint bidirectional training: triples, loss, optimizer, checkpoints.

mod checkpoint;
mod optim;
mod pseudo;
mod trainer;

pub use checkpoint::{
    average_checkpoints, average_stores, decode_checkpoint, encode_checkpoint, load_checkpoint,
    save_checkpoint, write_atomic,
};
pub use optim::{adam_step, noam_lr, AdamConfig, AdamState};
pub use pseudo::{build_pseudo_triples, expand_six_triples, PseudoOutputs};
pub use trainer::{checkpoint_path, list_checkpoints, LossCurve, Trainer, TrainingConfig};

use crate::model::{Bound, Model, SourceBatch, TargetBatch, EOS, L2R, PAD, R2L};
use crate::tensor::{Graph, Mode, Var};
use crate::{Error, Result};

/// Name prefix of optimizer state inside a checkpoint.
pub const OPTIM_PREFIX: &str = "optim/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Gold,
    Pseudo,
}

/// One training example.
///
/// `y_fwd` is `<l2r> y_1 .. y_n EOS`; `y_bwd` is `<r2l> y_m .. y_1 EOS`
/// built from a possibly different sequence. The two may differ in length.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple {
    pub src: Vec<usize>,
    pub y_fwd: Vec<usize>,
    pub y_bwd: Vec<usize>,
    pub fwd: Provenance,
    pub bwd: Provenance,
    /// A pseudo side was cut at the search length limit without EOS.
    pub truncated: bool,
}

impl TrainingTriple {
    /// Builds both sides from natural-order token sequences.
    pub fn new(
        src: Vec<usize>,
        fwd: &[usize],
        bwd: &[usize],
        provenance: (Provenance, Provenance),
    ) -> Self {
        let mut y_fwd = vec![L2R];
        y_fwd.extend_from_slice(fwd);
        y_fwd.push(EOS);
        let mut y_bwd = vec![R2L];
        y_bwd.extend(bwd.iter().rev());
        y_bwd.push(EOS);
        TrainingTriple {
            src,
            y_fwd,
            y_bwd,
            fwd: provenance.0,
            bwd: provenance.1,
            truncated: false,
        }
    }

    /// Gold target on both sides.
    pub fn gold(src: Vec<usize>, tgt: &[usize]) -> Self {
        Self::new(src, tgt, tgt, (Provenance::Gold, Provenance::Gold))
    }
}

/// Which output streams a model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Directions {
    /// Both streams through the bidirectional decoder.
    Both,
    /// Forward stream alone through the unidirectional decoder.
    L2R,
    /// Backward stream alone through the unidirectional decoder.
    R2L,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub label_smoothing: f64,
    pub directions: Directions,
    /// Put loss on pseudo sides too, not only use them as context.
    pub supervise_pseudo: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            label_smoothing: 0.1,
            directions: Directions::Both,
            supervise_pseudo: true,
        }
    }
}

/// Decoder inputs and shifted targets for a padded batch.
struct Prepared {
    src: SourceBatch,
    fwd_in: TargetBatch,
    bwd_in: TargetBatch,
    fwd_tgt: Vec<usize>,
    bwd_tgt: Vec<usize>,
}

fn prepare(triples: &[&TrainingTriple]) -> Result<Prepared> {
    if triples.is_empty() {
        return Err(Error::invalid("joint_loss", "empty batch"));
    }
    for t in triples {
        if t.y_fwd.len() < 2 || t.y_bwd.len() < 2 || t.y_fwd[0] != L2R || t.y_bwd[0] != R2L {
            return Err(Error::invalid("joint_loss", "malformed triple"));
        }
    }
    let len = triples
        .iter()
        .map(|t| t.y_fwd.len().max(t.y_bwd.len()) - 1)
        .max()
        .expect("non-empty");
    let src = SourceBatch::new(&triples.iter().map(|t| t.src.clone()).collect::<Vec<_>>())?;
    let side = |get: fn(&TrainingTriple) -> &Vec<usize>| -> Result<(TargetBatch, Vec<usize>)> {
        let inputs: Vec<Vec<usize>> = triples
            .iter()
            .map(|t| get(t)[..get(t).len() - 1].to_vec())
            .collect();
        let mut targets = Vec::with_capacity(triples.len() * len);
        for t in triples {
            let y = &get(t)[1..];
            targets.extend_from_slice(y);
            targets.resize(targets.len() + len - y.len(), PAD);
        }
        Ok((TargetBatch::new(&inputs, Some(len))?, targets))
    };
    let (fwd_in, fwd_tgt) = side(|t| &t.y_fwd)?;
    let (bwd_in, bwd_tgt) = side(|t| &t.y_bwd)?;
    Ok(Prepared {
        src,
        fwd_in,
        bwd_in,
        fwd_tgt,
        bwd_tgt,
    })
}

/// Per-row weights `1/n` over supervised non-pad rows of one stream.
fn stream_weights(targets: &[usize], len: usize, supervised: impl Fn(usize) -> bool) -> Vec<f64> {
    let keep: Vec<bool> = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| t != PAD && supervised(r / len))
        .collect();
    let n = keep.iter().filter(|&&k| k).count();
    keep.iter()
        .map(|&k| if k && n > 0 { 1.0 / n as f64 } else { 0.0 })
        .collect()
}

/// Mean label-smoothed NLL of the forward targets plus that of the
/// backward targets, both from one pass of the bidirectional decoder.
pub fn joint_loss(
    g: &mut Graph,
    model: &Model,
    b: &Bound,
    triples: &[&TrainingTriple],
    cfg: &LossConfig,
) -> Result<Var> {
    let p = prepare(triples)?;
    let memory = model.encode(g, b, &p.src)?;
    let len = p.fwd_in.len;
    let sup = |prov: Provenance| cfg.supervise_pseudo || prov == Provenance::Gold;
    let (logits, targets, weights) = match cfg.directions {
        Directions::Both => {
            let trace = model.decode_dual(g, b, memory, &p.src, &p.fwd_in, &p.bwd_in)?;
            let mut w = stream_weights(&p.fwd_tgt, len, |i| sup(triples[i].fwd));
            w.extend(stream_weights(&p.bwd_tgt, len, |i| sup(triples[i].bwd)));
            let mut t = p.fwd_tgt;
            t.extend(p.bwd_tgt);
            (trace.logits, t, w)
        }
        Directions::L2R => {
            let trace = model.decode_uni(g, b, memory, &p.src, &p.fwd_in)?;
            let w = stream_weights(&p.fwd_tgt, len, |i| sup(triples[i].fwd));
            (trace.logits, p.fwd_tgt, w)
        }
        Directions::R2L => {
            let trace = model.decode_uni(g, b, memory, &p.src, &p.bwd_in)?;
            let w = stream_weights(&p.bwd_tgt, len, |i| sup(triples[i].bwd));
            (trace.logits, p.bwd_tgt, w)
        }
    };
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::invalid(
            "joint_loss",
            "batch has no supervised position",
        ));
    }
    g.cross_entropy_weighted(logits, &targets, &weights, cfg.label_smoothing)
}

/// Eval-mode value of [`joint_loss`].
pub fn joint_loss_value(
    model: &Model,
    triples: &[&TrainingTriple],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut g = Graph::new(Mode::Eval);
    let b = model.bind(&mut g, false);
    let loss = joint_loss(&mut g, model, &b, triples, cfg)?;
    Ok(g.value(loss).data()[0])
}

use super::{emittable, Direction, Hypothesis};
use crate::model::{Model, SourceBatch, TargetBatch, EOS};
use crate::tensor::{kernels, Graph, Mode};
use crate::{Error, Result};

const MAX_SEQUENCES: usize = 1_000_000;
const CHUNK: usize = 512;

/// Teacher-forced log-probabilities of complete outputs (generated tokens,
/// EOS last) under the unidirectional decoder, one graph per chunk.
pub fn score_sequence(
    model: &Model,
    src: &[usize],
    outputs: &[Vec<usize>],
    direction: Direction,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(outputs.len());
    for chunk in outputs.chunks(CHUNK) {
        let inputs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|y| {
                let mut x = vec![direction.start_token()];
                x.extend_from_slice(&y[..y.len().saturating_sub(1)]);
                x
            })
            .collect();
        if chunk.iter().any(Vec::is_empty) {
            return Err(Error::invalid("score_sequence", "empty output"));
        }
        let mut g = Graph::new(Mode::Eval);
        let b = model.bind(&mut g, false);
        let srcb = SourceBatch::new(&vec![src.to_vec(); chunk.len()])?;
        let memory = model.encode(&mut g, &b, &srcb)?;
        let tb = TargetBatch::new(&inputs, None)?;
        let trace = model.decode_uni(&mut g, &b, memory, &srcb, &tb)?;
        let logits = g.value(trace.logits);
        let v = logits.last_dim();
        let mut lp = vec![0.0; v];
        for (s, y) in chunk.iter().enumerate() {
            let mut total = 0.0;
            for (t, &tok) in y.iter().enumerate() {
                kernels::log_softmax_row(logits.row(s * tb.len + t), &mut lp);
                total += lp[tok];
            }
            scores.push(total);
        }
    }
    Ok(scores)
}

/// Brute-force argmax over every emittable output of at most `max_len`
/// tokens that ends in EOS, scored by teacher forcing. Outputs that never
/// emit EOS are not candidates. Ties go to the shorter, then the
/// lexicographically smaller output.
pub fn exhaustive_oracle(
    model: &Model,
    src: &[usize],
    max_len: usize,
    direction: Direction,
) -> Result<Hypothesis> {
    if max_len == 0 {
        return Err(Error::invalid(
            "exhaustive_oracle",
            "max_len must be positive",
        ));
    }
    let content: Vec<usize> = emittable(model.config.tgt_vocab)
        .filter(|&t| t != EOS)
        .collect();
    let vocab = content.len() + 1;
    let space = (vocab as f64).powi(max_len as i32);
    if space > MAX_SEQUENCES as f64 {
        return Err(Error::invalid(
            "exhaustive_oracle",
            format!("{vocab}^{max_len} outputs exceed the {MAX_SEQUENCES} limit"),
        ));
    }
    let mut outputs: Vec<Vec<usize>> = Vec::new();
    let mut layer: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..max_len {
        for prefix in &layer {
            let mut y = prefix.clone();
            y.push(EOS);
            outputs.push(y);
        }
        layer = layer
            .iter()
            .flat_map(|p| {
                content.iter().map(move |&t| {
                    let mut y = p.clone();
                    y.push(t);
                    y
                })
            })
            .collect();
    }
    let scores = score_sequence(model, src, &outputs, direction)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let mut tokens = vec![direction.start_token()];
    tokens.extend_from_slice(&outputs[best]);
    Ok(Hypothesis {
        direction,
        tokens,
        logprob: scores[best],
        complete: true,
    })
}

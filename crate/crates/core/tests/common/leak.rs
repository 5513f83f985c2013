//! Gradient-based probe for information flowing from later positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbnmt::attention::{Activation, FusionConfig};
use sbnmt::model::{Model, ModelConfig, SourceBatch, TargetBatch, L2R, R2L};
use sbnmt::tensor::Mode;
use sbnmt::{Graph, Tensor};

#[derive(Debug, Clone)]
pub struct Case {
    pub layers: usize,
    pub heads: usize,
    pub d_head: usize,
    pub fusion: usize,
    pub batch: usize,
    pub len: usize,
    pub query_stream: usize,
    pub query_pos: usize,
    pub seed: u64,
}

impl Case {
    pub fn random(rng: &mut impl Rng) -> Self {
        let batch = rng.gen_range(1..=3);
        let len = rng.gen_range(1..=6);
        Case {
            layers: rng.gen_range(1..=2),
            heads: rng.gen_range(1..=2),
            d_head: rng.gen_range(2..=4),
            fusion: rng.gen_range(0..4),
            batch,
            len,
            query_stream: rng.gen_range(0..2 * batch),
            query_pos: rng.gen_range(0..len),
            seed: rng.gen(),
        }
    }
}

fn fusion(i: usize) -> FusionConfig {
    match i {
        0 => FusionConfig::linear(0.6),
        1 => FusionConfig::nonlinear(0.4, Activation::Tanh),
        2 => FusionConfig::nonlinear(0.4, Activation::Relu),
        _ => FusionConfig::gate(),
    }
}

/// Gradient of a random projection of logit row `(stream, pos)` with
/// respect to the `[2 * batch * len, d]` decoder input.
pub fn input_gradient(c: &Case) -> (Tensor, usize) {
    let d = c.heads * c.d_head;
    let cfg = ModelConfig {
        num_layers: c.layers,
        d_model: d,
        num_heads: c.heads,
        d_ff: 2 * d,
        src_vocab: 7,
        tgt_vocab: 8,
        dropout: 0.0,
        fusion: fusion(c.fusion),
        max_len: 16,
        ln_eps: 1e-6,
    };
    let model = Model::new(cfg, c.seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x55);
    let stream = |start: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        (0..c.batch)
            .map(|_| {
                let mut s = vec![start];
                s.extend((1..c.len).map(|_| rng.gen_range(4..8)));
                s
            })
            .collect()
    };
    let srcs: Vec<Vec<usize>> = (0..c.batch)
        .map(|_| {
            (0..rng.gen_range(1..5))
                .map(|_| rng.gen_range(0..7))
                .collect()
        })
        .collect();
    let fwd = stream(L2R, &mut rng);
    let bwd = stream(R2L, &mut rng);

    let mut g = Graph::new(Mode::Eval);
    let b = model.bind(&mut g, true);
    let src = SourceBatch::new(&srcs).unwrap();
    let memory = model.encode(&mut g, &b, &src).unwrap();
    let fwd = TargetBatch::new(&fwd, Some(c.len)).unwrap();
    let bwd = TargetBatch::new(&bwd, Some(c.len)).unwrap();
    let trace = model
        .decode_dual(&mut g, &b, memory, &src, &fwd, &bwd)
        .unwrap();
    g.retain_grad(trace.embedded);
    let row = c.query_stream * c.len + c.query_pos;
    let picked = g.gather_rows(trace.logits, &[row]).unwrap();
    let w: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = g.constant(Tensor::new(vec![1, 8], w).unwrap());
    let p = g.mul(picked, w).unwrap();
    let loss = g.sum(p).unwrap();
    g.backward(loss).unwrap();
    (g.grad_or_zeros(trace.embedded), d)
}

/// Only the query's own stream and its partner at positions up to the
/// query position may carry gradient, and some of them must.
pub fn check(c: &Case) -> Result<(), String> {
    let (grad, d) = input_gradient(c);
    let partner = (c.query_stream + c.batch) % (2 * c.batch);
    let mut visible_nonzero = false;
    for s in 0..2 * c.batch {
        for j in 0..c.len {
            let row = &grad.data()[(s * c.len + j) * d..(s * c.len + j + 1) * d];
            let related = s == c.query_stream || s == partner;
            if related && j <= c.query_pos {
                visible_nonzero |= row.iter().any(|&x| x != 0.0);
            } else if row.iter().any(|&x| x != 0.0) {
                return Err(format!(
                    "stream {s} position {j} leaks into stream {} position {}",
                    c.query_stream, c.query_pos
                ));
            }
        }
    }
    if visible_nonzero {
        Ok(())
    } else {
        Err("no gradient reaches the visible positions".into())
    }
}

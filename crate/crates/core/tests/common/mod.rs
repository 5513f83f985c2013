#![allow(dead_code)]

pub mod bleu_fixtures;
pub mod gradcheck;
pub mod leak;

use sbnmt::attention::FusionConfig;
use sbnmt::model::{Model, ModelConfig};

/// A small random model; `vocab` counts every target id, reserved ones included.
pub fn tiny_model(seed: u64, fusion: FusionConfig, vocab: usize) -> Model {
    let cfg = ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 16,
        src_vocab: 9,
        tgt_vocab: vocab,
        dropout: 0.0,
        fusion,
        max_len: 16,
        ln_eps: 1e-6,
    };
    let mut m = Model::new(cfg, seed).unwrap();
    // Sharpen the output layer so searches face real choices.
    if let Some(w) = m.params.get_mut("out_proj") {
        for v in w.data_mut() {
            *v *= 6.0;
        }
    }
    m
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

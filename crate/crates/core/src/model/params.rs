use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::attention::FusionMode;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Named parameter tensors in a fixed, deterministic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Removes and returns every tensor whose name starts with `prefix`.
    pub fn split_off_prefix(&mut self, prefix: &str) -> ParamStore {
        let mut taken = ParamStore::new();
        self.tensors.retain(|k, v| {
            if k.starts_with(prefix) {
                taken.insert(k.clone(), v.clone());
                false
            } else {
                true
            }
        });
        taken
    }
}

/// Closed-form parameter count for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let attn = 4 * d * d;
    let ffn = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d;
    let ln = 2 * d;
    let gate = if cfg.fusion.mode == FusionMode::Gate {
        4 * d * d + 2 * d
    } else {
        0
    };
    let encoder = cfg.num_layers * (attn + ffn + 2 * ln);
    let decoder = cfg.num_layers * (2 * attn + gate + ffn + 3 * ln);
    cfg.src_vocab * d + cfg.tgt_vocab * d + encoder + decoder + d * cfg.tgt_vocab
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn uniform(&mut self, name: String, shape: [usize; 2], bound: f64) {
        let n = shape[0] * shape[1];
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.store
            .insert(name, Tensor::from_parts(shape.to_vec(), data));
    }

    /// Glorot-uniform bound `sqrt(6 / (fan_in + fan_out))`.
    fn glorot(&mut self, name: String, rows: usize, cols: usize) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, [rows, cols], bound);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for w in ["wq", "wk", "wv", "wo"] {
            self.glorot(format!("{prefix}.{w}"), d, d);
        }
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.store
            .insert(format!("{prefix}.gain"), Tensor::full([d], 1.0));
        self.store
            .insert(format!("{prefix}.bias"), Tensor::zeros([d]));
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) {
        self.glorot(format!("{prefix}.w1"), d, d_ff);
        self.store
            .insert(format!("{prefix}.b1"), Tensor::zeros([d_ff]));
        self.glorot(format!("{prefix}.w2"), d_ff, d);
        self.store
            .insert(format!("{prefix}.b2"), Tensor::zeros([d]));
    }
}

/// Scaled-uniform initialisation, reproducible from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        store: ParamStore::new(),
    };
    // embeddings are multiplied by sqrt(d) in the forward pass
    let emb = 1.0 / (d as f64).sqrt();
    init.uniform("src_embed".into(), [cfg.src_vocab, d], emb);
    init.uniform("tgt_embed".into(), [cfg.tgt_vocab, d], emb);
    for l in 0..cfg.num_layers {
        let p = format!("enc.{l}");
        init.attention(&format!("{p}.attn"), d);
        init.layer_norm(&format!("{p}.ln1"), d);
        init.ffn(&format!("{p}.ffn"), d, cfg.d_ff);
        init.layer_norm(&format!("{p}.ln2"), d);
    }
    for l in 0..cfg.num_layers {
        let p = format!("dec.{l}");
        init.attention(&format!("{p}.self"), d);
        if cfg.fusion.mode == FusionMode::Gate {
            init.uniform(format!("{p}.gate.weight"), [2 * d, 2 * d], 0.01);
            init.store
                .insert(format!("{p}.gate.bias"), Tensor::zeros([2 * d]));
        }
        init.layer_norm(&format!("{p}.ln1"), d);
        init.attention(&format!("{p}.cross"), d);
        init.layer_norm(&format!("{p}.ln2"), d);
        init.ffn(&format!("{p}.ffn"), d, cfg.d_ff);
        init.layer_norm(&format!("{p}.ln3"), d);
    }
    init.glorot("out_proj".into(), d, cfg.tgt_vocab);
    Ok(init.store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FusionConfig;

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::desk(10, 12);
        assert_eq!(init_params(&cfg, 9).unwrap(), init_params(&cfg, 9).unwrap());
        assert_ne!(
            init_params(&cfg, 9).unwrap(),
            init_params(&cfg, 10).unwrap()
        );
    }

    #[test]
    fn count_matches_closed_form() {
        for fusion in [FusionConfig::default(), FusionConfig::gate()] {
            let mut cfg = ModelConfig::desk(10, 12);
            cfg.fusion = fusion;
            let store = init_params(&cfg, 1).unwrap();
            assert_eq!(store.count(), param_count(&cfg));
        }
        // hand audit of the desk config with 24/24 vocabularies:
        // embeddings 2*24*64 = 3072, output 64*24 = 1536,
        // encoder layer 4*64^2 + (64*256 + 256 + 256*64 + 64) + 4*64 = 49_728,
        // decoder layer 8*64^2 + 33_088 + 6*64 = 66_240.
        let cfg = ModelConfig::desk(24, 24);
        assert_eq!(param_count(&cfg), 3072 + 1536 + 2 * 49_728 + 2 * 66_240);
    }

    #[test]
    fn initial_values_are_small_and_finite() {
        let store = init_params(&ModelConfig::desk(30, 30), 3).unwrap();
        for (_, t) in store.iter() {
            assert!(t.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }
}

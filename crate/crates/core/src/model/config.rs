use crate::attention::{AttentionConfig, FusionConfig};
use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
    pub fusion: FusionConfig,
    pub max_len: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, width 64, 4 heads, FFN 256.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            src_vocab,
            tgt_vocab,
            dropout: 0.1,
            fusion: FusionConfig::default(),
            max_len: 64,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        AttentionConfig::new(self.d_model, self.num_heads)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        self.fusion.validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.d_model, self.num_heads).expect("validated config")
    }
}

use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::attention::{Activation, FusionConfig, FusionMode};
use crate::decoding::{Fallback, Pairing, SearchConfig};
use crate::model::ModelConfig;
use crate::training::{Directions, TrainingConfig};
use crate::{Error, Result};

/// `key = value` settings; `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: IndexMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: bad key {k:?}", i + 1)));
            }
            if s.values
                .insert(k.to_string(), v.trim().to_string())
                .is_some()
            {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn render(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn fusion_from_settings(s: &Settings, default: FusionConfig) -> Result<FusionConfig> {
    let mode = match s.get_str("fusion") {
        None => default.mode,
        Some("linear") => FusionMode::Linear,
        Some("nonlinear") => FusionMode::Nonlinear,
        Some("gate") => FusionMode::Gate,
        Some(other) => return Err(Error::Config(format!("unknown fusion {other:?}"))),
    };
    let activation = match s.get_str("activation") {
        None => default.activation,
        Some("tanh") => Activation::Tanh,
        Some("relu") => Activation::Relu,
        Some(other) => return Err(Error::Config(format!("unknown activation {other:?}"))),
    };
    let f = FusionConfig {
        mode,
        lambda: s.get("lambda", default.lambda)?,
        activation,
    };
    f.validate()?;
    Ok(f)
}

/// Desk defaults overridden by `s`.
pub fn model_config(s: &Settings, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig> {
    let d = ModelConfig::desk(src_vocab, tgt_vocab);
    let cfg = ModelConfig {
        num_layers: s.get("num_layers", d.num_layers)?,
        d_model: s.get("d_model", d.d_model)?,
        num_heads: s.get("num_heads", d.num_heads)?,
        d_ff: s.get("d_ff", d.d_ff)?,
        src_vocab: s.get("src_vocab", src_vocab)?,
        tgt_vocab: s.get("tgt_vocab", tgt_vocab)?,
        dropout: s.get("dropout", d.dropout)?,
        fusion: fusion_from_settings(s, d.fusion)?,
        max_len: s.get("max_len", d.max_len)?,
        ln_eps: s.get("ln_eps", d.ln_eps)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn model_config_settings(cfg: &ModelConfig) -> Settings {
    let mut s = Settings::default();
    s.set("num_layers", cfg.num_layers);
    s.set("d_model", cfg.d_model);
    s.set("num_heads", cfg.num_heads);
    s.set("d_ff", cfg.d_ff);
    s.set("src_vocab", cfg.src_vocab);
    s.set("tgt_vocab", cfg.tgt_vocab);
    s.set("dropout", cfg.dropout);
    let (mode, act) = (
        match cfg.fusion.mode {
            FusionMode::Linear => "linear",
            FusionMode::Nonlinear => "nonlinear",
            FusionMode::Gate => "gate",
        },
        match cfg.fusion.activation {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        },
    );
    s.set("fusion", mode);
    s.set("activation", act);
    s.set("lambda", cfg.fusion.lambda);
    s.set("max_len", cfg.max_len);
    s.set("ln_eps", cfg.ln_eps);
    s
}

pub fn training_config(s: &Settings) -> Result<TrainingConfig> {
    let d = TrainingConfig::desk();
    let mut cfg = d.clone();
    cfg.adam.beta1 = s.get("beta1", d.adam.beta1)?;
    cfg.adam.beta2 = s.get("beta2", d.adam.beta2)?;
    cfg.adam.eps = s.get("adam_eps", d.adam.eps)?;
    cfg.warmup_steps = s.get("warmup_steps", d.warmup_steps)?;
    cfg.lr_factor = s.get("lr_factor", d.lr_factor)?;
    cfg.lr_override = match s.get_str("lr") {
        None => None,
        Some(v) => Some(
            v.parse()
                .map_err(|_| Error::Config(format!("lr: cannot parse {v:?}")))?,
        ),
    };
    cfg.loss.label_smoothing = s.get("label_smoothing", d.loss.label_smoothing)?;
    cfg.loss.supervise_pseudo = s.get("supervise_pseudo", d.loss.supervise_pseudo)?;
    cfg.loss.directions = match s.get_str("direction").unwrap_or("both") {
        "both" => Directions::Both,
        "l2r" => Directions::L2R,
        "r2l" => Directions::R2L,
        other => return Err(Error::Config(format!("unknown direction {other:?}"))),
    };
    cfg.batch_size = s.get("batch_size", d.batch_size)?;
    cfg.total_steps = s.get("total_steps", d.total_steps)?;
    cfg.checkpoint_every = s.get("checkpoint_every", d.checkpoint_every)?;
    cfg.avg_last_k = s.get("avg_last_k", d.avg_last_k)?;
    cfg.seed = s.get("seed", d.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn search_config(s: &Settings, beam: usize, max_len: usize) -> Result<SearchConfig> {
    let mut cfg = SearchConfig::new(s.get("beam", beam)?, s.get("decode_max_len", max_len)?);
    cfg.alpha = s.get("alpha", cfg.alpha)?;
    cfg.pairing = match s.get_str("pairing").unwrap_or("rank") {
        "rank" => Pairing::Rank,
        "one-best" => Pairing::OneBest,
        other => return Err(Error::Config(format!("unknown pairing {other:?}"))),
    };
    cfg.fallback = match s.get_str("fallback").unwrap_or("completed") {
        "completed" => Fallback::CompletedPartner,
        "history" => Fallback::HistoryOnly,
        other => return Err(Error::Config(format!("unknown fallback {other:?}"))),
    };
    Ok(cfg)
}

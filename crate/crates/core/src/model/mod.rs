//! The encoder, the dual-stream decoder and their parameters.
//!
//! Sequences are batched by stacking rows: a source batch of `B`
//! sentences padded to length `S` is a `[B * S, d_model]` matrix, and the
//! decoder input of both streams is a `[2 * B * T, d_model]` matrix with the
//! forward stream first (see [`StreamLayout`]).

mod config;
mod params;
pub mod vocab;

pub use config::ModelConfig;
pub use params::{init_params, param_count, ParamStore};
pub use vocab::{Vocabulary, EOS, L2R, PAD, R2L};

use indexmap::IndexMap;

use crate::attention::{
    multi_head_attention_batched, sb_multi_head_batched, AttentionParams, FusionMode, GateParams,
    StreamLayout,
};
use crate::tensor::{AttentionSpec, Graph, Mode, Tensor, Var};
use crate::{Error, Result};

/// Sinusoidal position table, `[len, d_model]`. Positions count from 0
/// within each stream.
pub fn positional_encoding(len: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d_model);
    for pos in 0..len {
        data.extend(positional_row(pos, d_model));
    }
    Tensor::from_parts(vec![len, d_model], data)
}

/// One row of [`positional_encoding`].
pub fn positional_row(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|i| {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Right-padded source sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub len: usize,
}

impl SourceBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("source", "empty batch"));
        }
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::invalid("source", "empty source sentence"));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + len - s.len(), PAD);
        }
        Ok(SourceBatch {
            ids,
            lens: seqs.iter().map(Vec::len).collect(),
            len,
        })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }
}

/// Right-padded decoder inputs for one stream. Every sequence starts with
/// its direction's start token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<usize>,
    pub len: usize,
}

impl TargetBatch {
    /// Pads every sequence to `len` (or the longest sequence when `None`).
    pub fn new(seqs: &[Vec<usize>], len: Option<usize>) -> Result<Self> {
        let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let len = len.unwrap_or(longest);
        if seqs.is_empty() || longest == 0 || longest > len {
            return Err(Error::invalid(
                "target",
                "empty batch or sequence longer than padding",
            ));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + len - s.len(), PAD);
        }
        Ok(TargetBatch {
            ids,
            valid: seqs.iter().map(Vec::len).collect(),
            len,
        })
    }

    pub fn batch(&self) -> usize {
        self.valid.len()
    }

    fn check_start(&self, start: usize) -> Result<()> {
        for b in 0..self.batch() {
            if self.ids[b * self.len] != start {
                return Err(Error::invalid(
                    "decoder",
                    format!("sequence {b} must begin with start token {start}"),
                ));
            }
        }
        Ok(())
    }
}

/// Parameters registered on a [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("params", format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Per-layer decoder outputs plus the final logits.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// Input embeddings (after positional encoding).
    pub embedded: Var,
    /// Output `s^l` of every decoder layer.
    pub layers: Vec<Var>,
    pub logits: Var,
}

enum SelfAttention<'a> {
    Dual(&'a StreamLayout),
    Uni(AttentionSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = init_params(&config, 0)?;
        for (name, t) in reference.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("params", got.shape(), t.shape()));
            }
        }
        Ok(Model { config, params })
    }

    /// Registers every parameter on `g`, as gradient-carrying leaves when
    /// `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    fn attn(b: &Bound, prefix: &str) -> Result<AttentionParams> {
        Ok(AttentionParams {
            wq: b.var(&format!("{prefix}.wq"))?,
            wk: b.var(&format!("{prefix}.wk"))?,
            wv: b.var(&format!("{prefix}.wv"))?,
            wo: b.var(&format!("{prefix}.wo"))?,
        })
    }

    /// `embedding * sqrt(d) + PE`, then dropout.
    pub fn embed(
        &self,
        g: &mut Graph,
        b: &Bound,
        table: &str,
        ids: &[usize],
        len: usize,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let seqs = ids.len() / len;
        let e = g.gather_rows(b.var(table)?, ids)?;
        let e = g.scale(e, (d as f64).sqrt())?;
        let pe = positional_encoding(len, d);
        let tiled = Tensor::from_parts(vec![seqs * len, d], pe.data().repeat(seqs));
        let pe = g.constant(tiled);
        let x = g.add(e, pe)?;
        g.dropout(x, self.config.dropout)
    }

    fn residual(&self, g: &mut Graph, b: &Bound, ln: &str, x: Var, y: Var) -> Result<Var> {
        let y = g.dropout(y, self.config.dropout)?;
        let s = g.add(x, y)?;
        let gain = b.var(&format!("{ln}.gain"))?;
        let bias = b.var(&format!("{ln}.bias"))?;
        g.layer_norm(s, gain, bias, self.config.ln_eps)
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = g.matmul(x, b.var(&format!("{prefix}.w1"))?)?;
        let h = g.add(h, b.var(&format!("{prefix}.b1"))?)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, b.var(&format!("{prefix}.w2"))?)?;
        g.add(h, b.var(&format!("{prefix}.b2"))?)
    }

    fn check_source(&self, src: &SourceBatch) -> Result<()> {
        if src.len == 0 {
            return Err(Error::invalid("encode", "empty source"));
        }
        if src.len > self.config.max_len {
            return Err(Error::invalid(
                "encode",
                format!(
                    "source length {} exceeds max_len {}",
                    src.len, self.config.max_len
                ),
            ));
        }
        if let Some(&bad) = src.ids.iter().find(|&&i| i >= self.config.src_vocab) {
            return Err(Error::invalid(
                "encode",
                format!("unknown source token id {bad}"),
            ));
        }
        Ok(())
    }

    fn check_target(&self, t: &TargetBatch) -> Result<()> {
        if t.len > self.config.max_len + 1 {
            return Err(Error::invalid(
                "decoder",
                format!(
                    "target length {} exceeds max_len {}",
                    t.len, self.config.max_len
                ),
            ));
        }
        if let Some(&bad) = t.ids.iter().find(|&&i| i >= self.config.tgt_vocab) {
            return Err(Error::invalid(
                "decoder",
                format!("unknown target token id {bad}"),
            ));
        }
        for b in 0..t.batch() {
            let start = t.ids[b * t.len];
            if start != L2R && start != R2L {
                return Err(Error::invalid(
                    "decoder",
                    format!("sequence {b} begins with {start}, not a start token"),
                ));
            }
        }
        Ok(())
    }

    /// Encoder stack; returns the top-layer states `[B * S, d_model]`.
    pub fn encode(&self, g: &mut Graph, b: &Bound, src: &SourceBatch) -> Result<Var> {
        self.check_source(src)?;
        let mut x = self.embed(g, b, "src_embed", &src.ids, src.len)?;
        let spec = AttentionSpec {
            heads: self.config.num_heads,
            query_len: src.len,
            key_len: src.len,
            key_seq: (0..src.batch()).collect(),
            key_valid: src.lens.clone(),
            causal: false,
        };
        for l in 0..self.config.num_layers {
            let p = format!("enc.{l}");
            let a = multi_head_attention_batched(
                g,
                x,
                x,
                &Self::attn(b, &format!("{p}.attn"))?,
                spec.clone(),
            )?;
            x = self.residual(g, b, &format!("{p}.ln1"), x, a)?;
            let f = self.ffn(g, b, &format!("{p}.ffn"), x)?;
            x = self.residual(g, b, &format!("{p}.ln2"), x, f)?;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn decoder_stack(
        &self,
        g: &mut Graph,
        b: &Bound,
        mut x: Var,
        memory: Var,
        src: &SourceBatch,
        len: usize,
        self_attn: SelfAttention<'_>,
    ) -> Result<(Vec<Var>, Var)> {
        let seqs = g.value(x).rows() / len;
        let cross_spec = AttentionSpec {
            heads: self.config.num_heads,
            query_len: len,
            key_len: src.len,
            key_seq: (0..seqs).map(|s| s % src.batch()).collect(),
            key_valid: src.lens.clone(),
            causal: false,
        };
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let p = format!("dec.{l}");
            let params = Self::attn(b, &format!("{p}.self"))?;
            let a = match &self_attn {
                SelfAttention::Dual(layout) => {
                    let gate = if self.config.fusion.mode == FusionMode::Gate {
                        Some(GateParams {
                            weight: b.var(&format!("{p}.gate.weight"))?,
                            bias: b.var(&format!("{p}.gate.bias"))?,
                        })
                    } else {
                        None
                    };
                    sb_multi_head_batched(
                        g,
                        x,
                        &params,
                        self.config.num_heads,
                        layout,
                        &self.config.fusion,
                        gate.as_ref(),
                    )?
                }
                SelfAttention::Uni(spec) => {
                    multi_head_attention_batched(g, x, x, &params, spec.clone())?
                }
            };
            x = self.residual(g, b, &format!("{p}.ln1"), x, a)?;
            let c = multi_head_attention_batched(
                g,
                x,
                memory,
                &Self::attn(b, &format!("{p}.cross"))?,
                cross_spec.clone(),
            )?;
            x = self.residual(g, b, &format!("{p}.ln2"), x, c)?;
            let f = self.ffn(g, b, &format!("{p}.ffn"), x)?;
            x = self.residual(g, b, &format!("{p}.ln3"), x, f)?;
            layers.push(x);
        }
        let logits = g.matmul(x, b.var("out_proj")?)?;
        Ok((layers, logits))
    }

    /// Both streams through the bidirectional decoder. Logits are stacked
    /// `[2 * B * T, V]`, forward stream first.
    pub fn decode_dual(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        src: &SourceBatch,
        fwd: &TargetBatch,
        bwd: &TargetBatch,
    ) -> Result<DecoderTrace> {
        fwd.check_start(L2R)?;
        bwd.check_start(R2L)?;
        self.decode_streams(g, b, memory, src, fwd, bwd)
    }

    /// [`Model::decode_dual`] without the start-token order check. The
    /// decoder itself is symmetric in its two streams; only the start
    /// tokens tell them apart.
    pub fn decode_streams(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        src: &SourceBatch,
        first: &TargetBatch,
        second: &TargetBatch,
    ) -> Result<DecoderTrace> {
        if first.len != second.len || first.batch() != second.batch() {
            return Err(Error::invalid(
                "decode_dual",
                format!(
                    "stream shapes differ: {}x{} vs {}x{}",
                    first.batch(),
                    first.len,
                    second.batch(),
                    second.len
                ),
            ));
        }
        if first.batch() != src.batch() {
            return Err(Error::invalid(
                "decode_dual",
                "target and source batch sizes differ",
            ));
        }
        self.check_target(first)?;
        self.check_target(second)?;
        let mut ids = first.ids.clone();
        ids.extend_from_slice(&second.ids);
        let layout = StreamLayout {
            batch: first.batch(),
            len: first.len,
            valid: first.valid.iter().chain(&second.valid).copied().collect(),
        };
        let x = self.embed(g, b, "tgt_embed", &ids, first.len)?;
        let (layers, logits) = self.decoder_stack(
            g,
            b,
            x,
            memory,
            src,
            first.len,
            SelfAttention::Dual(&layout),
        )?;
        Ok(DecoderTrace {
            embedded: x,
            layers,
            logits,
        })
    }

    /// A standard unidirectional decoder: plain causal self-attention over
    /// one stream, same parameters. Used by the baselines and by
    /// single-direction search.
    pub fn decode_uni(
        &self,
        g: &mut Graph,
        b: &Bound,
        memory: Var,
        src: &SourceBatch,
        inputs: &TargetBatch,
    ) -> Result<DecoderTrace> {
        if inputs.batch() != src.batch() {
            return Err(Error::invalid(
                "decode_uni",
                "target and source batch sizes differ",
            ));
        }
        self.check_target(inputs)?;
        inputs.check_start(inputs.ids[0])?;
        let spec = AttentionSpec {
            heads: self.config.num_heads,
            query_len: inputs.len,
            key_len: inputs.len,
            key_seq: (0..inputs.batch()).collect(),
            key_valid: inputs.valid.clone(),
            causal: true,
        };
        let x = self.embed(g, b, "tgt_embed", &inputs.ids, inputs.len)?;
        let (layers, logits) =
            self.decoder_stack(g, b, x, memory, src, inputs.len, SelfAttention::Uni(spec))?;
        Ok(DecoderTrace {
            embedded: x,
            layers,
            logits,
        })
    }

    /// Encodes one sentence in eval mode.
    pub fn encode_ids(&self, src: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval);
        let b = self.bind(&mut g, false);
        let h = self.encode(&mut g, &b, &SourceBatch::new(&[src.to_vec()])?)?;
        Ok(g.value(h).clone())
    }

    /// Eval-mode dual decode of one sentence pair; returns
    /// `(logits_fwd, logits_bwd)`, each `[T, V]`.
    pub fn decode_dual_ids(
        &self,
        src: &[usize],
        fwd: &[usize],
        bwd: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        if fwd.len() != bwd.len() {
            return Err(Error::invalid("decode_dual", "stream lengths differ"));
        }
        let mut g = Graph::new(Mode::Eval);
        let b = self.bind(&mut g, false);
        let src = SourceBatch::new(&[src.to_vec()])?;
        let memory = self.encode(&mut g, &b, &src)?;
        let fwd = TargetBatch::new(&[fwd.to_vec()], None)?;
        let bwd = TargetBatch::new(&[bwd.to_vec()], None)?;
        let trace = self.decode_dual(&mut g, &b, memory, &src, &fwd, &bwd)?;
        let logits = g.value(trace.logits);
        let t = fwd.len;
        Ok((logits.slice_rows(0, t), logits.slice_rows(t, t)))
    }

    /// Eval-mode unidirectional decode of one sequence; returns `[T, V]`.
    pub fn decode_uni_ids(&self, src: &[usize], ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval);
        let b = self.bind(&mut g, false);
        let src = SourceBatch::new(&[src.to_vec()])?;
        let memory = self.encode(&mut g, &b, &src)?;
        let inputs = TargetBatch::new(&[ids.to_vec()], None)?;
        let trace = self.decode_uni(&mut g, &b, memory, &src, &inputs)?;
        Ok(g.value(trace.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::FusionConfig;

    fn tiny(fusion: FusionConfig) -> Model {
        let cfg = ModelConfig {
            num_layers: 2,
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            src_vocab: 9,
            tgt_vocab: 10,
            dropout: 0.0,
            fusion,
            max_len: 16,
            ln_eps: 1e-6,
        };
        Model::new(cfg, 7).unwrap()
    }

    #[test]
    fn positional_encoding_closed_form() {
        let pe = positional_encoding(4, 4);
        for pos in 0..4 {
            let p = pos as f64;
            let want = [p.sin(), p.cos(), (p / 100.0).sin(), (p / 100.0).cos()];
            for (a, b) in pe.row(pos).iter().zip(want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert_eq!(pe.row(0)[0], 0.0);
        assert!(positional_encoding(50, 16)
            .data()
            .iter()
            .all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn encode_shapes_and_errors() {
        let m = tiny(FusionConfig::default());
        assert_eq!(m.encode_ids(&[5]).unwrap().shape(), &[1, 8]);
        assert!(m.encode_ids(&[]).is_err());
        assert!(m.encode_ids(&[4, 99]).is_err());
        assert_eq!(
            m.encode_ids(&[4, 5, 6]).unwrap(),
            m.encode_ids(&[4, 5, 6]).unwrap()
        );
    }

    #[test]
    fn start_tokens_only_gives_finite_logits() {
        let m = tiny(FusionConfig::default());
        let (f, b) = m.decode_dual_ids(&[4, 5], &[L2R], &[R2L]).unwrap();
        assert_eq!(f.shape(), &[1, 10]);
        assert_eq!(b.shape(), &[1, 10]);
        assert!(f.is_finite() && b.is_finite());
    }

    #[test]
    fn decode_dual_rejects_bad_inputs() {
        let m = tiny(FusionConfig::default());
        assert!(m.decode_dual_ids(&[4], &[R2L, 5], &[L2R, 5]).is_err());
        assert!(m.decode_dual_ids(&[4], &[L2R, 5], &[R2L]).is_err());
    }

    #[test]
    fn changing_a_token_leaves_earlier_positions_of_both_streams_alone() {
        let m = tiny(FusionConfig::default());
        let src = [4, 5, 6];
        let (f, b) = m
            .decode_dual_ids(&src, &[L2R, 5, 6, 7], &[R2L, 7, 4, 8])
            .unwrap();
        let (f2, b2) = m
            .decode_dual_ids(&src, &[L2R, 5, 9, 7], &[R2L, 7, 4, 8])
            .unwrap();
        for t in 0..2 {
            assert_eq!(f.row(t), f2.row(t));
            assert_eq!(b.row(t), b2.row(t));
        }
        assert_ne!(f.row(2), f2.row(2));
        assert_ne!(b.row(2), b2.row(2));
    }

    #[test]
    fn swapping_streams_swaps_logits_exactly() {
        let m = tiny(FusionConfig::default());
        let mut g = Graph::new(Mode::Eval);
        let b = m.bind(&mut g, false);
        let src = SourceBatch::new(&[vec![4, 5, 6]]).unwrap();
        let memory = m.encode(&mut g, &b, &src).unwrap();
        let a = TargetBatch::new(&[vec![L2R, 5, 6]], None).unwrap();
        let c = TargetBatch::new(&[vec![R2L, 7, 4]], None).unwrap();
        let x = m.decode_streams(&mut g, &b, memory, &src, &a, &c).unwrap();
        let y = m.decode_streams(&mut g, &b, memory, &src, &c, &a).unwrap();
        let (x, y) = (g.value(x.logits), g.value(y.logits));
        assert_eq!(x.slice_rows(0, 3), y.slice_rows(3, 3));
        assert_eq!(x.slice_rows(3, 3), y.slice_rows(0, 3));
    }

    #[test]
    fn lambda_zero_matches_unidirectional_decoder() {
        let m = tiny(FusionConfig::linear(0.0));
        let src = [4, 5, 6];
        let fwd = [L2R, 5, 8, 6];
        let (f, _) = m.decode_dual_ids(&src, &fwd, &[R2L, 9, 4, 7]).unwrap();
        let uni = m.decode_uni_ids(&src, &fwd).unwrap();
        assert!(f.max_abs_diff(&uni) <= 1e-10);
    }
}

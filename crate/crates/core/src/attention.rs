//! Scaled dot-product, multi-head, and synchronous bidirectional attention.
//!
//! Synchronous bidirectional attention runs two streams side by side: a
//! forward (left-to-right) stream and a backward (right-to-left) stream.
//! Each query attends to its own stream's history and, separately, to the
//! partner stream's prefix. The two results are merged by a [`FusionConfig`].
//!
//! The single-sequence functions here ([`scaled_dot_attention`],
//! [`multi_head_attention`], [`sbdpa`], [`sb_multi_head`]) mirror the
//! textbook definitions. The model uses the batched [`sb_multi_head_batched`]
//! and [`multi_head_attention_batched`], which evaluate the same maths on
//! stacked sequences.

use crate::tensor::{AttentionSpec, Graph, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    d_model: usize,
    num_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || d_model == 0 || !d_model.is_multiple_of(num_heads) {
            return Err(Error::invalid(
                "attention_config",
                format!("d_model {d_model} is not a positive multiple of {num_heads} heads"),
            ));
        }
        Ok(AttentionConfig { d_model, num_heads })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Linear,
    Nonlinear,
    Gate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// How history and future attention outputs are merged.
///
/// * linear: `hist + lambda * fut`
/// * nonlinear: `hist + lambda * act(fut)`
/// * gate: `r * hist + z * fut`, `(r, z) = sigmoid([hist; fut] W + b)`
///
/// Gate weights are model parameters and travel separately as
/// [`GateParams`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub lambda: f64,
    pub activation: Activation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Nonlinear,
            lambda: 0.1,
            activation: Activation::Tanh,
        }
    }
}

impl FusionConfig {
    pub fn linear(lambda: f64) -> Self {
        FusionConfig {
            mode: FusionMode::Linear,
            lambda,
            activation: Activation::Tanh,
        }
    }

    pub fn nonlinear(lambda: f64, activation: Activation) -> Self {
        FusionConfig {
            mode: FusionMode::Nonlinear,
            lambda,
            activation,
        }
    }

    pub fn gate() -> Self {
        FusionConfig {
            mode: FusionMode::Gate,
            lambda: 0.0,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(
                "fusion",
                format!("lambda {} must be finite and >= 0", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Gate weights: `weight` is `[2w, 2w]`, `bias` is `[2w]` for feature width `w`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub weight: Var,
    pub bias: Var,
}

/// Query/key/value/output projections. Each is `[d_model, d_model]`; head
/// `i` owns columns `i*d_k..(i+1)*d_k` of the first three.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Which key positions a query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSpec {
    None,
    /// Query `i` sees own-stream keys `j <= i`.
    CausalSelf,
    /// Query `i` sees partner-stream keys `j <= i`, including the
    /// partner's start token at `j = 0`.
    CausalCross,
}

impl MaskSpec {
    fn causal(self) -> bool {
        !matches!(self, MaskSpec::None)
    }
}

fn single_spec(g: &Graph, q: Var, k: Var, heads: usize, mask: MaskSpec) -> AttentionSpec {
    let lk = g.value(k).rows();
    AttentionSpec {
        heads,
        query_len: g.value(q).rows(),
        key_len: lk,
        key_seq: vec![0],
        key_valid: vec![lk],
        causal: mask.causal(),
    }
}

/// `softmax(Q K^T / sqrt(d_k) + mask) V` for one sequence.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: MaskSpec) -> Result<Var> {
    if g.value(q).last_dim() != g.value(k).last_dim() {
        return Err(Error::shape("scaled_dot_attention", g.shape(q), g.shape(k)));
    }
    if mask.causal() && g.value(q).rows() > g.value(k).rows() {
        return Err(Error::shape("scaled_dot_attention", g.shape(q), g.shape(k)));
    }
    let spec = single_spec(g, q, k, 1, mask);
    g.attention(q, k, v, spec)
}

fn project(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    g.matmul(x, w)
}

/// Multi-head attention over stacked sequences described by `spec`.
pub fn multi_head_attention_batched(
    g: &mut Graph,
    q: Var,
    kv: Var,
    params: &AttentionParams,
    spec: AttentionSpec,
) -> Result<Var> {
    let qp = project(g, q, params.wq)?;
    let kp = project(g, kv, params.wk)?;
    let vp = project(g, kv, params.wv)?;
    let heads = g.attention(qp, kp, vp, spec)?;
    g.matmul(heads, params.wo)
}

/// `Concat_i(Attention(Q W_i^Q, K W_i^K, V W_i^V)) W^O` for one sequence.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    params: &AttentionParams,
    cfg: AttentionConfig,
    mask: MaskSpec,
) -> Result<Var> {
    check_params(g, params, cfg)?;
    let qp = project(g, q, params.wq)?;
    let kp = project(g, k, params.wk)?;
    let vp = project(g, v, params.wv)?;
    let spec = single_spec(g, qp, kp, cfg.num_heads(), mask);
    let heads = g.attention(qp, kp, vp, spec)?;
    g.matmul(heads, params.wo)
}

fn check_params(g: &Graph, params: &AttentionParams, cfg: AttentionConfig) -> Result<()> {
    let d = cfg.d_model();
    for w in [params.wq, params.wk, params.wv, params.wo] {
        if g.shape(w) != [d, d] {
            return Err(Error::shape("attention_params", g.shape(w), &[d, d]));
        }
    }
    Ok(())
}

/// Merges history and future attention outputs.
pub fn fuse(
    g: &mut Graph,
    hist: Var,
    fut: Var,
    cfg: &FusionConfig,
    gate: Option<&GateParams>,
) -> Result<Var> {
    if g.shape(hist) != g.shape(fut) {
        return Err(Error::shape("fuse", g.shape(hist), g.shape(fut)));
    }
    cfg.validate()?;
    match (cfg.mode, gate) {
        (FusionMode::Linear, None) => {
            let scaled = g.scale(fut, cfg.lambda)?;
            g.add(hist, scaled)
        }
        (FusionMode::Nonlinear, None) => {
            let act = match cfg.activation {
                Activation::Tanh => g.tanh(fut)?,
                Activation::Relu => g.relu(fut)?,
            };
            let scaled = g.scale(act, cfg.lambda)?;
            g.add(hist, scaled)
        }
        (FusionMode::Gate, Some(p)) => {
            let w = g.value(hist).last_dim();
            if g.shape(p.weight) != [2 * w, 2 * w] || g.shape(p.bias) != [2 * w] {
                return Err(Error::shape("fuse", g.shape(p.weight), &[2 * w, 2 * w]));
            }
            let both = g.concat_last(&[hist, fut])?;
            let pre = g.matmul(both, p.weight)?;
            let pre = g.add(pre, p.bias)?;
            let gates = g.sigmoid(pre)?;
            let r = g.slice_last(gates, 0, w)?;
            let z = g.slice_last(gates, w, w)?;
            let kept = g.mul(r, hist)?;
            let added = g.mul(z, fut)?;
            g.add(kept, added)
        }
        (FusionMode::Gate, None) => Err(Error::invalid("fuse", "gate fusion needs gate weights")),
        (_, Some(_)) => Err(Error::invalid(
            "fuse",
            "gate weights given to a non-gate fusion",
        )),
    }
}

/// Synchronous bidirectional dot-product attention for one stream pair.
///
/// `h_fwd = fuse(Att(q_f, k_f, v_f), Att(q_f, k_b, v_b))` and symmetrically
/// for `h_bwd`. With a causal `mask`, history uses `CausalSelf` and the
/// partner term uses `CausalCross`.
#[allow(clippy::too_many_arguments)]
pub fn sbdpa(
    g: &mut Graph,
    fwd: (Var, Var, Var),
    bwd: (Var, Var, Var),
    mask: MaskSpec,
    cfg: &FusionConfig,
    gate: Option<&GateParams>,
) -> Result<(Var, Var)> {
    check_streams(g, fwd.0, bwd.0)?;
    let (self_mask, cross_mask) = if mask.causal() {
        (MaskSpec::CausalSelf, MaskSpec::CausalCross)
    } else {
        (MaskSpec::None, MaskSpec::None)
    };
    let one = |g: &mut Graph, q: Var, own: (Var, Var), other: (Var, Var)| -> Result<Var> {
        let hist = scaled_dot_attention(g, q, own.0, own.1, self_mask)?;
        let fut = scaled_dot_attention(g, q, other.0, other.1, cross_mask)?;
        fuse(g, hist, fut, cfg, gate)
    };
    let h_fwd = one(g, fwd.0, (fwd.1, fwd.2), (bwd.1, bwd.2))?;
    let h_bwd = one(g, bwd.0, (bwd.1, bwd.2), (fwd.1, fwd.2))?;
    Ok((h_fwd, h_bwd))
}

fn check_streams(g: &Graph, fwd: Var, bwd: Var) -> Result<()> {
    if g.value(fwd).rows() != g.value(bwd).rows() {
        return Err(Error::invalid(
            "sbdpa",
            format!(
                "stream lengths differ: {} vs {}",
                g.value(fwd).rows(),
                g.value(bwd).rows()
            ),
        ));
    }
    Ok(())
}

/// Synchronous bidirectional multi-head attention for one stream pair.
///
/// Both streams share the projections. Fusion is applied to the
/// concatenated head outputs, which for linear and nonlinear fusion is the
/// same as fusing each head; gate weights therefore span `2 * d_model`.
#[allow(clippy::too_many_arguments)]
pub fn sb_multi_head(
    g: &mut Graph,
    fwd: (Var, Var, Var),
    bwd: (Var, Var, Var),
    params: &AttentionParams,
    cfg: AttentionConfig,
    mask: MaskSpec,
    fusion: &FusionConfig,
    gate: Option<&GateParams>,
) -> Result<(Var, Var)> {
    check_params(g, params, cfg)?;
    check_streams(g, fwd.0, bwd.0)?;
    let proj = |g: &mut Graph, (q, k, v): (Var, Var, Var)| -> Result<(Var, Var, Var)> {
        Ok((
            project(g, q, params.wq)?,
            project(g, k, params.wk)?,
            project(g, v, params.wv)?,
        ))
    };
    let (pf, pb) = (proj(g, fwd)?, proj(g, bwd)?);
    let h = cfg.num_heads();
    let causal = mask.causal();
    let one = |g: &mut Graph, q: Var, own: (Var, Var), other: (Var, Var)| -> Result<Var> {
        let mut spec = single_spec(g, q, own.0, h, mask);
        spec.causal = causal;
        let hist = g.attention(q, own.0, own.1, spec.clone())?;
        let fut = g.attention(q, other.0, other.1, spec)?;
        let fused = fuse(g, hist, fut, fusion, gate)?;
        g.matmul(fused, params.wo)
    };
    let h_fwd = one(g, pf.0, (pf.1, pf.2), (pb.1, pb.2))?;
    let h_bwd = one(g, pb.0, (pb.1, pb.2), (pf.1, pf.2))?;
    Ok((h_fwd, h_bwd))
}

/// Layout of `2 * batch` stacked decoder sequences: rows `[0, batch * len)`
/// hold the forward stream, the rest the backward stream. Sequence `s`
/// (forward) is partnered with `s + batch` (backward) and vice versa.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamLayout {
    pub batch: usize,
    pub len: usize,
    /// Valid (non-pad) input length of each of the `2 * batch` sequences.
    pub valid: Vec<usize>,
}

impl StreamLayout {
    pub fn sequences(&self) -> usize {
        2 * self.batch
    }

    pub fn partner(&self, s: usize) -> usize {
        (s + self.batch) % (2 * self.batch)
    }

    pub fn self_spec(&self, heads: usize) -> AttentionSpec {
        AttentionSpec {
            heads,
            query_len: self.len,
            key_len: self.len,
            key_seq: (0..self.sequences()).collect(),
            key_valid: self.valid.clone(),
            causal: true,
        }
    }

    pub fn cross_spec(&self, heads: usize) -> AttentionSpec {
        AttentionSpec {
            key_seq: (0..self.sequences()).map(|s| self.partner(s)).collect(),
            ..self.self_spec(heads)
        }
    }
}

/// Batched synchronous bidirectional multi-head attention over a stacked
/// `[2 * batch * len, d_model]` input (self-attention: `Q = K = V = x`).
pub fn sb_multi_head_batched(
    g: &mut Graph,
    x: Var,
    params: &AttentionParams,
    heads: usize,
    layout: &StreamLayout,
    fusion: &FusionConfig,
    gate: Option<&GateParams>,
) -> Result<Var> {
    let q = project(g, x, params.wq)?;
    let k = project(g, x, params.wk)?;
    let v = project(g, x, params.wv)?;
    let hist = g.attention(q, k, v, layout.self_spec(heads))?;
    let fut = g.attention(q, k, v, layout.cross_spec(heads))?;
    let fused = fuse(g, hist, fut, fusion, gate)?;
    g.matmul(fused, params.wo)
}

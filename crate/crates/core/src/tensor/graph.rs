use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, gemm, MatMut, MatRef};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic operations (dropout) are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

/// Batched multi-head attention layout.
///
/// Queries are `[query_seqs * query_len, d]`, keys and values are
/// `[key_seqs * key_len, d]`. Query sequence `s` attends to key sequence
/// `key_seq[s]`, restricted to its first `key_valid[key_seq[s]]` rows and,
/// when `causal`, to key positions `j <= i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub key_seq: Vec<usize>,
    pub key_valid: Vec<usize>,
    pub causal: bool,
}

impl AttentionSpec {
    pub fn admits(&self, seq: usize, i: usize, j: usize) -> bool {
        j < self.key_valid[self.key_seq[seq]] && (!self.causal || j <= i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: Vec<(usize, usize)>,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Add(Var, Var, Bcast, Bcast),
    Sub(Var, Var, Bcast, Bcast),
    Mul(Var, Var, Bcast, Bcast),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Sum(Var),
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatLast(_) => "concat_last",
            Op::SliceLast { .. } => "slice_last",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(_) => "reshape",
            Op::Attention { .. } => "attention",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b, ..) | Op::Sub(a, b, ..) | Op::Mul(a, b, ..) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherRows { x, .. } | Op::SliceLast { x, .. } | Op::Dropout { x, .. } => vec![*x],
            Op::ConcatLast(parts) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

/// Index mapping from a broadcast output back to one operand.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// Operand equals the trailing block of the output and repeats.
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn build(out: &[usize], inp: &[usize]) -> Bcast {
        if out == inp {
            return Bcast::Same;
        }
        let stripped: &[usize] = {
            let lead = inp.iter().take_while(|&&d| d == 1).count();
            &inp[lead..]
        };
        if out.ends_with(stripped) {
            return Bcast::Cycle(stripped.iter().product());
        }
        let offset = out.len() - inp.len();
        let mut strides = vec![0usize; out.len()];
        let mut acc = 1;
        for ax in (0..inp.len()).rev() {
            strides[ax + offset] = if inp[ax] == 1 { 0 } else { acc };
            acc *= inp[ax];
        }
        let numel: usize = out.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..numel {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for ax in 0..rank {
        let da = if ax + a.len() >= rank {
            a[ax + a.len() - rank]
        } else {
            1
        };
        let db = if ax + b.len() >= rank {
            b[ax + b.len() - rank]
        } else {
            1
        };
        out[ax] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in execution order, so the
/// record is topologically sorted by construction.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    retain: Vec<bool>,
    rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Mode::Eval)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            retain: Vec::new(),
            rng: match mode {
                Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
                Mode::Eval => None,
            },
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in record order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Inputs of the operation that produced `var`.
    pub fn op_inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient after [`Graph::backward`]; `None` if `var` is not a
    /// gradient-carrying leaf (or retained node) or was unreachable.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros when `var` did not influence the loss.
    pub fn grad_or_zeros(&self, var: Var) -> Tensor {
        self.grad(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(var).to_vec()))
    }

    /// Keep the gradient of an intermediate node after backward.
    pub fn retain_grad(&mut self, var: Var) {
        self.retain[var.0] = true;
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.retain.push(requires_grad);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.retain.push(false);
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.data()
    }

    // ---------------------------------------------------------------- algebra

    /// Matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let (batch_shape, m, batch) = if sb.len() == 2 {
            // fold the batch of `a` into its rows
            (
                sa[..sa.len() - 2].to_vec(),
                sa[..sa.len() - 1].iter().product(),
                vec![(0, 0)],
            )
        } else {
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            let out = broadcast_shape(ba, bb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
            let map_a = Bcast::build(&out, ba);
            let map_b = Bcast::build(&out, bb);
            let count: usize = out.iter().product();
            let pairs = (0..count).map(|i| (map_a.at(i), map_b.at(i))).collect();
            (out, sa[sa.len() - 2], pairs)
        };
        let mut out = vec![0.0; batch.len() * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for (ob, &(ia, ib)) in batch.iter().enumerate() {
            gemm(
                1.0,
                MatRef::dense(da, ia * m * k, m, k),
                MatRef::dense(db, ib * k * n, k, n),
                0.0,
                MatMut::dense(&mut out, ob * m * n, m, n),
            );
        }
        let mut shape = batch_shape;
        if sb.len() == 2 {
            shape.push(sa[sa.len() - 2]);
        } else {
            shape.push(m);
        }
        shape.push(n);
        let value = Tensor::from_parts(shape, out);
        self.push(
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            value,
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::invalid(
                "transpose",
                format!("rank {} < 2", shape.len()),
            ));
        }
        let value = transpose_last(self.value(x));
        self.push(Op::Transpose(x), value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast, Bcast)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let ma = Bcast::build(&out_shape, sa);
        let mb = Bcast::build(&out_shape, sb);
        let (da, db) = (self.data(a), self.data(b));
        let numel: usize = out_shape.iter().product();
        let data = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..numel).map(|i| f(da[ma.at(i)], db[mb.at(i)])).collect(),
        };
        Ok((Tensor::from_parts(out_shape, data), ma, mb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ma, mb) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b, ma, mb), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ma, mb) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b, ma, mb), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, ma, mb) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b, ma, mb), value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), value)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let w = value.last_dim();
        for row in value.data_mut().chunks_mut(w) {
            kernels::softmax_row(row, |_| true);
        }
        self.push(Op::Softmax(x), value)
    }

    /// Softmax over the last axis where `allowed[i] == false` entries get
    /// probability zero. Every row needs at least one allowed entry.
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let mut value = self.value(x).clone();
        if allowed.len() != value.numel() {
            return Err(Error::shape(
                "masked_softmax",
                value.shape(),
                &[allowed.len()],
            ));
        }
        let w = value.last_dim();
        for (r, row) in value.data_mut().chunks_mut(w).enumerate() {
            let mask = &allowed[r * w..(r + 1) * w];
            if !kernels::softmax_row(row, |j| mask[j]) {
                return Err(Error::invalid(
                    "masked_softmax",
                    format!("row {r} has no admissible entry"),
                ));
            }
        }
        // shares the softmax backward: masked outputs are exactly zero
        self.push(Op::Softmax(x), value)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, xhat, rstd) =
            kernels::layer_norm(self.data(x), self.data(gain), self.data(bias), eps);
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            value,
        )
    }

    /// Label-smoothed cross entropy averaged over non-pad rows.
    ///
    /// The target distribution puts `1 - smoothing` on the gold id and
    /// spreads `smoothing` uniformly over the whole vocabulary.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad_id: usize,
    ) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy", "every target is padding"));
        }
        let weights: Vec<f64> = targets
            .iter()
            .map(|&t| if t == pad_id { 0.0 } else { 1.0 / count as f64 })
            .collect();
        self.cross_entropy_weighted(logits, targets, &weights, smoothing)
    }

    /// `sum_n weights[n] * CE(logits[n], targets[n])` with label smoothing.
    pub fn cross_entropy_weighted(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
        smoothing: f64,
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || weights.len() != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("smoothing {smoothing} outside [0, 1)"),
            ));
        }
        let vocab = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target id {bad} >= vocabulary {vocab}"),
            ));
        }
        let data = self.data(logits);
        let mut probs = vec![0.0; data.len()];
        let mut logp = vec![0.0; vocab];
        let mut loss = 0.0;
        let off = smoothing / vocab as f64;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = &data[r * vocab..(r + 1) * vocab];
            kernels::log_softmax_row(row, &mut logp);
            for (p, &lp) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(&logp) {
                *p = lp.exp();
            }
            if w == 0.0 {
                continue;
            }
            let mut row_loss = -(1.0 - smoothing) * logp[t];
            if smoothing > 0.0 {
                row_loss -= off * logp.iter().sum::<f64>();
            }
            loss += w * row_loss;
        }
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Selects rows of `x` viewed as `[rows, last_dim]`; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, w) = (t.rows(), t.last_dim());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of {rows}"),
            ));
        }
        if ids.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows selected"));
        }
        let mut out = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![ids.len(), w], out);
        self.push(
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        for p in parts {
            let s = self.shape(*p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.value(*first).rows();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let d = self.data(*p);
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Op::ConcatLast(parts.to_vec()),
            Tensor::from_parts(shape, out),
        )
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        if len == 0 || start + len > w {
            return Err(Error::invalid(
                "slice_last",
                format!("{start}..{} of width {w}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        self.push(Op::SliceLast { x, start }, Tensor::from_parts(shape, out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), value)
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                format!("rate {p} outside [0, 1)"),
            ));
        }
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = Tensor::from_parts(
            self.shape(x).to_vec(),
            self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect(),
        );
        self.push(Op::Dropout { x, mask }, value)
    }

    /// Fused batched multi-head scaled dot-product attention. Heads split
    /// the last axis of `q`/`k` and of `v` into `spec.heads` equal blocks;
    /// the output holds the per-head results concatenated in head order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &spec)?;
        self.push(
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            out,
        )
    }

    /// Attention weights recorded by an [`Graph::attention`] node, laid out
    /// `[query_seq, head, i, j]`.
    pub fn attention_weights(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Query-key score entries computed by all attention nodes so far,
    /// counting every head.
    pub fn attention_entries(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Attention { probs, .. } => probs.len(),
                _ => 0,
            })
            .sum()
    }

    // --------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively
    /// over every use of a value; each recorded op is visited once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut kept: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            if self.retain[i] {
                kept[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        self.grads = kept;
        Ok(())
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    let ga = slot(grads, *a, numel(*a));
                    for (ob, &(ia, ib)) in batch.iter().enumerate() {
                        gemm(
                            1.0,
                            MatRef::dense(g, ob * m * n, m, n),
                            MatRef::dense(db, ib * k * n, k, n).t(),
                            1.0,
                            MatMut::dense(ga, ia * m * k, m, k),
                        );
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, numel(*b));
                    for (ob, &(ia, ib)) in batch.iter().enumerate() {
                        gemm(
                            1.0,
                            MatRef::dense(da, ia * m * k, m, k).t(),
                            MatRef::dense(g, ob * m * n, m, n),
                            1.0,
                            MatMut::dense(gb, ib * k * n, k, n),
                        );
                    }
                }
            }
            Op::Transpose(x) => {
                let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                accumulate(grads, *x, transpose_last(&gt).data());
            }
            Op::Add(a, b, ma, mb) | Op::Sub(a, b, ma, mb) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    scatter(slot(grads, *a, numel(*a)), ma, g, |_, gi| gi);
                }
                if needs(*b) {
                    scatter(slot(grads, *b, numel(*b)), mb, g, |_, gi| sign * gi);
                }
            }
            Op::Mul(a, b, ma, mb) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    scatter(slot(grads, *a, numel(*a)), ma, g, |i, gi| gi * db[mb.at(i)]);
                }
                if needs(*b) {
                    scatter(slot(grads, *b, numel(*b)), mb, g, |i, gi| gi * da[ma.at(i)]);
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.len());
                for (d, &gi) in gx.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
            Op::Tanh(x) => {
                let y = out.data();
                let gx = slot(grads, *x, g.len());
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                let gx = slot(grads, *x, g.len());
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                let gx = slot(grads, *x, g.len());
                for ((d, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
            Op::Softmax(x) => {
                let y = out.data();
                let w = out.last_dim();
                let gx = slot(grads, *x, g.len());
                for r in 0..out.rows() {
                    let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        gx[r * w + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let w = out.last_dim();
                let gv = self.data(*gain);
                if needs(*gain) {
                    let gg = slot(grads, *gain, w);
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            gg[j] += gr[j] * xhat[r * w + j];
                        }
                    }
                }
                if needs(*bias) {
                    let gb = slot(grads, *bias, w);
                    for gr in g.chunks(w) {
                        for j in 0..w {
                            gb[j] += gr[j];
                        }
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; w];
                    for (r, gr) in g.chunks(w).enumerate() {
                        let xh = &xhat[r * w..(r + 1) * w];
                        for j in 0..w {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / w as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                        for j in 0..w {
                            gx[r * w + j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                probs,
            } => {
                let vocab = self.value(*logits).last_dim();
                let off = smoothing / vocab as f64;
                let gx = slot(grads, *logits, probs.len());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let scale = g[0] * w;
                    let row = &mut gx[r * vocab..(r + 1) * vocab];
                    for (j, d) in row.iter_mut().enumerate() {
                        let q = off + if j == t { 1.0 - smoothing } else { 0.0 };
                        *d += scale * (probs[r * vocab + j] - q);
                    }
                }
            }
            Op::Sum(x) => {
                let gx = slot(grads, *x, numel(*x));
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::GatherRows { x, ids } => {
                let w = out.last_dim();
                let gx = slot(grads, *x, numel(*x));
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..w {
                        gx[i * w + j] += g[r * w + j];
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if needs(*p) {
                        let gp = slot(grads, *p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceLast { x, start } => {
                let w = self.value(*x).last_dim();
                let len = out.last_dim();
                let gx = slot(grads, *x, numel(*x));
                for r in 0..out.rows() {
                    for j in 0..len {
                        gx[r * w + start + j] += g[r * len + j];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, g.len());
                for ((d, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (d, dvt) = (qv.last_dim(), vv.last_dim());
        let (h, lq, lk) = (spec.heads, spec.query_len, spec.key_len);
        let (dk, dv) = (d / h, dvt / h);
        let scale = 1.0 / (dk as f64).sqrt();
        let nq = spec.key_seq.len();
        let mut gq = vec![0.0; qv.numel()];
        let mut gk = vec![0.0; kv.numel()];
        let mut gv = vec![0.0; vv.numel()];
        let mut dp = vec![0.0; lq * lk];
        for s in 0..nq {
            let ks = spec.key_seq[s];
            for head in 0..h {
                let p = &probs[(s * h + head) * lq * lk..][..lq * lk];
                let g_view = MatRef::strided(g, s * lq * dvt + head * dv, lq, dv, dvt, 1);
                let v_view = MatRef::strided(vv.data(), ks * lk * dvt + head * dv, lk, dv, dvt, 1);
                let q_view = MatRef::strided(qv.data(), s * lq * d + head * dk, lq, dk, d, 1);
                let k_view = MatRef::strided(kv.data(), ks * lk * d + head * dk, lk, dk, d, 1);
                // dV += P^T dO
                gemm(
                    1.0,
                    MatRef::dense(p, 0, lq, lk).t(),
                    g_view,
                    1.0,
                    MatMut::strided(&mut gv, ks * lk * dvt + head * dv, lk, dv, dvt),
                );
                // dP = dO V^T, then through the softmax
                gemm(
                    1.0,
                    g_view,
                    v_view.t(),
                    0.0,
                    MatMut::dense(&mut dp, 0, lq, lk),
                );
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut dp[i * lk..(i + 1) * lk];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..lk {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                gemm(
                    scale,
                    MatRef::dense(&dp, 0, lq, lk),
                    k_view,
                    1.0,
                    MatMut::strided(&mut gq, s * lq * d + head * dk, lq, dk, d),
                );
                gemm(
                    scale,
                    MatRef::dense(&dp, 0, lq, lk).t(),
                    q_view,
                    1.0,
                    MatMut::strided(&mut gk, ks * lk * d + head * dk, lk, dk, d),
                );
            }
        }
        if self.nodes[q.0].requires_grad {
            accumulate(grads, q, &gq);
        }
        if self.nodes[k.0].requires_grad {
            accumulate(grads, k, &gk);
        }
        if self.nodes[v.0].requires_grad {
            accumulate(grads, v, &gv);
        }
    }
}

/// Forward pass of fused attention, shared with tests and the decoder.
pub(crate) fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    spec: &AttentionSpec,
) -> Result<(Tensor, Vec<f64>)> {
    let (d, dvt) = (q.last_dim(), v.last_dim());
    let (h, lq, lk) = (spec.heads, spec.query_len, spec.key_len);
    let nq = spec.key_seq.len();
    let nk = spec.key_valid.len();
    if h == 0 || d % h != 0 || dvt % h != 0 || k.last_dim() != d {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if q.rows() != nq * lq || k.rows() != nk * lk || v.rows() != nk * lk {
        return Err(Error::invalid(
            "attention",
            format!(
                "rows q={} k={} v={} do not match {nq}x{lq} queries / {nk}x{lk} keys",
                q.rows(),
                k.rows(),
                v.rows()
            ),
        ));
    }
    if let Some(&bad) = spec.key_seq.iter().find(|&&s| s >= nk) {
        return Err(Error::invalid(
            "attention",
            format!("key sequence {bad} out of {nk}"),
        ));
    }
    let (dk, dv) = (d / h, dvt / h);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut probs = vec![0.0; nq * h * lq * lk];
    let mut out = vec![0.0; nq * lq * dvt];
    for s in 0..nq {
        let ks = spec.key_seq[s];
        for head in 0..h {
            let p = &mut probs[(s * h + head) * lq * lk..][..lq * lk];
            gemm(
                scale,
                MatRef::strided(q.data(), s * lq * d + head * dk, lq, dk, d, 1),
                MatRef::strided(k.data(), ks * lk * d + head * dk, lk, dk, d, 1).t(),
                0.0,
                MatMut::dense(p, 0, lq, lk),
            );
            for i in 0..lq {
                if !kernels::softmax_row(&mut p[i * lk..(i + 1) * lk], |j| spec.admits(s, i, j)) {
                    return Err(Error::invalid(
                        "attention",
                        format!("query {i} of sequence {s} has no admissible key"),
                    ));
                }
            }
            gemm(
                1.0,
                MatRef::dense(p, 0, lq, lk),
                MatRef::strided(v.data(), ks * lk * dvt + head * dv, lk, dv, dvt, 1),
                0.0,
                MatMut::strided(&mut out, s * lq * dvt + head * dv, lq, dv, dvt),
            );
        }
    }
    let mut shape = q.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = dvt;
    Ok((Tensor::from_parts(shape, out), probs))
}

fn transpose_last(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = t.numel() / (m * n);
    let mut out = vec![0.0; t.numel()];
    for b in 0..batch {
        let src = &t.data()[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Tensor::from_parts(new_shape, out)
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        none => *none = Some(g.to_vec()),
    }
}

fn scatter(dst: &mut [f64], map: &Bcast, g: &[f64], f: impl Fn(usize, f64) -> f64) {
    match map {
        Bcast::Same => {
            for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                *d += f(i, gi);
            }
        }
        _ => {
            for (i, &gi) in g.iter().enumerate() {
                dst[map.at(i)] += f(i, gi);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::default();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(Tensor::eye(2));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let y = g.matmul(r, c).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);

        let z = g.constant(Tensor::zeros([2, 3]));
        let y = g.matmul(a, z).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let mut g = Graph::default();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn batched_matmul_broadcasts_batch_axes() {
        let mut g = Graph::default();
        // a: [2, 1, 2], b: [1, 2, 1] -> [2, 1, 1]
        let a = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[1, 2, 1], &[1.0, 1.0]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 1]);
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::default();
        let x = g.constant(Tensor::vector(&[0.5, 0.5, 0.5]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(&[0.0, 2f64.ln()]));
        let y = g.softmax(x).unwrap();
        let p = g.value(y).data();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = Graph::default();
        let ones = g.constant(Tensor::full([2], 1.0));
        let zeros = g.constant(Tensor::zeros([2]));
        let x = g.constant(Tensor::vector(&[1.0, 3.0]));
        let y = g.layer_norm(x, ones, zeros, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        let c = g.constant(Tensor::vector(&[4.0, 4.0]));
        let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let bias = g.constant(Tensor::vector(&[0.3, -0.7]));
        let y = g.layer_norm(x, zeros, bias, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::default();
        let z = g.constant(Tensor::scalar(0.0));
        let th = g.tanh(z).unwrap();
        let sg = g.sigmoid(z).unwrap();
        assert_eq!(g.value(th).data(), &[0.0]);
        assert_eq!(g.value(sg).data(), &[0.5]);
        let x = g.constant(Tensor::vector(&[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0]);
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::default();
        let x = g.param(Tensor::vector(&[0.0, 1.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let vocab = 7;
        let mut g = Graph::default();
        let logits = g.constant(Tensor::zeros([3, vocab]));
        for eps in [0.0, 0.1, 0.5] {
            let l = g
                .cross_entropy_label_smoothed(logits, &[1, 2, 0], eps, 0)
                .unwrap();
            assert!((g.value(l).data()[0] - (vocab as f64).ln()).abs() < 1e-12);
        }
        let mut peaked = vec![-1e3; vocab];
        peaked[4] = 1e3;
        let logits = g.constant(Tensor::new([1, vocab], peaked).unwrap());
        let l = g
            .cross_entropy_label_smoothed(logits, &[4], 0.0, 0)
            .unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        assert!(g
            .cross_entropy_label_smoothed(logits, &[vocab], 0.0, 0)
            .is_err());
    }

    #[test]
    fn backward_closed_forms() {
        let mut g = Graph::default();
        let x = g.param(Tensor::vector(&[1.0, -2.0, 3.0]));
        let unused = g.param(Tensor::vector(&[5.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let s2 = g.sum(x).unwrap();
        let total = g.add(s, s2).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, -3.0, 7.0]);
        assert!(g.grad(unused).is_none());
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0]);
        assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_name_the_op() {
        let mut g = Graph::default();
        let x = g.constant(Tensor::vector(&[1e308]));
        match g.scale(x, 10.0) {
            Err(Error::NonFinite { op }) => assert_eq!(op, "scale"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn record_is_topologically_ordered() {
        let mut g = Graph::default();
        let a = g.param(Tensor::vector(&[1.0, 2.0]));
        let b = g.tanh(a).unwrap();
        let c = g.mul(a, b).unwrap();
        let _ = g.sum(c).unwrap();
        for i in 0..g.len() {
            for input in g.op_inputs(Var(i)) {
                assert!(input.index() < i);
            }
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_seeded_in_train() {
        let x = Tensor::full([4, 8], 1.0);
        let mut g = Graph::default();
        let v = g.constant(x.clone());
        let y = g.dropout(v, 0.5).unwrap();
        assert_eq!(g.value(y), &x);

        let run = |seed| {
            let mut g = Graph::new(Mode::Train { seed });
            let v = g.constant(x.clone());
            let y = g.dropout(v, 0.5).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert!(run(3).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}

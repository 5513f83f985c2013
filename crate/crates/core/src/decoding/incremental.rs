use crate::attention::{Activation, FusionMode};
use crate::model::{positional_row, Model, L2R, R2L};
use crate::tensor::kernels::{self, matmul};
use crate::{Error, Result};

/// Generation order of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    L2R,
    R2L,
}

impl Direction {
    pub fn start_token(self) -> usize {
        match self {
            Direction::L2R => L2R,
            Direction::R2L => R2L,
        }
    }

    pub fn other(self) -> Direction {
        match self {
            Direction::L2R => Direction::R2L,
            Direction::R2L => Direction::L2R,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::L2R => "l2r",
            Direction::R2L => "r2l",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerCache {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Per-hypothesis key/value cache of every decoder self-attention layer.
///
/// Rows are stored exactly as computed when their position was fed, so a
/// hypothesis whose partner changed mid-search keeps the states it saw at
/// the time.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub direction: Direction,
    /// Inputs so far, start token first. Only `fed` of them are cached.
    pub tokens: Vec<usize>,
    fed: usize,
    layers: Vec<LayerCache>,
}

impl DecoderState {
    /// Number of positions already in the cache.
    pub fn fed(&self) -> usize {
        self.fed
    }

    pub fn push(&mut self, token: usize) {
        self.tokens.push(token);
    }
}

/// Source of the future term for one query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partner {
    /// Attend to state `i` of the slice passed to [`Incremental::advance`],
    /// positions `j <= i` that it has cached.
    State(usize),
    /// No partner: the future term is a zero vector.
    HistoryOnly,
}

/// Self-attention flavour of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Plain causal attention; the unidirectional decoder.
    Uni,
    /// History and partner attention merged by the model's fusion.
    Dual,
}

/// Incremental evaluation of a [`Model`] for one source sentence.
///
/// Computes the same function as the full teacher-forced decoder, one
/// position at a time, without building an autodiff graph.
pub struct Incremental<'m> {
    model: &'m Model,
    src_len: usize,
    mem_k: Vec<Vec<f64>>,
    mem_v: Vec<Vec<f64>>,
}

impl<'m> Incremental<'m> {
    pub fn new(model: &'m Model, src: &[usize]) -> Result<Self> {
        let memory = model.encode_ids(src)?;
        let d = model.config.d_model;
        let mut mem_k = Vec::new();
        let mut mem_v = Vec::new();
        for l in 0..model.config.num_layers {
            let wk = model.params.require(&format!("dec.{l}.cross.wk"))?;
            let wv = model.params.require(&format!("dec.{l}.cross.wv"))?;
            mem_k.push(matmul(memory.data(), wk.data(), src.len(), d, d));
            mem_v.push(matmul(memory.data(), wv.data(), src.len(), d, d));
        }
        Ok(Incremental {
            model,
            src_len: src.len(),
            mem_k,
            mem_v,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn start(&self, direction: Direction) -> DecoderState {
        DecoderState {
            direction,
            tokens: vec![direction.start_token()],
            fed: 0,
            layers: vec![LayerCache::default(); self.model.config.num_layers],
        }
    }

    fn w(&self, name: &str) -> Result<&[f64]> {
        Ok(self.model.params.require(name)?.data())
    }

    /// Feeds the next uncached token of every queried state and returns its
    /// log-probabilities over the whole target vocabulary.
    ///
    /// `queries` pairs a state index with its partner. All queried states
    /// must have exactly one uncached token.
    pub fn advance(
        &self,
        states: &mut [DecoderState],
        queries: &[(usize, Partner)],
        mode: StepMode,
    ) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.model.config;
        let (d, n) = (cfg.d_model, queries.len());
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut seen = vec![false; states.len()];
        for &(i, p) in queries {
            let st = states
                .get(i)
                .ok_or_else(|| Error::invalid("advance", format!("state {i} out of range")))?;
            if st.tokens.len() != st.fed + 1 || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(
                    "advance",
                    format!("state {i} has no single pending token"),
                ));
            }
            if st.fed > cfg.max_len {
                return Err(Error::invalid("advance", "hypothesis longer than max_len"));
            }
            if let Partner::State(j) = p {
                if j >= states.len() || j == i {
                    return Err(Error::invalid(
                        "advance",
                        format!("bad partner {j} for state {i}"),
                    ));
                }
            }
        }

        let embed = self.w("tgt_embed")?;
        let scale = (d as f64).sqrt();
        let mut x = Vec::with_capacity(n * d);
        for &(i, _) in queries {
            let st = &states[i];
            let tok = st.tokens[st.fed];
            if tok >= cfg.tgt_vocab {
                return Err(Error::invalid(
                    "advance",
                    format!("unknown target token id {tok}"),
                ));
            }
            let pe = positional_row(st.fed, d);
            x.extend(
                embed[tok * d..(tok + 1) * d]
                    .iter()
                    .zip(&pe)
                    .map(|(e, p)| e * scale + p),
            );
        }

        for l in 0..cfg.num_layers {
            let p = format!("dec.{l}");
            let q = matmul(&x, self.w(&format!("{p}.self.wq"))?, n, d, d);
            let k = matmul(&x, self.w(&format!("{p}.self.wk"))?, n, d, d);
            let v = matmul(&x, self.w(&format!("{p}.self.wv"))?, n, d, d);
            for (r, &(i, _)) in queries.iter().enumerate() {
                let cache = &mut states[i].layers[l];
                cache.k.extend_from_slice(&k[r * d..(r + 1) * d]);
                cache.v.extend_from_slice(&v[r * d..(r + 1) * d]);
            }
            let mut mixed = vec![0.0; n * d];
            for (r, &(i, partner)) in queries.iter().enumerate() {
                let pos = states[i].fed;
                let qr = &q[r * d..(r + 1) * d];
                let own = &states[i].layers[l];
                let hist = attend(qr, &own.k, &own.v, pos + 1, cfg.num_heads);
                let out = match mode {
                    StepMode::Uni => hist,
                    StepMode::Dual => {
                        let fut = match partner {
                            Partner::State(j) => {
                                let pc = &states[j].layers[l];
                                let rows = (pc.k.len() / d).min(pos + 1);
                                if rows == 0 {
                                    return Err(Error::invalid(
                                        "advance",
                                        format!("partner {j} has an empty cache"),
                                    ));
                                }
                                attend(qr, &pc.k, &pc.v, rows, cfg.num_heads)
                            }
                            Partner::HistoryOnly => vec![0.0; d],
                        };
                        self.fuse(l, &hist, &fut)?
                    }
                };
                mixed[r * d..(r + 1) * d].copy_from_slice(&out);
            }
            let a = matmul(&mixed, self.w(&format!("{p}.self.wo"))?, n, d, d);
            x = self.residual(&format!("{p}.ln1"), &x, &a)?;

            let cq = matmul(&x, self.w(&format!("{p}.cross.wq"))?, n, d, d);
            let mut ctx = vec![0.0; n * d];
            for r in 0..n {
                let out = attend(
                    &cq[r * d..(r + 1) * d],
                    &self.mem_k[l],
                    &self.mem_v[l],
                    self.src_len,
                    cfg.num_heads,
                );
                ctx[r * d..(r + 1) * d].copy_from_slice(&out);
            }
            let c = matmul(&ctx, self.w(&format!("{p}.cross.wo"))?, n, d, d);
            x = self.residual(&format!("{p}.ln2"), &x, &c)?;

            let mut h = matmul(&x, self.w(&format!("{p}.ffn.w1"))?, n, d, cfg.d_ff);
            let b1 = self.w(&format!("{p}.ffn.b1"))?;
            for row in h.chunks_mut(cfg.d_ff) {
                for (v, b) in row.iter_mut().zip(b1) {
                    *v = (*v + b).max(0.0);
                }
            }
            let mut f = matmul(&h, self.w(&format!("{p}.ffn.w2"))?, n, cfg.d_ff, d);
            let b2 = self.w(&format!("{p}.ffn.b2"))?;
            for row in f.chunks_mut(d) {
                for (v, b) in row.iter_mut().zip(b2) {
                    *v += b;
                }
            }
            x = self.residual(&format!("{p}.ln3"), &x, &f)?;
        }
        for &(i, _) in queries {
            states[i].fed += 1;
        }

        let vocab = cfg.tgt_vocab;
        let logits = matmul(&x, self.w("out_proj")?, n, d, vocab);
        let mut out = Vec::with_capacity(n);
        for row in logits.chunks(vocab) {
            let mut lp = vec![0.0; vocab];
            kernels::log_softmax_row(row, &mut lp);
            if lp.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "advance" });
            }
            out.push(lp);
        }
        Ok(out)
    }

    fn residual(&self, ln: &str, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let sum: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
        let gain = self.w(&format!("{ln}.gain"))?;
        let bias = self.w(&format!("{ln}.bias"))?;
        Ok(kernels::layer_norm(&sum, gain, bias, self.model.config.ln_eps).0)
    }

    fn fuse(&self, layer: usize, hist: &[f64], fut: &[f64]) -> Result<Vec<f64>> {
        let f = &self.model.config.fusion;
        Ok(match f.mode {
            FusionMode::Linear => hist
                .iter()
                .zip(fut)
                .map(|(h, u)| h + f.lambda * u)
                .collect(),
            FusionMode::Nonlinear => hist
                .iter()
                .zip(fut)
                .map(|(h, u)| {
                    let a = match f.activation {
                        Activation::Tanh => u.tanh(),
                        Activation::Relu => u.max(0.0),
                    };
                    h + f.lambda * a
                })
                .collect(),
            FusionMode::Gate => {
                let w = hist.len();
                let weight = self.w(&format!("dec.{layer}.gate.weight"))?;
                let bias = self.w(&format!("dec.{layer}.gate.bias"))?;
                let both: Vec<f64> = hist.iter().chain(fut).copied().collect();
                let mut pre = matmul(&both, weight, 1, 2 * w, 2 * w);
                for (p, b) in pre.iter_mut().zip(bias) {
                    *p = kernels::sigmoid(*p + b);
                }
                (0..w)
                    .map(|i| pre[i] * hist[i] + pre[w + i] * fut[i])
                    .collect()
            }
        })
    }
}

/// Multi-head attention of one query row over the first `rows` cached
/// key/value rows.
fn attend(q: &[f64], k: &[f64], v: &[f64], rows: usize, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut p = vec![0.0; rows];
    for h in 0..heads {
        let qh = &q[h * dk..(h + 1) * dk];
        for (j, pj) in p.iter_mut().enumerate() {
            let kh = &k[j * d + h * dk..j * d + (h + 1) * dk];
            *pj = scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>();
        }
        kernels::softmax_row(&mut p, |_| true);
        for (j, pj) in p.iter().enumerate() {
            let vh = &v[j * d + h * dk..j * d + (h + 1) * dk];
            for (o, x) in out[h * dk..(h + 1) * dk].iter_mut().zip(vh) {
                *o += pj * x;
            }
        }
    }
    out
}

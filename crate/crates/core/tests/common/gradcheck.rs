//! Finite-difference checks shared by the gradient tests and the
//! acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbnmt::attention::{
    fuse, multi_head_attention, sb_multi_head, sb_multi_head_batched, sbdpa, scaled_dot_attention,
    Activation, AttentionConfig, AttentionParams, FusionConfig, GateParams, MaskSpec, StreamLayout,
};
use sbnmt::model::{Model, ModelConfig};
use sbnmt::tensor::{
    finite_difference_check, finite_difference_check_multi, max_relative_error, AttentionSpec,
};
use sbnmt::training::{joint_loss_value, LossConfig, Trainer, TrainingConfig, TrainingTriple};
use sbnmt::{Graph, Tensor, Var};

pub const TOL: f64 = 1e-4;
pub const H: f64 = 1e-5;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Random weights that make a scalar out of any tensor, so the checked
/// gradient is not uniform.
fn project_to_scalar(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

/// Worst relative error of each named check.
pub type Errors = Vec<(String, f64)>;

fn check(
    out: &mut Errors,
    name: &str,
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> sbnmt::Result<Var>,
) {
    let err = finite_difference_check_multi(
        |g, v| {
            let y = f(g, v)?;
            Ok(project_to_scalar(g, y, 99))
        },
        inputs,
        H,
        usize::MAX,
    )
    .unwrap();
    out.push((name.to_string(), err));
}

pub fn elementwise_and_matrix_ops() -> Errors {
    let mut e = Errors::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let row = random(&mut rng, &[4]);
    let m = random(&mut rng, &[4, 5]);
    let batched = random(&mut rng, &[2, 3, 4]);
    check(&mut e, "matmul", &[a.clone(), m.clone()], |g, v| {
        g.matmul(v[0], v[1])
    });
    check(
        &mut e,
        "batched matmul",
        &[batched.clone(), m.clone()],
        |g, v| g.matmul(v[0], v[1]),
    );
    check(&mut e, "transpose", std::slice::from_ref(&a), |g, v| {
        g.transpose(v[0])
    });
    check(&mut e, "add", &[a.clone(), b.clone()], |g, v| {
        g.add(v[0], v[1])
    });
    check(
        &mut e,
        "add broadcast",
        &[a.clone(), row.clone()],
        |g, v| g.add(v[0], v[1]),
    );
    check(&mut e, "sub", &[a.clone(), b.clone()], |g, v| {
        g.sub(v[0], v[1])
    });
    check(
        &mut e,
        "sub broadcast",
        &[a.clone(), row.clone()],
        |g, v| g.sub(v[0], v[1]),
    );
    check(&mut e, "mul", &[a.clone(), b.clone()], |g, v| {
        g.mul(v[0], v[1])
    });
    check(
        &mut e,
        "mul broadcast",
        &[a.clone(), row.clone()],
        |g, v| g.mul(v[0], v[1]),
    );
    check(&mut e, "scale", std::slice::from_ref(&a), |g, v| {
        g.scale(v[0], -2.5)
    });
    check(&mut e, "tanh", std::slice::from_ref(&a), |g, v| {
        g.tanh(v[0])
    });
    check(&mut e, "sigmoid", std::slice::from_ref(&a), |g, v| {
        g.sigmoid(v[0])
    });
    // Keep every input away from the kink.
    let away = a.map(|x| if x.abs() < 0.05 { 0.3 } else { x });
    check(&mut e, "relu", &[away], |g, v| g.relu(v[0]));
    check(&mut e, "softmax", std::slice::from_ref(&a), |g, v| {
        g.softmax(v[0])
    });
    let allowed = [
        true, false, true, true, true, true, false, true, false, true, true, true,
    ];
    check(
        &mut e,
        "masked softmax",
        std::slice::from_ref(&a),
        |g, v| g.masked_softmax(v[0], &allowed),
    );
    check(&mut e, "sum", std::slice::from_ref(&a), |g, v| g.sum(v[0]));
    check(&mut e, "mean", std::slice::from_ref(&a), |g, v| {
        g.mean(v[0])
    });
    check(&mut e, "gather rows", std::slice::from_ref(&a), |g, v| {
        g.gather_rows(v[0], &[2, 0, 2, 1])
    });
    check(&mut e, "concat", &[a.clone(), b.clone()], |g, v| {
        g.concat_last(&[v[0], v[1]])
    });
    check(&mut e, "slice", std::slice::from_ref(&a), |g, v| {
        g.slice_last(v[0], 1, 2)
    });
    check(&mut e, "reshape", std::slice::from_ref(&a), |g, v| {
        g.reshape(v[0], &[2, 6])
    });
    e
}

pub fn layer_norm_and_cross_entropy() -> Errors {
    let mut e = Errors::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[4, 6]);
    let gain = random(&mut rng, &[6]);
    let bias = random(&mut rng, &[6]);
    check(&mut e, "layer norm", &[x.clone(), gain, bias], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-6)
    });
    let targets = [1, 0, 5, 3];
    let weights = [0.25, 0.0, 0.5, 0.25];
    for smoothing in [0.0, 0.1] {
        let err = finite_difference_check(
            |g, v| g.cross_entropy_weighted(v, &targets, &weights, smoothing),
            &x,
            H,
        )
        .unwrap();
        e.push((format!("cross entropy (smoothing {smoothing})"), err));
        let err = finite_difference_check(
            |g, v| g.cross_entropy_label_smoothed(v, &targets, smoothing, 0),
            &x,
            H,
        )
        .unwrap();
        e.push((format!("label-smoothed cross entropy ({smoothing})"), err));
    }
    e
}

pub fn attention_primitives() -> Errors {
    let mut e = Errors::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&mut rng, &[4, 6]);
    let k = random(&mut rng, &[4, 6]);
    let v = random(&mut rng, &[4, 6]);
    for mask in [MaskSpec::None, MaskSpec::CausalSelf, MaskSpec::CausalCross] {
        check(
            &mut e,
            &format!("scaled dot {mask:?}"),
            &[q.clone(), k.clone(), v.clone()],
            |g, x| scaled_dot_attention(g, x[0], x[1], x[2], mask),
        );
    }
    // Batched, padded, multi-head.
    let q = random(&mut rng, &[6, 4]);
    let kv = random(&mut rng, &[6, 4]);
    let spec = AttentionSpec {
        heads: 2,
        query_len: 3,
        key_len: 3,
        key_seq: vec![1, 0],
        key_valid: vec![3, 2],
        causal: true,
    };
    check(&mut e, "fused attention", &[q, kv.clone(), kv], |g, x| {
        g.attention(x[0], x[1], x[2], spec.clone())
    });
    e
}

fn attention_inputs(rng: &mut ChaCha8Rng, d: usize) -> Vec<Tensor> {
    (0..4).map(|_| random(rng, &[d, d])).collect()
}

fn params(v: &[Var]) -> AttentionParams {
    AttentionParams {
        wq: v[0],
        wk: v[1],
        wv: v[2],
        wo: v[3],
    }
}

pub fn multi_head_and_fusion() -> Errors {
    let mut e = Errors::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 8;
    let cfg = AttentionConfig::new(d, 2).unwrap();
    let mut inputs = attention_inputs(&mut rng, d);
    inputs.push(random(&mut rng, &[5, d]));
    inputs.push(random(&mut rng, &[5, d]));
    check(&mut e, "multi-head", &inputs, |g, v| {
        multi_head_attention(g, v[4], v[5], v[5], &params(v), cfg, MaskSpec::CausalSelf)
    });

    let hist = random(&mut rng, &[3, 4]);
    let fut = random(&mut rng, &[3, 4]);
    for fc in [
        FusionConfig::linear(0.7),
        FusionConfig::nonlinear(0.5, Activation::Tanh),
        FusionConfig::nonlinear(0.5, Activation::Relu),
    ] {
        let fut = fut.map(|x| if x.abs() < 0.05 { 0.4 } else { x });
        check(
            &mut e,
            &format!("fuse {:?}", fc.mode),
            &[hist.clone(), fut],
            |g, v| fuse(g, v[0], v[1], &fc, None),
        );
    }
    let w = random(&mut rng, &[8, 8]);
    let b = random(&mut rng, &[8]);
    check(&mut e, "fuse gate", &[hist, fut, w, b], |g, v| {
        let gate = GateParams {
            weight: v[2],
            bias: v[3],
        };
        fuse(g, v[0], v[1], &FusionConfig::gate(), Some(&gate))
    });
    e
}

pub fn synchronous_bidirectional_attention() -> Errors {
    let mut e = Errors::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let streams: Vec<Tensor> = (0..6).map(|_| random(&mut rng, &[4, 6])).collect();
    for fc in [
        FusionConfig::linear(0.3),
        FusionConfig::nonlinear(0.5, Activation::Tanh),
    ] {
        check(&mut e, "sbdpa", &streams, |g, v| {
            let (f, b) = sbdpa(
                g,
                (v[0], v[1], v[2]),
                (v[3], v[4], v[5]),
                MaskSpec::CausalSelf,
                &fc,
                None,
            )?;
            g.concat_last(&[f, b])
        });
    }

    let d = 8;
    let cfg = AttentionConfig::new(d, 2).unwrap();
    let mut inputs = attention_inputs(&mut rng, d);
    inputs.push(random(&mut rng, &[4, d]));
    inputs.push(random(&mut rng, &[4, d]));
    inputs.push(random(&mut rng, &[2 * d, 2 * d]));
    inputs.push(random(&mut rng, &[2 * d]));
    check(&mut e, "sb multi-head gate", &inputs, |g, v| {
        let gate = GateParams {
            weight: v[6],
            bias: v[7],
        };
        let (f, b) = sb_multi_head(
            g,
            (v[4], v[4], v[4]),
            (v[5], v[5], v[5]),
            &params(v),
            cfg,
            MaskSpec::CausalSelf,
            &FusionConfig::gate(),
            Some(&gate),
        )?;
        g.concat_last(&[f, b])
    });

    let layout = StreamLayout {
        batch: 2,
        len: 3,
        valid: vec![3, 2, 3, 1],
    };
    let mut inputs = attention_inputs(&mut rng, d);
    inputs.push(random(&mut rng, &[12, d]));
    check(&mut e, "sb multi-head batched", &inputs, |g, v| {
        sb_multi_head_batched(
            g,
            v[4],
            &params(v),
            2,
            &layout,
            &FusionConfig::nonlinear(0.4, Activation::Tanh),
            None,
        )
    });
    e
}

pub fn grad_model(fusion: FusionConfig, seed: u64) -> Model {
    let cfg = ModelConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        src_vocab: 10,
        tgt_vocab: 11,
        dropout: 0.0,
        fusion,
        max_len: 16,
        ln_eps: 1e-6,
    };
    Model::new(cfg, seed).unwrap()
}

pub fn small_batch() -> Vec<TrainingTriple> {
    vec![
        TrainingTriple::gold(vec![2, 5, 7, 3], &[4, 6, 5]),
        TrainingTriple::new(
            vec![9, 4],
            &[5, 8],
            &[7, 5, 10, 4],
            (
                sbnmt::training::Provenance::Gold,
                sbnmt::training::Provenance::Pseudo,
            ),
        ),
    ]
}

/// Perturbs a spread of components of every parameter and compares with
/// the analytic gradient of the joint loss.
pub fn joint_loss_errors(fusion: FusionConfig, per_param: usize) -> Errors {
    let model = grad_model(fusion, 17);
    let data = small_batch();
    let refs: Vec<&TrainingTriple> = data.iter().collect();
    let mut tc = TrainingConfig::desk();
    tc.loss = LossConfig::default();
    let trainer = Trainer::new(model.clone(), tc.clone()).unwrap();
    let (_, grads) = trainer.gradients(&refs, 0).unwrap();
    let mut out = Errors::new();
    for (name, t) in model.params.iter() {
        let n = t.numel();
        let stride = n.div_ceil(per_param).max(1);
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for i in (0..n).step_by(stride) {
            let mut probe = model.clone();
            let orig = t.data()[i];
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig + H;
            let up = joint_loss_value(&probe, &refs, &tc.loss).unwrap();
            probe.params.get_mut(name).unwrap().data_mut()[i] = orig - H;
            let down = joint_loss_value(&probe, &refs, &tc.loss).unwrap();
            a.push(grads.get(name).unwrap().data()[i]);
            num.push((up - down) / (2.0 * H));
        }
        out.push((
            format!("joint loss {:?} {name}", fusion.mode),
            max_relative_error(&a, &num),
        ));
    }
    out
}

/// Every operation check.
pub fn all_ops() -> Errors {
    let mut e = elementwise_and_matrix_ops();
    e.extend(layer_norm_and_cross_entropy());
    e.extend(attention_primitives());
    e.extend(multi_head_and_fusion());
    e.extend(synchronous_bidirectional_attention());
    e
}

pub fn worst(e: &Errors) -> (String, f64) {
    e.iter().fold((String::new(), 0.0), |w, (n, x)| {
        if *x > w.1 {
            (n.clone(), *x)
        } else {
            w
        }
    })
}

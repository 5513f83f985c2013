//! Synchronous bidirectional attention on random streams: what each fusion
//! does to the history term, and how the partner mask limits what a query
//! can see.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbnmt::attention::{
    fuse, sbdpa, scaled_dot_attention, Activation, FusionConfig, GateParams, MaskSpec,
};
use sbnmt::{Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn main() -> sbnmt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (len, d) = (5, 4);
    let mut g = Graph::default();
    let mut stream = |g: &mut Graph| {
        let q = g.constant(random(&mut rng, len, d));
        let k = g.constant(random(&mut rng, len, d));
        let v = g.constant(random(&mut rng, len, d));
        (q, k, v)
    };
    let fwd = stream(&mut g);
    let bwd = stream(&mut g);

    let hist = scaled_dot_attention(&mut g, fwd.0, fwd.1, fwd.2, MaskSpec::CausalSelf)?;
    let fut = scaled_dot_attention(&mut g, fwd.0, bwd.1, bwd.2, MaskSpec::CausalCross)?;
    println!("forward history row 0: {:?}", g.value(hist).row(0));
    println!(
        "forward future row 0 (partner start token only): {:?}",
        g.value(fut).row(0)
    );

    for (name, cfg) in [
        ("linear 0", FusionConfig::linear(0.0)),
        ("linear 0.5", FusionConfig::linear(0.5)),
        ("tanh 0.5", FusionConfig::nonlinear(0.5, Activation::Tanh)),
        ("relu 0.5", FusionConfig::nonlinear(0.5, Activation::Relu)),
    ] {
        let (h_fwd, _) = sbdpa(&mut g, fwd, bwd, MaskSpec::CausalSelf, &cfg, None)?;
        let shift = g.value(h_fwd).max_abs_diff(g.value(hist));
        println!("{name:<11} max |fused - history| = {shift:.4}");
    }

    // Zero gate weights and biases open both gates halfway.
    let weight = g.constant(Tensor::zeros(vec![2 * d, 2 * d]));
    let bias = g.constant(Tensor::zeros(vec![2 * d]));
    let gated = fuse(
        &mut g,
        hist,
        fut,
        &FusionConfig::gate(),
        Some(&GateParams { weight, bias }),
    )?;
    let h = g.value(hist).data()[0];
    let f = g.value(fut).data()[0];
    println!(
        "gate with zero weights: {:.4} = 0.5 * {h:.4} + 0.5 * {f:.4}",
        g.value(gated).data()[0]
    );
    Ok(())
}

//! Compares the analytic gradient of the joint two-direction loss with
//! central differences on a small model.

use sbnmt::attention::FusionConfig;
use sbnmt::model::{Model, ModelConfig};
use sbnmt::tensor::max_relative_error;
use sbnmt::training::{joint_loss_value, Trainer, TrainingConfig, TrainingTriple};

fn main() -> sbnmt::Result<()> {
    let cfg = ModelConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        src_vocab: 10,
        tgt_vocab: 10,
        dropout: 0.0,
        fusion: FusionConfig::gate(),
        max_len: 16,
        ln_eps: 1e-6,
    };
    let model = Model::new(cfg, 17)?;
    let data = [
        TrainingTriple::gold(vec![4, 5, 6], &[6, 5, 4]),
        TrainingTriple::gold(vec![7, 8], &[8, 7, 9]),
    ];
    let batch: Vec<&TrainingTriple> = data.iter().collect();
    let tc = TrainingConfig::desk();
    let trainer = Trainer::new(model.clone(), tc.clone())?;
    let (loss, grads) = trainer.gradients(&batch, 0)?;
    println!("joint loss {loss:.6}");

    let h = 1e-5;
    for (name, t) in model.params.iter() {
        let picks: Vec<usize> = (0..t.numel()).step_by(t.numel().div_ceil(3)).collect();
        let mut numeric = Vec::new();
        for &i in &picks {
            let mut probe = model.clone();
            let w = probe.params.get_mut(name).unwrap();
            w.data_mut()[i] += h;
            let up = joint_loss_value(&probe, &batch, &tc.loss)?;
            probe.params.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
            let down = joint_loss_value(&probe, &batch, &tc.loss)?;
            numeric.push((up - down) / (2.0 * h));
        }
        let analytic: Vec<f64> = picks
            .iter()
            .map(|&i| grads.get(name).unwrap().data()[i])
            .collect();
        println!(
            "{name:<22} max relative error {:.2e}",
            max_relative_error(&analytic, &numeric)
        );
    }
    Ok(())
}

//! Periodic checkpoints, averaging of the last few, and resuming a run
//! that stops part way.

use sbnmt::attention::FusionConfig;
use sbnmt::model::{Model, ModelConfig};
use sbnmt::training::{
    average_checkpoints, list_checkpoints, load_checkpoint, LossCurve, Trainer, TrainingConfig,
    TrainingTriple,
};

fn main() -> sbnmt::Result<()> {
    let cfg = ModelConfig {
        num_layers: 1,
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        src_vocab: 12,
        tgt_vocab: 12,
        dropout: 0.1,
        fusion: FusionConfig::default(),
        max_len: 16,
        ln_eps: 1e-6,
    };
    let data: Vec<TrainingTriple> = (0..40)
        .map(|i| {
            let s: Vec<usize> = (0..3 + i % 5).map(|j| 4 + (i * 3 + j) % 8).collect();
            TrainingTriple::gold(s.clone(), &s)
        })
        .collect();
    let mut tc = TrainingConfig::desk();
    tc.batch_size = 8;
    tc.warmup_steps = 20;
    tc.checkpoint_every = 10;

    let dir = tempfile::tempdir().expect("temporary directory");
    let mut trainer = Trainer::new(Model::new(cfg.clone(), 1)?, tc.clone())?;
    trainer.run(&data, 35, Some(dir.path()), |_, _| Ok(true))?;
    let ckpts = list_checkpoints(dir.path())?;
    for p in &ckpts {
        println!("{}", p.file_name().unwrap().to_string_lossy());
    }

    let avg = average_checkpoints(&ckpts, 2)?;
    let last = load_checkpoint(ckpts.last().unwrap())?;
    let moved: f64 = avg
        .iter()
        .filter(|(name, _)| last.get(name).is_some())
        .map(|(name, t)| t.max_abs_diff(last.get(name).unwrap()))
        .fold(0.0, f64::max);
    println!("average of the last 2 differs from the last by at most {moved:.4}");

    // Steps after the last checkpoint are lost; drop them from the curve
    // and train on from the checkpoint.
    let mut resumed = Trainer::resume(cfg, tc, ckpts.last().unwrap())?;
    let loss_file = dir.path().join("loss.tsv");
    LossCurve::truncate_after(&loss_file, resumed.step())?;
    resumed.run(&data, 50, Some(dir.path()), |_, _| Ok(true))?;
    let curve = LossCurve::read(&loss_file)?;
    println!(
        "loss curve has {} entries, last {:?}",
        curve.len(),
        curve.last().unwrap()
    );
    Ok(())
}

//! Builds training triples for the joint model: trains one model per
//! direction, decodes the training sources with both, and pairs each
//! gold target with the other direction's output.

use sbnmt::attention::FusionConfig;
use sbnmt::decoding::SearchConfig;
use sbnmt::harness::data::{generate_task, task_vocabulary, TaskKind, TaskSpec};
use sbnmt::harness::pipeline::{encode_pairs, gold_triples};
use sbnmt::model::{Model, ModelConfig};
use sbnmt::training::{
    build_pseudo_triples, expand_six_triples, Directions, Trainer, TrainingConfig,
};

fn main() -> sbnmt::Result<()> {
    let spec = TaskSpec::new(TaskKind::Rotate, 8, (3, 7), (600, 0, 0), 4);
    let data = generate_task(&spec)?;
    let vocab = task_vocabulary(spec.vocab_size);
    let train = encode_pairs(&data.train, &vocab, &vocab)?;

    let mut cfg = ModelConfig::desk(vocab.len(), vocab.len());
    cfg.d_model = 32;
    cfg.num_heads = 4;
    cfg.d_ff = 64;
    cfg.num_layers = 1;
    cfg.max_len = 16;
    // Plain unidirectional decoders.
    cfg.fusion = FusionConfig::linear(0.0);
    let baseline = |directions: Directions, seed: u64| -> sbnmt::Result<Model> {
        let mut tc = TrainingConfig::desk();
        tc.batch_size = 32;
        tc.warmup_steps = 50;
        tc.checkpoint_every = 0;
        tc.loss.directions = directions;
        let mut tr = Trainer::new(Model::new(cfg.clone(), seed)?, tc)?;
        tr.run(&gold_triples(&train), 250, None, |_, _| Ok(true))?;
        Ok(tr.model)
    };
    let l2r = baseline(Directions::L2R, 1)?;
    let r2l = baseline(Directions::R2L, 2)?;

    let search = SearchConfig::new(4, 16);
    let subset = &train[..3];
    let two = build_pseudo_triples(subset, &l2r, &r2l, &search)?;
    let six = expand_six_triples(subset, &l2r, &r2l, &search)?;
    println!(
        "{} sources -> {} triples ({} with the combined strategy)",
        subset.len(),
        two.len(),
        six.len()
    );
    let words = |ids: &[usize]| vocab.decode(&ids[1..ids.len() - 1]).join(" ");
    for t in &two {
        println!(
            "src {:<16} fwd[{:?}] {:<16} bwd[{:?}] {}",
            vocab.decode(&t.src).join(" "),
            t.fwd,
            words(&t.y_fwd),
            t.bwd,
            words(&t.y_bwd)
        );
    }
    Ok(())
}

//! Trains a small joint model on sequence reversal, then decodes a few
//! sources greedily, with single-direction beam search and with the
//! paired bidirectional beam search. The last source also prints the
//! per-step search trace.

use sbnmt::decoding::{
    greedy_decode, standard_beam_search, sync_bidirectional_beam_search, Direction, Pairing,
    SearchConfig,
};
use sbnmt::harness::data::{generate_task, task_vocabulary, TaskKind, TaskSpec};
use sbnmt::harness::pipeline::{encode_pairs, gold_triples};
use sbnmt::model::{Model, ModelConfig};
use sbnmt::training::{Trainer, TrainingConfig};

fn main() -> sbnmt::Result<()> {
    let spec = TaskSpec::new(TaskKind::Reverse, 8, (3, 8), (2000, 0, 4), 11);
    let data = generate_task(&spec)?;
    let vocab = task_vocabulary(spec.vocab_size);
    let train = encode_pairs(&data.train, &vocab, &vocab)?;
    let test = encode_pairs(&data.test, &vocab, &vocab)?;

    let mut cfg = ModelConfig::desk(vocab.len(), vocab.len());
    cfg.d_model = 32;
    cfg.num_heads = 4;
    cfg.d_ff = 64;
    cfg.num_layers = 2;
    cfg.max_len = 16;
    let mut tc = TrainingConfig::desk();
    tc.batch_size = 32;
    tc.warmup_steps = 100;
    tc.checkpoint_every = 0;
    let mut trainer = Trainer::new(Model::new(cfg, 2)?, tc)?;
    let curve = trainer.run(&gold_triples(&train), 600, None, |_, _| Ok(true))?;
    println!("trained 600 steps, loss {:.3}", curve.last().unwrap().1);

    let model = &trainer.model;
    let words = |ids: &[usize]| vocab.decode(ids).join(" ");
    for (i, (src, tgt)) in test.iter().enumerate() {
        println!("source    {}", words(src));
        println!("reference {}", words(tgt));
        let g = greedy_decode(model, src, 16, Direction::L2R)?;
        println!("  greedy l2r  {}", words(&g.output()));
        let cfg = SearchConfig::new(4, 16);
        for dir in [Direction::L2R, Direction::R2L] {
            let r = standard_beam_search(model, src, &cfg, dir)?;
            println!(
                "  beam {}    {} ({:.3})",
                dir.name(),
                words(&r.output()),
                r.score
            );
        }
        let mut sb_cfg = cfg.clone();
        sb_cfg.trace = i + 1 == test.len();
        let r = sync_bidirectional_beam_search(model, src, &sb_cfg)?;
        println!(
            "  joint       {} ({:.3}, from {})",
            words(&r.output()),
            r.score,
            r.direction().name()
        );
        let one_best = SearchConfig {
            pairing: Pairing::OneBest,
            ..cfg
        };
        let r1 = sync_bidirectional_beam_search(model, src, &one_best)?;
        println!("  joint 1best {} ({:.3})", words(&r1.output()), r1.score);
        for step in &r.trace {
            println!("    {step}");
        }
    }
    Ok(())
}

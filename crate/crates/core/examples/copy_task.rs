use std::time::Instant;

use sbnmt::decoding::{Direction, SearchConfig};
use sbnmt::harness::data::{generate_task, task_vocabulary, TaskKind, TaskSpec};
use sbnmt::harness::pipeline::{encode_pairs, exact_match, gold_triples, Decoder};
use sbnmt::model::{Model, ModelConfig};
use sbnmt::training::{Trainer, TrainingConfig};

fn main() -> sbnmt::Result<()> {
    let spec = TaskSpec::new(TaskKind::Copy, 20, (3, 12), (10_000, 200, 1000), 7);
    let data = generate_task(&spec)?;
    let vocab = task_vocabulary(spec.vocab_size);
    let train = encode_pairs(&data.train, &vocab, &vocab)?;
    let dev = encode_pairs(&data.dev, &vocab, &vocab)?;
    let test = encode_pairs(&data.test, &vocab, &vocab)?;

    let model = Model::new(ModelConfig::desk(vocab.len(), vocab.len()), 1)?;
    let mut trainer = Trainer::new(model, TrainingConfig::desk())?;
    let triples = gold_triples(&train);
    let greedy = Decoder::Greedy(Direction::L2R);
    let t0 = Instant::now();
    let mut last = 0.0;
    trainer.run(&triples, 20_000, None, |tr, loss| {
        last = loss;
        let step = tr.step();
        if step % 100 == 0 {
            println!(
                "step {step:5} loss {loss:.4} ({:.0}s)",
                t0.elapsed().as_secs_f64()
            );
        }
        if step % 500 == 0 {
            let em = exact_match(&tr.model, &dev, &greedy, 16)?;
            println!("step {step:5} dev exact match {em:.3}");
            return Ok(em < 1.0);
        }
        Ok(true)
    })?;
    let sb = Decoder::Bidirectional(SearchConfig::new(4, 16));
    let em = exact_match(&trainer.model, &test, &sb, 16)?;
    println!(
        "final loss {last:.4}, test exact match {em:.4}, {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

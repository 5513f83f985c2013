//! Corpus BLEU, smoothed BLEU and the full evaluation report on a handful
//! of token sequences.

use sbnmt::harness::metrics::{
    corpus_bleu, corpus_bleu_detailed, corpus_bleu_smoothed, EvalReport,
};

fn main() -> sbnmt::Result<()> {
    let lines = [
        ("the cat sat on the mat", "the cat sat on the mat"),
        ("a dog ran in the park", "the dog ran in a park"),
        ("hello there", "hello there friend"),
        ("one two three four five six", "one two three four five"),
    ];
    let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let cands: Vec<Vec<String>> = lines.iter().map(|l| split(l.0)).collect();
    let refs: Vec<Vec<String>> = lines.iter().map(|l| split(l.1)).collect();

    let d = corpus_bleu_detailed(&cands, &refs, 4, false)?;
    println!("matches {:?} of {:?}", d.matches, d.totals);
    println!("BLEU          {:.2}", corpus_bleu(&cands, &refs, 4)?);
    println!(
        "BLEU smoothed {:.2}",
        corpus_bleu_smoothed(&cands, &refs, 4)?
    );

    // The second and fourth outputs came from the right-to-left stream.
    let wins = [true, false, true, false];
    let report = EvalReport::compute(&cands, &refs, &refs, Some(&wins), 2, 3)?;
    print!("{}", report.to_table("example"));
    print!("{}", report.to_kv());
    Ok(())
}

//! L2R and R2L baselines against the joint model on the suffix-hard task.
//!
//! `cargo run --release --example suffix_hard -- [seed] [baseline_steps] [sb_steps] [min_len] [max_len]`

use sbnmt::harness::data::{TaskKind, TaskSpec};
use sbnmt::harness::experiment::{mechanism_experiment, MechanismConfig};

fn main() -> sbnmt::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let seed = args.first().copied().unwrap_or(1);
    let lengths = (
        args.get(3).map_or(12, |&n| n as usize),
        args.get(4).map_or(12, |&n| n as usize),
    );
    let task = TaskSpec::new(
        TaskKind::SuffixHard,
        12,
        lengths,
        (4000, 0, 300),
        100 + seed,
    );
    let mut cfg = MechanismConfig::small(task, seed);
    if let Some(&n) = args.get(1) {
        cfg.baseline_steps = n;
    }
    if let Some(&n) = args.get(2) {
        cfg.sb_steps = n;
    }
    let r = mechanism_experiment(&cfg, |line| println!("{line}"))?;
    println!("{}", r.summary());
    println!("baselines unbalanced: {}", r.baselines_unbalanced());
    println!("joint model balanced: {}", r.sb_balanced());
    Ok(())
}

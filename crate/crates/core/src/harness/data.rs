use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::Vocabulary;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    /// Cyclic shift left by one.
    Rotate,
    /// Both ends of the target are pointer chains through the source: the
    /// first `ceil(L/3)` outputs follow `y[0] = x[0]`,
    /// `y[i] = x[y[i-1] mod L]`, the last `ceil(L/3)` do the same from the
    /// right, and the middle is copied. Generated from its outer edge an
    /// end costs one lookup per token; generated from the inside its first
    /// token needs the whole chain at once.
    SuffixHard,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "rotate" => Ok(TaskKind::Rotate),
            "suffix-hard" => Ok(TaskKind::SuffixHard),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Rotate => "rotate",
            TaskKind::SuffixHard => "suffix-hard",
        }
    }

    /// Target symbol indices for a sequence of source symbol indices.
    pub fn apply(self, src: &[usize]) -> Vec<usize> {
        match self {
            TaskKind::Copy => src.to_vec(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Rotate => {
                let mut t = src.to_vec();
                if !t.is_empty() {
                    t.rotate_left(1);
                }
                t
            }
            TaskKind::SuffixHard => {
                let l = src.len();
                let c = l.div_ceil(3);
                let mut t = src.to_vec();
                for i in 1..c.min(l) {
                    t[i] = src[t[i - 1] % l];
                }
                for i in (l - c.min(l)..l.saturating_sub(1)).rev() {
                    t[i] = src[t[i + 1] % l];
                }
                t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of ordinary symbols.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(
        kind: TaskKind,
        vocab_size: usize,
        lengths: (usize, usize),
        sizes: (usize, usize, usize),
        seed: u64,
    ) -> Self {
        TaskSpec {
            kind,
            vocab_size,
            min_len: lengths.0,
            max_len: lengths.1,
            train: sizes.0,
            dev: sizes.1,
            test: sizes.2,
            seed,
        }
    }
}

/// One `source<TAB>target` example as token strings.
pub type Pair = (Vec<String>, Vec<String>);

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TaskData {
    pub train: Vec<Pair>,
    pub dev: Vec<Pair>,
    pub test: Vec<Pair>,
}

pub fn symbol(i: usize) -> String {
    format!("w{i}")
}

/// Draws distinct source sequences, so the three splits never share a
/// source, and maps them through the task.
pub fn generate_task(spec: &TaskSpec) -> Result<TaskData> {
    if spec.vocab_size < 2 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(
            "task needs vocab_size >= 2 and 1 <= min_len <= max_len".into(),
        ));
    }
    let total = spec.train + spec.dev + spec.test;
    let space: f64 = (spec.min_len..=spec.max_len)
        .map(|l| (spec.vocab_size as f64).powi(l as i32))
        .sum();
    if space < 2.0 * total as f64 {
        return Err(Error::Config(format!(
            "vocabulary of {} is too small for {total} distinct sequences of length {}..={}",
            spec.vocab_size, spec.min_len, spec.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(total);
    let mut all = Vec::with_capacity(total);
    while all.len() < total {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len)
            .map(|_| rng.gen_range(0..spec.vocab_size))
            .collect();
        if seen.insert(src.clone()) {
            let tgt = spec.kind.apply(&src);
            all.push((
                src.into_iter().map(symbol).collect(),
                tgt.into_iter().map(symbol).collect(),
            ));
        }
    }
    let test = all.split_off(spec.train + spec.dev);
    let dev = all.split_off(spec.train);
    Ok(TaskData {
        train: all,
        dev,
        test,
    })
}

/// The symbols of a task, in id order.
pub fn task_vocabulary(vocab_size: usize) -> Vocabulary {
    let words: Vec<String> = (0..vocab_size).map(symbol).collect();
    Vocabulary::from_tokens(words.iter().map(String::as_str))
}

pub fn format_corpus(pairs: &[Pair]) -> String {
    let mut out = String::new();
    for (s, t) in pairs {
        out.push_str(&s.join(" "));
        out.push('\t');
        out.push_str(&t.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<Pair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (s, t) = l
                .split_once('\t')
                .ok_or_else(|| Error::format(path, format!("line {}: missing tab", i + 1)))?;
            let toks = |x: &str| x.split_whitespace().map(str::to_string).collect::<Vec<_>>();
            Ok((toks(s), toks(t)))
        })
        .collect()
}

pub fn read_corpus(path: &Path) -> Result<Vec<Pair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

pub fn write_corpus(path: &Path, pairs: &[Pair]) -> Result<()> {
    fs::write(path, format_corpus(pairs)).map_err(|e| Error::io(path, e))
}

/// Reads one tokenized sentence per line.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_functions() {
        assert_eq!(TaskKind::Rotate.apply(&[1, 2, 3]), vec![2, 3, 1]);
        assert_eq!(TaskKind::Reverse.apply(&[1, 2, 1]), vec![1, 2, 1]);
        assert_eq!(TaskKind::SuffixHard.apply(&[4]), vec![4]);
    }

    #[test]
    fn suffix_hard_chains_from_both_edges() {
        let x = [5, 2, 9, 4, 0, 7, 3];
        // L = 7, three on each side, one copied.
        // Left: 5, x[5] = 7, x[7 % 7] = 5. Right: 3, x[3] = 4, x[4] = 0.
        assert_eq!(TaskKind::SuffixHard.apply(&x), vec![5, 7, 5, 4, 0, 4, 3]);
    }

    #[test]
    fn corpus_round_trip() {
        let pairs = vec![(
            vec!["a".to_string(), "b".to_string()],
            vec!["b".to_string()],
        )];
        let p = Path::new("c.tsv");
        assert_eq!(parse_corpus(&format_corpus(&pairs), p).unwrap(), pairs);
        assert!(parse_corpus("no tab here\n", p).is_err());
    }
}

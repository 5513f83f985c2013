use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::{Error, Result};

/// Corpus-level BLEU with its ingredients.
#[derive(Clone, Debug, PartialEq)]
pub struct Bleu {
    /// 0..=100.
    pub score: f64,
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Hash + Eq + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Modified n-gram precisions for `n = 1..=max_n` with clipped counts summed
/// over the corpus, times the brevity penalty. With `smooth`, an order with
/// zero matches uses `(0 + 1) / (total + 1)` instead of zeroing the score.
pub fn corpus_bleu_detailed<T: Hash + Eq + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
    smooth: bool,
) -> Result<Bleu> {
    if candidates.is_empty() {
        return Err(Error::invalid("corpus_bleu", "empty corpus"));
    }
    if candidates.len() != references.len() || max_n == 0 {
        return Err(Error::invalid(
            "corpus_bleu",
            format!(
                "{} candidates vs {} references",
                candidates.len(),
                references.len()
            ),
        ));
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut c, mut r) = (0, 0);
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for n in 1..=max_n {
            let rc = ngram_counts(refr, n);
            for (g, k) in ngram_counts(cand, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else if smooth {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            zero = true;
            break;
        };
        log_sum += p.ln();
    }
    let score = if zero || bp == 0.0 {
        0.0
    } else {
        100.0 * bp * (log_sum / max_n as f64).exp()
    };
    Ok(Bleu {
        score,
        matches,
        totals,
        brevity_penalty: bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// Unsmoothed corpus BLEU, 0..=100.
pub fn corpus_bleu<T: Hash + Eq + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    Ok(corpus_bleu_detailed(candidates, references, max_n, false)?.score)
}

/// Corpus BLEU with add-one smoothing on zero-match orders.
pub fn corpus_bleu_smoothed<T: Hash + Eq + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<f64> {
    Ok(corpus_bleu_detailed(candidates, references, max_n, true)?.score)
}

/// Mean accuracy of the first `k` and the last `k` reference tokens, each
/// compared at the same offset from the respective end of the candidate.
/// Sentences shorter than `k` use their full length.
pub fn prefix_suffix_accuracy<T: PartialEq>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    k: usize,
) -> (f64, f64) {
    let (mut first, mut last, mut n) = (0.0, 0.0, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        n += 1;
        let kk = k.min(r.len());
        if kk == 0 {
            let same = if c.is_empty() { 1.0 } else { 0.0 };
            first += same;
            last += same;
            continue;
        }
        let f = (0..kk).filter(|&i| c.get(i) == Some(&r[i])).count();
        let l = (1..=kk)
            .filter(|&i| c.len() >= i && c[c.len() - i] == r[r.len() - i])
            .count();
        first += f as f64 / kk as f64;
        last += l as f64 / kk as f64;
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    (first / n as f64, last / n as f64)
}

/// One row of a first-k / last-k table, e.g. `L2R   40.21% / 35.10%`.
pub fn accuracy_row(label: &str, first: f64, last: f64) -> String {
    format!("{label:<6}{:.2}% / {:.2}%", 100.0 * first, 100.0 * last)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    /// Source lengths `lo..hi`.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub bleu: f64,
    pub mean_output_len: f64,
}

/// BLEU per source-length bucket of width `width`. Buckets without
/// sentences are left out.
pub fn length_bucket_report<T: Hash + Eq + Clone, S>(
    candidates: &[Vec<T>],
    references: &[Vec<T>],
    sources: &[Vec<S>],
    width: usize,
) -> Result<Vec<Bucket>> {
    if width == 0 {
        return Err(Error::invalid(
            "length_bucket_report",
            "bucket width must be positive",
        ));
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in sources.iter().enumerate().take(candidates.len()) {
        groups.entry(s.len() / width).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(b, idx)| {
            let c: Vec<Vec<T>> = idx.iter().map(|&i| candidates[i].clone()).collect();
            let r: Vec<Vec<T>> = idx.iter().map(|&i| references[i].clone()).collect();
            Ok(Bucket {
                lo: b * width,
                hi: (b + 1) * width,
                count: idx.len(),
                bleu: corpus_bleu_smoothed(&c, &r, 4)?,
                mean_output_len: c.iter().map(Vec::len).sum::<usize>() as f64 / c.len() as f64,
            })
        })
        .collect()
}

/// Corpus-level evaluation summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: f64,
    pub bleu_smoothed: f64,
    pub exact_match: f64,
    pub k: usize,
    pub first_k: f64,
    pub last_k: f64,
    /// Share of sentences won by the L2R half, when known.
    pub l2r_win_rate: Option<f64>,
    pub buckets: Vec<Bucket>,
    pub sentences: usize,
}

impl EvalReport {
    pub fn compute<T: Hash + Eq + Clone, S>(
        candidates: &[Vec<T>],
        references: &[Vec<T>],
        sources: &[Vec<S>],
        l2r_wins: Option<&[bool]>,
        k: usize,
        bucket_width: usize,
    ) -> Result<Self> {
        let (first_k, last_k) = prefix_suffix_accuracy(candidates, references, k);
        let exact = candidates
            .iter()
            .zip(references)
            .filter(|(c, r)| c == r)
            .count();
        Ok(EvalReport {
            bleu: corpus_bleu(candidates, references, 4)?,
            bleu_smoothed: corpus_bleu_smoothed(candidates, references, 4)?,
            exact_match: exact as f64 / candidates.len() as f64,
            k,
            first_k,
            last_k,
            l2r_win_rate: l2r_wins
                .filter(|w| !w.is_empty())
                .map(|w| w.iter().filter(|&&x| x).count() as f64 / w.len() as f64),
            buckets: length_bucket_report(candidates, references, sources, bucket_width)?,
            sentences: candidates.len(),
        })
    }

    /// Line-oriented `key=value` form.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sentences={}", self.sentences);
        let _ = writeln!(s, "bleu={:.4}", self.bleu);
        let _ = writeln!(s, "bleu_smoothed={:.4}", self.bleu_smoothed);
        let _ = writeln!(s, "exact_match={:.6}", self.exact_match);
        let _ = writeln!(s, "first_{}={:.6}", self.k, self.first_k);
        let _ = writeln!(s, "last_{}={:.6}", self.k, self.last_k);
        if let Some(w) = self.l2r_win_rate {
            let _ = writeln!(s, "l2r_win_rate={w:.6}");
        }
        for b in &self.buckets {
            let _ = writeln!(
                s,
                "bucket_{}_{}=count:{} bleu:{:.4} mean_len:{:.3}",
                b.lo, b.hi, b.count, b.bleu, b.mean_output_len
            );
        }
        s
    }

    /// Aligned plain-text table.
    pub fn to_table(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14}{:>10}", "metric", label);
        let _ = writeln!(s, "{:<14}{:>10.2}", "BLEU", self.bleu);
        let _ = writeln!(s, "{:<14}{:>10.2}", "BLEU (smooth)", self.bleu_smoothed);
        let _ = writeln!(s, "{:<14}{:>9.2}%", "exact match", 100.0 * self.exact_match);
        let _ = writeln!(
            s,
            "{:<14}{:>9.2}%",
            format!("first {}", self.k),
            100.0 * self.first_k
        );
        let _ = writeln!(
            s,
            "{:<14}{:>9.2}%",
            format!("last {}", self.k),
            100.0 * self.last_k
        );
        if let Some(w) = self.l2r_win_rate {
            let _ = writeln!(s, "{:<14}{:>9.2}%", "L2R wins", 100.0 * w);
        }
        if !self.buckets.is_empty() {
            let _ = writeln!(
                s,
                "\n{:<10}{:>7}{:>9}{:>10}",
                "src len", "count", "BLEU", "mean len"
            );
            for b in &self.buckets {
                let _ = writeln!(
                    s,
                    "{:<10}{:>7}{:>9.2}{:>10.2}",
                    format!("{}-{}", b.lo, b.hi - 1),
                    b.count,
                    b.bleu,
                    b.mean_output_len
                );
            }
        }
        s
    }
}

/// `k  BLEU` table, one row per beam size.
pub fn sweep_table(rows: &[(usize, f64)]) -> String {
    let mut s = format!("{:>6}{:>10}\n", "beam", "BLEU");
    for (k, b) in rows {
        let _ = writeln!(s, "{k:>6}{b:>10.2}");
    }
    s
}

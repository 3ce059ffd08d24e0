use std::collections::HashMap;

pub(crate) fn ngram_counts<'a>(tokens: &'a [String], n: usize) -> HashMap<&'a [String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4 in [0, 1]: geometric mean of clipped 1..4-gram precisions
/// times the brevity penalty against the closest reference length (shorter
/// wins ties). `smoothing` adds one to numerator and denominator for n ≥ 2.
pub fn bleu4(candidate: &[String], references: &[Vec<String>], smoothing: bool) -> f64 {
    if candidate.is_empty() {
        log::warn!("BLEU-4 on an empty candidate is 0");
        return 0.0;
    }
    if references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let clipped: usize = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        let total = candidate.len().saturating_sub(n - 1).max(1);
        let (num, den) = if smoothing && n > 1 {
            (clipped as f64 + 1.0, total as f64 + 1.0)
        } else {
            (clipped as f64, total as f64)
        };
        if num == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln() / 4.0;
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_sum.exp()
}

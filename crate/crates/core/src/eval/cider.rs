use std::collections::{BTreeMap, HashMap, HashSet};

use super::bleu::ngram_counts;

#[derive(Debug, Clone, PartialEq)]
pub struct CiderScores {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

// Ordered so sums over n-grams are reproducible run to run.
type Vector<'a> = BTreeMap<&'a [String], f64>;

/// Corpus CIDEr: per n = 1..4, the TF-IDF cosine between the candidate and
/// each reference, averaged over references, then averaged over n and
/// scaled by 10. Document frequency counts samples whose reference set
/// contains the n-gram; idf = ln N − ln max(1, df).
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> CiderScores {
    assert_eq!(candidates.len(), references.len(), "one reference set per candidate");
    let docs = candidates.len();
    if docs == 0 {
        return CiderScores { per_sample: Vec::new(), mean: 0.0 };
    }
    if docs == 1 {
        log::warn!("CIDEr on a single-sample corpus: every idf is zero");
    }
    let log_n = (docs as f64).ln();
    let mut per_sample = vec![0.0; docs];
    for n in 1..=4 {
        let mut df: HashMap<&[String], f64> = HashMap::new();
        for refs in references {
            let seen: HashSet<&[String]> = refs.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
            if refs.is_empty() {
                continue;
            }
            let vc = tfidf(cand, n, &df, log_n);
            let sim: f64 = refs.iter().map(|r| cosine(&vc, &tfidf(r, n, &df, log_n))).sum();
            per_sample[i] += sim / refs.len() as f64 / 4.0 * 10.0;
        }
    }
    let mean = per_sample.iter().sum::<f64>() / docs as f64;
    CiderScores { per_sample, mean }
}

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &HashMap<&[String], f64>, log_n: f64) -> Vector<'a> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
            (g, c as f64 * (log_n - d.ln()))
        })
        .collect()
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let norm = |v: &Vector| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

use rust_stemmers::{Algorithm, Stemmer};

/// Unigram alignment statistics for one candidate/reference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
}

/// Aligns exact matches first, then stem matches among the leftovers. Each
/// candidate token, left to right, takes the leftmost free reference token.
pub fn align(candidate: &[String], reference: &[String]) -> Alignment {
    let stemmer = Stemmer::create(Algorithm::English);
    let mut cand_to_ref: Vec<Option<usize>> = vec![None; candidate.len()];
    let mut used = vec![false; reference.len()];
    let stage = |key: &dyn Fn(&str) -> String, cand_to_ref: &mut Vec<Option<usize>>, used: &mut Vec<bool>| {
        let ref_keys: Vec<String> = reference.iter().map(|w| key(w)).collect();
        for (i, w) in candidate.iter().enumerate() {
            if cand_to_ref[i].is_some() {
                continue;
            }
            let k = key(w);
            if let Some(j) = (0..reference.len()).find(|&j| !used[j] && ref_keys[j] == k) {
                cand_to_ref[i] = Some(j);
                used[j] = true;
            }
        }
    };
    stage(&|w| w.to_string(), &mut cand_to_ref, &mut used);
    stage(&|w| stemmer.stem(w).into_owned(), &mut cand_to_ref, &mut used);

    let mut matches = 0;
    let mut chunks = 0;
    let mut prev: Option<usize> = None;
    for m in &cand_to_ref {
        match m {
            Some(j) => {
                matches += 1;
                if prev.is_none_or(|p| p + 1 != *j) {
                    chunks += 1;
                }
                prev = Some(*j);
            }
            None => prev = None,
        }
    }
    Alignment { matches, chunks }
}

/// Exact-plus-stem METEOR without synonym matching, in [0, 1]: unigram
/// F-mean with recall weighted 9:1, times a fragmentation penalty of
/// 0.5·(chunks/matches)³. Best score over the references.
pub fn meteor_lite(candidate: &[String], references: &[Vec<String>]) -> f64 {
    references.iter().map(|r| meteor_pair(candidate, r)).fold(0.0, f64::max)
}

pub fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    let Alignment { matches, chunks } = align(candidate, reference);
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

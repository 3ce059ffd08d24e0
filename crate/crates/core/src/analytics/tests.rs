use proptest::prelude::{prop_assert, proptest};

use super::*;
use crate::data::generator::TaskCounts;
use crate::rng::Rng;
use crate::train::tests::toy;

fn token(modality: Modality, probs: Vec<Vec<f64>>, selected: Vec<Vec<usize>>) -> TokenTrace {
    TokenTrace { sequence: 0, position: 0, modality, vocab_id: None, probs, selected }
}

/// Probabilities are only used by PCA; the selection is what gets counted.
fn one_layer(modality: Modality, selected: &[usize]) -> TokenTrace {
    let mut p = vec![0.0; 4];
    for &e in selected {
        p[e] = 1.0 / selected.len() as f64;
    }
    token(modality, vec![p], vec![selected.to_vec()])
}

#[test]
fn distribution_counts_each_selection_as_one_over_k() {
    let mut set = TraceSet::new(4, 2, vec![1]);
    set.tokens = vec![
        one_layer(Modality::Tactile, &[0, 1]),
        one_layer(Modality::Tactile, &[0, 2]),
        one_layer(Modality::Text, &[3, 2]),
    ];
    let d = expert_distribution(&set, 1).unwrap();
    assert_eq!(d[&Modality::Tactile], vec![0.5, 0.25, 0.25, 0.0]);
    assert_eq!(d[&Modality::Text], vec![0.0, 0.0, 0.5, 0.5]);
    assert!(expert_distribution(&set, 0).is_err());
}

#[test]
fn absent_modality_is_not_reported() {
    let mut set = TraceSet::new(4, 2, vec![0]);
    set.tokens = vec![one_layer(Modality::Text, &[1, 2])];
    let d = expert_distribution(&set, 0).unwrap();
    assert_eq!(d.len(), 1);
    assert!(!d.contains_key(&Modality::Tactile));
    assert!(expert_distribution(&TraceSet::new(4, 2, vec![0]), 0).is_err());
}

proptest! {
    #[test]
    fn distribution_sums_to_one(seed in 0u64..500, n in 1usize..40) {
        let mut rng = Rng::new(seed);
        let mut set = TraceSet::new(6, 3, vec![0]);
        for _ in 0..n {
            let mut experts: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut experts);
            let m = if rng.uniform() < 0.5 { Modality::Text } else { Modality::Tactile };
            set.tokens.push(token(m, vec![vec![1.0 / 6.0; 6]], vec![experts[..3].to_vec()]));
        }
        for (_, v) in expert_distribution(&set, 0).unwrap() {
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}

#[test]
fn pca_matches_an_svd_oracle() {
    let mut rng = Rng::new(42);
    let (n, m) = (30, 6);
    // anisotropic cloud so the leading variances are well separated
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..m).map(|j| rng.normal() * (m - j) as f64 * 1.5 + j as f64).collect())
        .collect();
    let pca = Pca::fit(&rows).unwrap();

    let mean: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = nalgebra::DMatrix::from_fn(n, m, |i, j| rows[i][j] - mean[j]);
    let svd = centered.svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..m)
        .map(|c| (svd.singular_values[c], (0..m).map(|j| vt[(c, j)]).collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (c, (s, v)) in pairs.into_iter().enumerate().take(3) {
        let mut v = v;
        fix_sign(&mut v);
        let var = s * s / (n - 1) as f64;
        assert!((pca.variances[c] - var).abs() < 1e-8 * var.max(1.0));
        for (a, b) in pca.components[c].iter().zip(&v) {
            assert!((a - b).abs() < 1e-8, "component {c}: {a} vs {b}");
        }
    }
}

#[test]
fn pathways_rank_by_first_component() {
    // two layers of two experts; all spread lies along one axis
    let mut set = TraceSet::new(2, 1, vec![0, 1]);
    for (i, x) in [0.5, 0.9, 0.1, 0.6, 0.5].into_iter().enumerate() {
        let mut t = token(
            Modality::Text,
            vec![vec![x, 1.0 - x], vec![0.5, 0.5]],
            vec![vec![usize::from(x < 0.5)], vec![0]],
        );
        t.position = i;
        set.tokens.push(t);
    }
    let top = top_pathways(&set, 3).unwrap();
    // mean 0.52, so |x - 0.52| orders tokens 2, 1, 3
    assert_eq!(top.iter().map(|p| p.token).collect::<Vec<_>>(), vec![2, 1, 3]);
    assert_eq!(top.iter().map(|p| p.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!((top[0].score - 0.42 * 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(top[0].layers, vec![vec![1], vec![0]]);
    assert_eq!(layer_sequence(&top[0].layers), "1|0");

    assert!(matches!(top_pathways(&set, 6), Err(Error::Parameter(_))));
    let mut same = TraceSet::new(2, 1, vec![0]);
    same.tokens = vec![token(Modality::Text, vec![vec![0.3, 0.7]], vec![vec![1]]); 4];
    assert!(matches!(top_pathways(&same, 2), Err(Error::Degenerate(_))));
}

#[test]
fn traces_from_a_model() {
    let t = toy(4, TaskCounts { fpu: 3, tip: 2, cdr: 1 });
    assert!(matches!(collect_traces(&t.model, &t.examples), Err(Error::Stage(_))));
    let moe = t.model.upcycle().unwrap();
    let set = collect_traces(&moe, &t.examples).unwrap();
    let expected: usize = t.examples.iter().map(|e| e.row.ids.len() - 1 + e.pooled.shape()[0]).sum();
    assert_eq!(set.tokens.len(), expected);
    assert_eq!(set.layers, vec![0, 1]);
    let tactile = set.tokens.iter().filter(|t| t.modality == Modality::Tactile).count();
    assert_eq!(tactile, t.examples.iter().map(|e| e.pooled.shape()[0]).sum::<usize>());
    assert!(set.tokens.iter().all(|t| (t.modality == Modality::Text) == t.vocab_id.is_some()));
    assert_eq!(set.tokens.last().unwrap().sequence, t.examples.len() - 1);
    for tok in &set.tokens {
        assert!(tok.selected.iter().all(|s| s.len() == 2));
    }
}

#[test]
fn export_round_trip_and_rerun_is_identical() {
    let t = toy(6, TaskCounts { fpu: 2, tip: 1, cdr: 1 });
    let moe = t.model.upcycle().unwrap();
    let set = collect_traces(&moe, &t.examples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("traces.json");
    set.save_json(&trace_path).unwrap();
    let reloaded = TraceSet::load_json(&trace_path).unwrap();
    assert_eq!(reloaded, set);

    let report = analyze(&reloaded, 5).unwrap();
    export(&report, dir.path(), ExportFormat::Csv).unwrap();
    export(&report, dir.path(), ExportFormat::Json).unwrap();

    let header = std::fs::read_to_string(dir.path().join("distribution.csv")).unwrap();
    assert!(header.starts_with("layer,modality,expert,fraction\n"));
    let header = std::fs::read_to_string(dir.path().join("pathways.csv")).unwrap();
    assert!(header.starts_with("pathway_rank,token_id,layer_sequence\n"));

    let dist = read_distribution_csv(&dir.path().join("distribution.csv")).unwrap();
    assert_eq!(dist, report.distribution);
    let paths = read_pathways_csv(&dir.path().join("pathways.csv")).unwrap();
    assert_eq!(paths.len(), 5);
    assert_eq!(paths[0].token_id, report.pathways[0].token);
    assert_eq!(read_json(&dir.path().join("analysis.json")).unwrap(), report);

    let again = analyze(&TraceSet::load_json(&trace_path).unwrap(), 5).unwrap();
    let bits = |r: &AnalysisReport| -> Vec<u64> {
        r.distribution.iter().map(|d| d.fraction.to_bits()).chain(r.pathways.iter().map(|p| p.score.to_bits())).collect()
    };
    assert_eq!(bits(&again), bits(&report));
}

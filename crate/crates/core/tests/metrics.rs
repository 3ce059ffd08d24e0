//! Metric implementations against the shipped oracle fixture
//! (`fixtures/metric_cases.json`, produced by `fixtures/metric_oracles.py`).

use serde::Deserialize;
use touchmoe_core::eval::{align, bleu4, cider, meteor_pair, metric_tokens, Alignment};

const TOL: f64 = 1e-6;

#[derive(Deserialize)]
struct BleuCase {
    name: String,
    candidate: String,
    references: Vec<String>,
    smoothing: bool,
    expected: f64,
}

#[derive(Deserialize)]
struct CiderCase {
    name: String,
    candidates: Vec<String>,
    references: Vec<Vec<String>>,
    expected: Vec<f64>,
}

#[derive(Deserialize)]
struct MeteorCase {
    name: String,
    candidate: String,
    reference: String,
    matches: usize,
    chunks: usize,
    expected: f64,
}

#[derive(Deserialize)]
struct Fixture {
    bleu4: Vec<BleuCase>,
    cider: Vec<CiderCase>,
    meteor: Vec<MeteorCase>,
}

fn fixture() -> Fixture {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/metric_cases.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn toks(texts: &[String]) -> Vec<Vec<String>> {
    texts.iter().map(|t| metric_tokens(t)).collect()
}

#[test]
fn bleu4_matches_fixture() {
    let cases = fixture().bleu4;
    assert!(cases.len() >= 10);
    for c in cases {
        let got = bleu4(&metric_tokens(&c.candidate), &toks(&c.references), c.smoothing);
        assert!((got - c.expected).abs() < TOL, "{}: {got} vs {}", c.name, c.expected);
    }
}

#[test]
fn cider_matches_fixture() {
    let cases = fixture().cider;
    let values: usize = cases.iter().map(|c| c.expected.len()).sum();
    assert!(values >= 10);
    for c in cases {
        let refs: Vec<Vec<Vec<String>>> = c.references.iter().map(|r| toks(r)).collect();
        let got = cider(&toks(&c.candidates), &refs);
        for (i, (g, e)) in got.per_sample.iter().zip(&c.expected).enumerate() {
            assert!((g - e).abs() < TOL, "{} sample {i}: {g} vs {e}", c.name);
        }
        let mean = c.expected.iter().sum::<f64>() / c.expected.len() as f64;
        assert!((got.mean - mean).abs() < TOL);
    }
}

#[test]
fn meteor_matches_fixture() {
    let cases = fixture().meteor;
    assert!(cases.len() >= 10);
    for c in cases {
        let (cand, reference) = (metric_tokens(&c.candidate), metric_tokens(&c.reference));
        assert_eq!(
            align(&cand, &reference),
            Alignment { matches: c.matches, chunks: c.chunks },
            "{}: alignment",
            c.name
        );
        let got = meteor_pair(&cand, &reference);
        assert!((got - c.expected).abs() < TOL, "{}: {got} vs {}", c.name, c.expected);
    }
}

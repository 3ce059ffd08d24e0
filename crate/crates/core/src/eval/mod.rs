//! Caption metrics, the optional LLM judge and the benchmark runner.

mod benchmark;
mod bleu;
mod cider;
pub mod judge;
mod meteor;

pub use benchmark::{
    run_benchmark, score_outputs, Aggregate, BenchmarkReport, EvalRecord, JudgeSummary, Metric, MetricSelection,
    REPORT_SCHEMA_VERSION,
};
pub use bleu::bleu4;
pub use cider::{cider, CiderScores};
pub use judge::{parse_scores, Judge, JudgeConfig, JudgeOutcome, JudgeScores};
pub use meteor::{align, meteor_lite, meteor_pair, Alignment};

/// Lowercased whitespace tokens. Punctuation is already spaced out in the
/// corpus, so it stays a token of its own.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Reads a yes/no conclusion from the first `yes` or `no` token.
pub fn extract_conclusion(text: &str) -> Option<bool> {
    metric_tokens(text)
        .iter()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .find_map(|t| match t {
            "yes" => Some(true),
            "no" => Some(false),
            _ => None,
        })
}

pub fn conclusion_matches(generated: &str, expected: bool) -> bool {
    extract_conclusion(generated) == Some(expected)
}

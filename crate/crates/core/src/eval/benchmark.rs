use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::judge::{Judge, JudgeOutcome};
use super::{bleu4, cider, conclusion_matches, meteor_lite, metric_tokens};
use crate::data::generator::scenario_conclusion;
use crate::data::{ConversationSample, PromptTemplate, Vocab};
use crate::error::{Error, Result};
use crate::model::TouchLanguageModel;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu4,
    Cider,
    Meteor,
    /// Yes/no agreement on templated reasoning questions.
    Conclusion,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bleu4, Metric::Cider, Metric::Meteor, Metric::Conclusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Bleu4 => "bleu4",
            Metric::Cider => "cider",
            Metric::Meteor => "meteor",
            Metric::Conclusion => "conclusion",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::Parameter(format!("unknown metric `{s}` (allowed: bleu4, cider, meteor, conclusion)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetricSelection {
    pub metrics: BTreeSet<Metric>,
    pub bleu_smoothing: bool,
}

impl MetricSelection {
    /// Parses a comma-separated list such as `bleu4,cider,meteor`.
    pub fn parse(list: &str) -> Result<Self> {
        let metrics = list.split(',').filter(|s| !s.trim().is_empty()).map(Metric::from_str).collect::<Result<BTreeSet<_>>>()?;
        if metrics.is_empty() {
            return Err(Error::Parameter("no metrics selected".into()));
        }
        Ok(MetricSelection { metrics, bleu_smoothing: false })
    }
}

/// One evaluated sample. BLEU-4, METEOR-lite and conclusion scores are
/// reported ×100; CIDEr is on its usual ×10 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub task: String,
    pub generated: String,
    pub references: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judge: Vec<JudgeOutcome>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub samples: usize,
    /// Mean per score key over the records that have it.
    pub means: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
}

impl Aggregate {
    fn of<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Aggregate {
        let mut agg = Aggregate::default();
        for r in records {
            agg.samples += 1;
            for (k, v) in &r.scores {
                *agg.means.entry(k.clone()).or_insert(0.0) += v;
                *agg.counts.entry(k.clone()).or_insert(0) += 1;
            }
        }
        for (k, v) in agg.means.iter_mut() {
            *v /= agg.counts[k] as f64;
        }
        agg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeSummary {
    pub judge: String,
    pub scored: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub metrics: Vec<Metric>,
    pub bleu_smoothing: bool,
    pub records: Vec<EvalRecord>,
    pub per_task: BTreeMap<String, Aggregate>,
    pub overall: Aggregate,
    pub judges: Vec<JudgeSummary>,
}

/// Scores already generated outputs, one per sample.
pub fn score_outputs(
    samples: &[ConversationSample],
    outputs: &[String],
    selection: &MetricSelection,
    judges: &mut [Judge],
) -> Result<BenchmarkReport> {
    if samples.len() != outputs.len() {
        return Err(Error::Parameter(format!("{} outputs for {} samples", outputs.len(), samples.len())));
    }
    let cands: Vec<Vec<String>> = outputs.iter().map(|o| metric_tokens(o)).collect();
    let refs: Vec<Vec<Vec<String>>> =
        samples.iter().map(|s| s.answers.iter().map(|a| metric_tokens(a)).collect()).collect();
    let cider_scores = selection.metrics.contains(&Metric::Cider).then(|| cider(&cands, &refs));

    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut scores = BTreeMap::new();
        for &m in &selection.metrics {
            let v = match m {
                Metric::Bleu4 => Some(100.0 * bleu4(&cands[i], &refs[i], selection.bleu_smoothing)),
                Metric::Meteor => Some(100.0 * meteor_lite(&cands[i], &refs[i])),
                Metric::Cider => cider_scores.as_ref().map(|c| c.per_sample[i]),
                Metric::Conclusion => scenario_conclusion(&s.question, &s.latents)
                    .map(|want| if conclusion_matches(&outputs[i], want) { 100.0 } else { 0.0 }),
            };
            if let Some(v) = v {
                scores.insert(m.as_str().to_string(), v);
            }
        }
        let mut judged = Vec::new();
        for j in judges.iter_mut() {
            let outcome = j.score(&s.id, &s.question, &s.answers[0], &outputs[i]);
            if let Some(sc) = &outcome.scores {
                scores.insert(format!("judge.{}", j.config.name), sc.mean);
            }
            judged.push(outcome);
        }
        records.push(EvalRecord {
            id: s.id.clone(),
            task: s.task.as_str().to_string(),
            generated: outputs[i].clone(),
            references: s.answers.clone(),
            scores,
            judge: judged,
        });
    }
    let mut by_task: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in &records {
        by_task.entry(r.task.clone()).or_default().push(r);
    }
    let per_task = by_task.into_iter().map(|(t, rs)| (t, Aggregate::of(rs))).collect();
    let overall = Aggregate::of(&records);
    let judge_summaries = judges
        .iter()
        .enumerate()
        .map(|(k, j)| {
            let scored = records.iter().filter(|r| r.judge[k].scores.is_some()).count();
            JudgeSummary { judge: j.config.name.clone(), scored, missing: records.len() - scored }
        })
        .collect();
    Ok(BenchmarkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metrics: selection.metrics.iter().copied().collect(),
        bleu_smoothing: selection.bleu_smoothing,
        records,
        per_task,
        overall,
        judges: judge_summaries,
    })
}

/// Greedy generation for every sample, then [`score_outputs`].
pub fn run_benchmark(
    model: &TouchLanguageModel,
    samples: &[ConversationSample],
    template: &PromptTemplate,
    vocab: &Vocab,
    selection: &MetricSelection,
    judges: &mut [Judge],
    max_new: usize,
) -> Result<BenchmarkReport> {
    let outputs = samples
        .iter()
        .map(|s| model.generate(&s.tactile, &s.question, template, vocab, max_new))
        .collect::<Result<Vec<_>>>()?;
    score_outputs(samples, &outputs, selection, judges)
}

impl BenchmarkReport {
    /// Writes `report.json` and `report.csv` (one row per task plus
    /// `overall`) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("report.csv");
        let keys: BTreeSet<&String> = self.overall.means.keys().collect();
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["task".to_string(), "samples".to_string()];
        header.extend(keys.iter().map(|k| k.to_string()));
        w.write_record(&header)?;
        let rows = self.per_task.iter().map(|(t, a)| (t.as_str(), a)).chain(std::iter::once(("overall", &self.overall)));
        for (task, agg) in rows {
            let mut row = vec![task.to_string(), agg.samples.to_string()];
            row.extend(keys.iter().map(|k| agg.means.get(*k).map(|v| format!("{v}")).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BenchmarkReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: BenchmarkReport = serde_json::from_str(&text)?;
        if report.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!("report schema {} (expected {REPORT_SCHEMA_VERSION})", report.schema_version)));
        }
        Ok(report)
    }
}

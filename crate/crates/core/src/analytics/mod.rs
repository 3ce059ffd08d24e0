//! Routing analytics: per-modality expert distributions and token pathways
//! ranked by their first principal component.

mod pca;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use pca::{fix_sign, symmetric_eigen, Pca};

use crate::error::{Error, Result};
use crate::model::{Modality, RoutingRecord, TouchLanguageModel};
use crate::tensor::no_grad;
use crate::train::Example;

/// One token's routing through every MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    /// Index of the sequence the token came from.
    pub sequence: usize,
    pub position: usize,
    pub modality: Modality,
    /// Vocabulary id for text tokens.
    pub vocab_id: Option<u32>,
    /// Probability vector per MoE layer.
    pub probs: Vec<Vec<f64>>,
    /// Selected experts per MoE layer.
    pub selected: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub experts: usize,
    pub top_k: usize,
    /// Block indices of the MoE layers, in order.
    pub layers: Vec<usize>,
    pub tokens: Vec<TokenTrace>,
}

impl TraceSet {
    pub fn new(experts: usize, top_k: usize, layers: Vec<usize>) -> Self {
        TraceSet { experts, top_k, layers, tokens: Vec::new() }
    }

    /// Adds the records of one forward pass. `vocab_ids[t]` names the text
    /// token at position `t`, if any.
    pub fn push_sequence(&mut self, records: &[RoutingRecord], vocab_ids: &[Option<u32>]) -> Result<()> {
        let sequence = self.tokens.iter().map(|t| t.sequence + 1).max().unwrap_or(0);
        let len = vocab_ids.len();
        let mut tokens: Vec<Option<TokenTrace>> = vec![None; len];
        for r in records {
            let slot = self
                .layers
                .iter()
                .position(|&l| l == r.layer)
                .ok_or_else(|| Error::Parameter(format!("record from non-MoE layer {}", r.layer)))?;
            if r.token >= len || r.probs.len() != self.experts {
                return Err(Error::Parameter(format!("record for token {} does not fit the trace", r.token)));
            }
            let t = tokens[r.token].get_or_insert_with(|| TokenTrace {
                sequence,
                position: r.token,
                modality: r.modality,
                vocab_id: vocab_ids[r.token],
                probs: vec![Vec::new(); self.layers.len()],
                selected: vec![Vec::new(); self.layers.len()],
            });
            t.probs[slot] = r.probs.clone();
            t.selected[slot] = r.selected.clone();
        }
        for t in tokens.into_iter().flatten() {
            if t.probs.iter().any(Vec::is_empty) {
                return Err(Error::Parameter(format!("token {} is missing a layer", t.position)));
            }
            self.tokens.push(t);
        }
        Ok(())
    }

    /// Token pathway matrix: per-layer probability vectors concatenated.
    pub fn pathway_matrix(&self) -> Vec<Vec<f64>> {
        self.tokens.iter().map(|t| t.probs.concat()).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<TraceSet> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Routes every example through the model and records all MoE decisions.
pub fn collect_traces(model: &TouchLanguageModel, examples: &[Example]) -> Result<TraceSet> {
    let c = model.config();
    let layers: Vec<usize> = (0..c.layers).filter(|&l| c.is_moe_layer(l)).collect();
    if model.stage() != crate::model::Stage::Moe || layers.is_empty() {
        return Err(Error::Stage("routing analytics need an upcycled model".into()));
    }
    let mut set = TraceSet::new(c.experts, c.top_k, layers);
    no_grad(|| {
        for ex in examples {
            let out = model.forward_row(&ex.pooled, &ex.row, true)?;
            let p = ex.pooled.shape()[0];
            let (before, after) = ex.row.split();
            let ids: Vec<Option<u32>> = before
                .iter()
                .map(|&i| Some(i))
                .chain(std::iter::repeat_n(None, p))
                .chain(after.iter().map(|&i| Some(i)))
                .collect();
            set.push_sequence(&out.routing, &ids)?;
        }
        Ok(set)
    })
}

/// Share of expert assignments per modality in one MoE layer. Each of a
/// token's k selections counts 1/k. Modalities without tokens are absent.
pub fn expert_distribution(traces: &TraceSet, layer: usize) -> Result<BTreeMap<Modality, Vec<f64>>> {
    let slot = traces
        .layers
        .iter()
        .position(|&l| l == layer)
        .ok_or_else(|| Error::Parameter(format!("layer {layer} is not traced")))?;
    if traces.tokens.is_empty() {
        return Err(Error::Parameter("empty trace".into()));
    }
    let mut counts: BTreeMap<Modality, (Vec<f64>, usize)> = BTreeMap::new();
    for t in &traces.tokens {
        let (v, n) = counts.entry(t.modality).or_insert_with(|| (vec![0.0; traces.experts], 0));
        let sel = &t.selected[slot];
        for &e in sel {
            v[e] += 1.0 / sel.len() as f64;
        }
        *n += 1;
    }
    Ok(counts.into_iter().map(|(m, (v, n))| (m, v.into_iter().map(|x| x / n as f64).collect())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    pub rank: usize,
    /// Index into [`TraceSet::tokens`].
    pub token: usize,
    pub modality: Modality,
    /// |projection| onto the first principal component.
    pub score: f64,
    /// Selected experts per MoE layer.
    pub layers: Vec<Vec<usize>>,
}

/// The `n` token pathways with the largest |PC1 projection|. Ties keep
/// trace order.
pub fn top_pathways(traces: &TraceSet, n: usize) -> Result<Vec<Pathway>> {
    let rows = traces.pathway_matrix();
    if n > rows.len() {
        return Err(Error::Parameter(format!("asked for {n} pathways from {} tokens", rows.len())));
    }
    let mut distinct: Vec<&Vec<f64>> = rows.iter().collect();
    distinct.sort_by(|a, b| a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Degenerate("fewer than two distinct pathways".into()));
    }
    let pca = Pca::fit(&rows)?;
    let scores: Vec<f64> = rows.iter().map(|r| pca.project(r, 0).abs()).collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(rank, i)| Pathway {
            rank: rank + 1,
            token: i,
            modality: traces.tokens[i].modality,
            score: scores[i],
            layers: traces.tokens[i].selected.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub layer: usize,
    pub modality: Modality,
    pub expert: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayRow {
    pub pathway_rank: usize,
    pub token_id: usize,
    /// Experts per layer, `+` within a layer and `|` between layers.
    pub layer_sequence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub distribution: Vec<DistributionRow>,
    pub pathways: Vec<Pathway>,
}

pub fn analyze(traces: &TraceSet, n_pathways: usize) -> Result<AnalysisReport> {
    let mut distribution = Vec::new();
    for &layer in &traces.layers {
        for (modality, v) in expert_distribution(traces, layer)? {
            for (expert, fraction) in v.into_iter().enumerate() {
                distribution.push(DistributionRow { layer, modality, expert, fraction });
            }
        }
    }
    Ok(AnalysisReport { distribution, pathways: top_pathways(traces, n_pathways)? })
}

pub fn layer_sequence(layers: &[Vec<usize>]) -> String {
    layers
        .iter()
        .map(|l| l.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("+"))
        .collect::<Vec<_>>()
        .join("|")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Writes `distribution.csv` and `pathways.csv`, or `analysis.json`, into `dir`.
pub fn export(report: &AnalysisReport, dir: &Path, format: ExportFormat) -> Result<()> {
    match format {
        ExportFormat::Json => {
            let path = dir.join("analysis.json");
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::to_writer_pretty(BufWriter::new(f), report)?;
        }
        ExportFormat::Csv => {
            let path = dir.join("distribution.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for row in &report.distribution {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let path = dir.join("pathways.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for p in &report.pathways {
                w.serialize(PathwayRow {
                    pathway_rank: p.rank,
                    token_id: p.token,
                    layer_sequence: layer_sequence(&p.layers),
                })?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn read_distribution_csv(path: &Path) -> Result<Vec<DistributionRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_pathways_csv(path: &Path) -> Result<Vec<PathwayRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_json(path: &Path) -> Result<AnalysisReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests;

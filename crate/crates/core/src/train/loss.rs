use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};
use crate::model::{LayerAux, Stage, TouchLanguageModel};
use crate::tensor::Tensor;

/// `α · K · Σ F_i G_i`, differentiable through `g` only.
pub fn load_balance_loss(f: &[f64], g: &Tensor, alpha: f64) -> Result<Tensor> {
    let k = f.len();
    if g.numel() != k || k == 0 {
        return Err(Error::shape("load_balance_loss", &[k], g.shape()));
    }
    check_distribution("F", f)?;
    check_distribution("G", &g.to_vec())?;
    let f = Tensor::new(f.to_vec(), g.shape())?;
    Ok(g.mul(&f)?.sum().scale(alpha * k as f64))
}

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&x| x < 0.0 || !x.is_finite()) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("{name} must be a probability vector, got {v:?}")));
    }
    Ok(())
}

/// Mean of the per-layer balance losses, or `None` without MoE layers.
pub fn mean_aux_loss(aux: &[LayerAux], alpha: f64) -> Result<Option<Tensor>> {
    if aux.is_empty() {
        return Ok(None);
    }
    let mut total: Option<Tensor> = None;
    for a in aux {
        let l = load_balance_loss(&a.f, &a.g, alpha)?;
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l)?,
        });
    }
    Ok(total.map(|t| t.scale(1.0 / aux.len() as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub aux: f64,
    pub total: f64,
}

fn row_ce(model: &TouchLanguageModel, ex: &Example, weight: f64) -> Result<(Tensor, Vec<LayerAux>)> {
    let out = model.forward_row(&ex.pooled, &ex.row, false)?;
    let weights: Vec<f64> = ex.mask.iter().map(|&m| if m { weight } else { 0.0 }).collect();
    Ok((out.logits.cross_entropy_weighted(&ex.targets, &weights)?, out.aux))
}

/// Mean next-token cross-entropy over the answer tokens of one row. A row
/// without answer tokens yields zero loss and zero gradient.
pub fn stage1_loss(model: &TouchLanguageModel, ex: &Example) -> Result<Tensor> {
    if model.stage() != Stage::Dense {
        return Err(Error::Stage("the tactile alignment loss needs the dense model".into()));
    }
    Ok(row_ce(model, ex, 1.0 / ex.tokens.max(1) as f64)?.0)
}

/// Cross-entropy plus the load-balance loss averaged over MoE layers.
pub fn stage2_loss(model: &TouchLanguageModel, ex: &Example) -> Result<(Tensor, LossParts)> {
    if model.stage() != Stage::Moe {
        return Err(Error::Stage("the fine-tuning loss needs an upcycled MoE model".into()));
    }
    let (ce, aux) = row_ce(model, ex, 1.0 / ex.tokens.max(1) as f64)?;
    combine(ce, &aux, model.config().aux_alpha, 1.0)
}

/// `ce + aux_weight · mean_aux` with its parts. `ce` is already weighted.
pub(crate) fn combine(ce: Tensor, aux: &[LayerAux], alpha: f64, aux_weight: f64) -> Result<(Tensor, LossParts)> {
    let ce_v = ce.item();
    match mean_aux_loss(aux, alpha)? {
        None => Ok((ce, LossParts { ce: ce_v, aux: 0.0, total: ce_v })),
        Some(a) => {
            let a = a.scale(aux_weight);
            let aux_v = a.item();
            let total = ce.add(&a)?;
            let total_v = total.item();
            Ok((total, LossParts { ce: ce_v, aux: aux_v, total: total_v }))
        }
    }
}

pub(crate) fn weighted_row_loss(
    model: &TouchLanguageModel,
    ex: &Example,
    token_weight: f64,
    row_weight: f64,
) -> Result<(Tensor, LossParts)> {
    let (ce, aux) = row_ce(model, ex, token_weight)?;
    combine(ce, &aux, model.config().aux_alpha, row_weight)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{child, Module, Param, ParamGroup, SwiGlu, Visit};
use crate::tensor::{top_k_indices, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Tactile,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Tactile => "tactile",
            Modality::Text => "text",
        }
    }
}

/// Routing decision for one token in one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub layer: usize,
    pub token: usize,
    pub modality: Modality,
    pub probs: Vec<f64>,
    /// Active experts, highest probability first.
    pub selected: Vec<usize>,
}

/// Balance statistics of one MoE layer over a sequence.
#[derive(Debug, Clone)]
pub struct LayerAux {
    pub layer: usize,
    /// Fraction of tokens whose most probable expert is `i`. Not differentiable.
    pub f: Vec<f64>,
    /// Mean routing probability per expert, `1 × K`.
    pub g: Tensor,
}

#[derive(Clone, Debug)]
pub struct MoELayer {
    /// D × K, no bias.
    pub router: Param,
    pub experts: Vec<SwiGlu>,
    pub top_k: usize,
}

pub struct RouteOutput {
    pub out: Tensor,
    pub records: Vec<RoutingRecord>,
    pub aux: LayerAux,
}

impl MoELayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn deep_clone(&self) -> Self {
        MoELayer {
            router: self.router.deep_clone(ParamGroup::Router),
            experts: self.experts.iter().map(|e| e.deep_clone(ParamGroup::Experts)).collect(),
            top_k: self.top_k,
        }
    }
}

impl Module for MoELayer {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(child(prefix, "router"), &self.router);
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&child(prefix, &format!("experts.{i}")), f);
        }
    }
}

/// Routes each row of `x` (`T × D`) to its top-k experts and returns the
/// probability-weighted sum of their outputs. Experts only run on the rows
/// routed to them. `modalities` tags each row; records are kept only when
/// `trace` is set.
pub fn moe_route(x: &Tensor, layer: &MoELayer, layer_index: usize, modalities: &[Modality], trace: bool) -> Result<RouteOutput> {
    let (t, d) = x.dims2()?;
    let k_experts = layer.num_experts();
    if layer.router.tensor.shape() != [d, k_experts] {
        return Err(Error::shape("moe_route", x.shape(), layer.router.tensor.shape()));
    }
    if modalities.len() != t {
        return Err(Error::Parameter(format!("{} modality tags for {t} tokens", modalities.len())));
    }
    let logits = x.matmul(&layer.router.tensor)?;
    let probs = logits.top_k_mask(layer.top_k)?.softmax(1)?;

    let mut routed: Vec<Vec<usize>> = vec![Vec::new(); k_experts];
    let mut f = vec![0.0; k_experts];
    let mut records = Vec::new();
    {
        let ld = logits.data();
        let pd = probs.data();
        for tok in 0..t {
            let row = &ld[tok * k_experts..(tok + 1) * k_experts];
            let selected = top_k_indices(row, layer.top_k);
            f[selected[0]] += 1.0;
            for &e in &selected {
                routed[e].push(tok);
            }
            if trace {
                records.push(RoutingRecord {
                    layer: layer_index,
                    token: tok,
                    modality: modalities[tok],
                    probs: pd[tok * k_experts..(tok + 1) * k_experts].to_vec(),
                    selected,
                });
            }
        }
    }
    for v in &mut f {
        *v /= t as f64;
    }

    let mut parts = Vec::new();
    for (e, rows) in routed.into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let xe = x.index_rows(&rows)?;
        let ye = layer.experts[e].forward(&xe)?;
        let gates: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
        parts.push((ye.row_scale(&probs.gather_elems(&gates)?)?, rows));
    }
    let out = Tensor::scatter_add_rows(t, d, parts)?;
    let g = probs.mean_axis(0)?.reshape(&[1, k_experts])?;
    Ok(RouteOutput { out, records, aux: LayerAux { layer: layer_index, f, g } })
}

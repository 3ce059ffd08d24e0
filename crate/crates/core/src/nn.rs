//! Layers shared by the touch encoder and the language model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Freezing unit. Every parameter belongs to exactly one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TouchEncoder,
    WordEmbedding,
    Adapter,
    /// Positional table, norms and base attention projections.
    Backbone,
    /// Dense feed-forward layers (absent once upcycled).
    Ffn,
    Router,
    Experts,
    Lora,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::TouchEncoder,
        ParamGroup::WordEmbedding,
        ParamGroup::Adapter,
        ParamGroup::Backbone,
        ParamGroup::Ffn,
        ParamGroup::Router,
        ParamGroup::Experts,
        ParamGroup::Lora,
        ParamGroup::Head,
    ];
}

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub group: ParamGroup,
}

impl Param {
    pub fn new(tensor: Tensor, group: ParamGroup) -> Self {
        Param { tensor, group }
    }

    pub fn normal(rng: &mut Rng, shape: &[usize], std: f64, group: ParamGroup) -> Self {
        let n = shape.iter().product();
        Self::new(Tensor::param(rng.normal_vec(n, std), shape).unwrap(), group)
    }

    pub fn filled(shape: &[usize], value: f64, group: ParamGroup) -> Self {
        let n = shape.iter().product();
        Self::new(Tensor::param(vec![value; n], shape).unwrap(), group)
    }

    pub fn deep_clone(&self, group: ParamGroup) -> Self {
        Param::new(self.tensor.deep_clone(), group)
    }
}

/// Named parameter visitor.
pub type Visit<'a> = dyn FnMut(String, &Param) + 'a;

pub trait Module {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Low-rank additive update `scale · x·Aᵀ·Bᵀ` on a frozen projection.
#[derive(Clone, Debug)]
pub struct Lora {
    /// r × in
    pub a: Param,
    /// out × r, zero at initialization
    pub b: Param,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// in × out
    pub weight: Param,
    pub bias: Option<Param>,
    pub lora: Option<Lora>,
}

impl Linear {
    pub fn new(rng: &mut Rng, input: usize, output: usize, bias: bool, group: ParamGroup) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Param::normal(rng, &[input, output], std, group),
            bias: bias.then(|| Param::filled(&[output], 0.0, group)),
            lora: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn attach_lora(&mut self, rng: &mut Rng, rank: usize, alpha: f64) {
        let (input, output) = (self.input_dim(), self.output_dim());
        self.lora = Some(Lora {
            a: Param::normal(rng, &[rank, input], 1.0 / (input as f64).sqrt(), ParamGroup::Lora),
            b: Param::filled(&[output, rank], 0.0, ParamGroup::Lora),
            scale: alpha / rank as f64,
        });
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight.tensor)?;
        if let Some(b) = &self.bias {
            y = y.add_row(&b.tensor)?;
        }
        if let Some(l) = &self.lora {
            let delta = x.matmul_nt(&l.a.tensor)?.matmul_nt(&l.b.tensor)?.scale(l.scale);
            y = y.add(&delta)?;
        }
        Ok(y)
    }

    pub fn deep_clone(&self, group: ParamGroup) -> Self {
        Linear {
            weight: self.weight.deep_clone(group),
            bias: self.bias.as_ref().map(|b| b.deep_clone(group)),
            lora: self.lora.as_ref().map(|l| Lora {
                a: l.a.deep_clone(ParamGroup::Lora),
                b: l.b.deep_clone(ParamGroup::Lora),
                scale: l.scale,
            }),
        }
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
        if let Some(l) = &self.lora {
            f(join(prefix, "lora_a"), &l.a);
            f(join(prefix, "lora_b"), &l.b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsNorm {
    pub gain: Param,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(dim: usize, group: ParamGroup) -> Self {
        RmsNorm { gain: Param::filled(&[dim], 1.0, group), eps: 1e-6 }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.rms_norm(&self.gain.tensor, self.eps)
    }
}

impl Module for RmsNorm {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        f(join(prefix, "gain"), &self.gain);
    }
}

/// SiLU-gated feed-forward: `(silu(x·Wg) ⊙ x·Wu)·Wd`.
#[derive(Clone, Debug)]
pub struct SwiGlu {
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl SwiGlu {
    pub fn new(rng: &mut Rng, dim: usize, hidden: usize, group: ParamGroup) -> Self {
        SwiGlu {
            gate: Linear::new(rng, dim, hidden, false, group),
            up: Linear::new(rng, dim, hidden, false, group),
            down: Linear::new(rng, hidden, dim, false, group),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.gate.forward(x)?.silu().mul(&self.up.forward(x)?)?;
        self.down.forward(&h)
    }

    pub fn hidden_dim(&self) -> usize {
        self.gate.output_dim()
    }

    pub fn deep_clone(&self, group: ParamGroup) -> Self {
        SwiGlu {
            gate: self.gate.deep_clone(group),
            up: self.up.deep_clone(group),
            down: self.down.deep_clone(group),
        }
    }
}

impl Module for SwiGlu {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.gate.visit(&join(prefix, "gate"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.down.visit(&join(prefix, "down"), f);
    }
}

/// Multi-head self-attention, optionally causal.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub causal: bool,
}

impl Attention {
    pub fn new(rng: &mut Rng, dim: usize, heads: usize, causal: bool, group: ParamGroup) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Parameter(format!("hidden size {dim} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(rng, dim, dim, false, group),
            k: Linear::new(rng, dim, dim, false, group),
            v: Linear::new(rng, dim, dim, false, group),
            o: Linear::new(rng, dim, dim, false, group),
            heads,
            causal,
        })
    }

    pub fn projections_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, d) = x.dims2()?;
        let q = self.q.forward(x)?;
        let k = self.k.forward(x)?;
        let v = self.v.forward(x)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mask = self.causal.then(|| causal_mask(t));
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (q.slice_cols(lo, hi)?, k.slice_cols(lo, hi)?, v.slice_cols(lo, hi)?)
            };
            let mut scores = qh.matmul_nt(&kh)?.scale(scale);
            if let Some(m) = &mask {
                scores = scores.add(m)?;
            }
            outs.push(scores.softmax(1)?.matmul(&vh)?);
        }
        let merged = if outs.len() == 1 { outs.pop().unwrap() } else { Tensor::concat_cols(&outs)? };
        self.o.forward(&merged)
    }
}

impl Module for Attention {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.q.visit(&join(prefix, "q"), f);
        self.k.visit(&join(prefix, "k"), f);
        self.v.visit(&join(prefix, "v"), f);
        self.o.visit(&join(prefix, "o"), f);
    }
}

/// `t×t` additive mask: 0 on and below the diagonal, `-inf` above.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(m, &[t, t]).unwrap()
}

pub(crate) fn child(prefix: &str, name: &str) -> String {
    join(prefix, name)
}

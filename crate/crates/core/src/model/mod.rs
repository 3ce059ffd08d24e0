//! Touch-conditioned causal language model with optional MoE feed-forward
//! layers, sparse upcycling, greedy decoding and checkpoints.

mod checkpoint;
mod moe;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use checkpoint::{config_diff, Checkpoint, CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use moe::{moe_route, LayerAux, MoELayer, Modality, RouteOutput, RoutingRecord};

use crate::data::prompt::{build_generation_prompt, PromptRow, PromptTemplate};
use crate::data::vocab::{Vocab, EOS};
use crate::error::{Error, Result};
use crate::frontend::{EncoderConfig, TactileClip, TouchAdapter, TouchEncoder};
use crate::nn::{child, Attention, Linear, Module, Param, ParamGroup, RmsNorm, SwiGlu, Visit};
use crate::rng::Rng;
use crate::tensor::{no_grad, top_k_indices, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden size D.
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Feed-forward hidden width as a multiple of D (per expert once upcycled).
    pub ffn_mult: usize,
    /// Experts per MoE layer (K).
    pub experts: usize,
    /// Active experts per token (k).
    pub top_k: usize,
    /// Load-balance loss scale α.
    pub aux_alpha: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub max_seq: usize,
    /// Blocks that become MoE layers when upcycled; `None` means all.
    pub moe_layers: Option<Vec<usize>>,
    /// Std of the router's initial weights.
    pub router_init_std: f64,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            vocab_size: 512,
            ffn_mult: 2,
            experts: 4,
            top_k: 2,
            aux_alpha: 0.01,
            lora_rank: 8,
            lora_alpha: 16.0,
            max_seq: 512,
            moe_layers: None,
            router_init_std: 1e-2,
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: field.into(), message });
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("model.heads", format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads));
        }
        if self.layers == 0 {
            return bad("model.layers", "need at least one block".into());
        }
        if self.vocab_size <= EOS as usize + 1 {
            return bad("model.vocab_size", format!("{} leaves no room beyond the reserved ids", self.vocab_size));
        }
        if self.ffn_mult == 0 {
            return bad("model.ffn_mult", "must be at least 1".into());
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return bad("model.top_k", format!("need 1 <= k <= K, got k={} K={}", self.top_k, self.experts));
        }
        if !(self.aux_alpha >= 0.0 && self.aux_alpha.is_finite()) {
            return bad("model.aux_alpha", format!("{} is not a finite nonnegative number", self.aux_alpha));
        }
        if self.lora_rank == 0 {
            return bad("model.lora_rank", "must be at least 1".into());
        }
        if self.max_seq == 0 {
            return bad("model.max_seq", "must be positive".into());
        }
        if let Some(sel) = &self.moe_layers {
            if let Some(l) = sel.iter().find(|&&l| l >= self.layers) {
                return bad("model.moe_layers", format!("block {l} does not exist ({} blocks)", self.layers));
            }
        }
        if self.encoder.width == 0 || self.encoder.heads == 0 || self.encoder.width % self.encoder.heads != 0 {
            return bad("model.encoder.heads", "encoder width must be divisible by its heads".into());
        }
        Ok(())
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe_layers.as_ref().is_none_or(|sel| sel.contains(&layer))
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.hidden
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Dense,
    Moe,
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense(SwiGlu),
    Moe(MoELayer),
}

#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: RmsNorm,
    pub attn: Attention,
    pub ffn_norm: RmsNorm,
    pub ffn: FeedForward,
}

pub struct ForwardOutput {
    /// `(P + M) × V`
    pub logits: Tensor,
    pub routing: Vec<RoutingRecord>,
    /// One entry per MoE layer, in block order.
    pub aux: Vec<LayerAux>,
}

#[derive(Clone, Debug)]
pub struct TouchLanguageModel {
    config: ModelConfig,
    stage: Stage,
    pub encoder: TouchEncoder,
    pub adapter: TouchAdapter,
    pub embed: Param,
    pub positions: Param,
    pub blocks: Vec<Block>,
    pub final_norm: RmsNorm,
    pub head: Linear,
}

impl TouchLanguageModel {
    /// Dense model with seed-derived weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let encoder = TouchEncoder::new(config.encoder.clone())?;
        let adapter = TouchAdapter::new(&mut root.split_named("adapter"), config.encoder.width, config.hidden);
        let mut rng = root.split_named("language-model");
        let d = config.hidden;
        let embed = Param::normal(&mut rng, &[config.vocab_size, d], 1.0, ParamGroup::WordEmbedding);
        let positions = Param::normal(&mut rng, &[config.max_seq, d], 0.1, ParamGroup::Backbone);
        let blocks = (0..config.layers)
            .map(|_| {
                Ok(Block {
                    attn_norm: RmsNorm::new(d, ParamGroup::Backbone),
                    attn: Attention::new(&mut rng, d, config.heads, true, ParamGroup::Backbone)?,
                    ffn_norm: RmsNorm::new(d, ParamGroup::Backbone),
                    ffn: FeedForward::Dense(SwiGlu::new(&mut rng, d, config.ffn_hidden(), ParamGroup::Ffn)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut rng, d, config.vocab_size, false, ParamGroup::Head);
        Ok(TouchLanguageModel {
            config,
            stage: Stage::Dense,
            encoder,
            adapter,
            embed,
            positions,
            blocks,
            final_norm: RmsNorm::new(d, ParamGroup::Backbone),
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.q.lora.is_some())
    }

    /// Adds zero-initialized low-rank adapters to every attention projection.
    pub fn attach_lora(&mut self) -> Result<()> {
        if self.has_lora() {
            return Err(Error::State("attention already carries LoRA adapters".into()));
        }
        let mut rng = Rng::new(self.config.seed).split_named("lora");
        let (rank, alpha) = (self.config.lora_rank, self.config.lora_alpha);
        for b in &mut self.blocks {
            for proj in b.attn.projections_mut() {
                proj.attach_lora(&mut rng, rank, alpha);
            }
        }
        Ok(())
    }

    /// MoE copy of a dense model: each selected block's FFN is replicated
    /// into K experts, routers get small random weights and attention gets
    /// zero-initialized LoRA adapters. All tensors are fresh copies.
    pub fn upcycle(&self) -> Result<TouchLanguageModel> {
        if self.stage == Stage::Moe {
            return Err(Error::State("model is already upcycled".into()));
        }
        let mut rng = Rng::new(self.config.seed).split_named("router");
        let mut out = self.deep_clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            if !self.config.is_moe_layer(i) {
                continue;
            }
            let FeedForward::Dense(ffn) = &b.ffn else { unreachable!("dense model holds dense blocks") };
            let experts = (0..self.config.experts).map(|_| ffn.deep_clone(ParamGroup::Experts)).collect();
            let router = Param::normal(
                &mut rng,
                &[self.config.hidden, self.config.experts],
                self.config.router_init_std,
                ParamGroup::Router,
            );
            b.ffn = FeedForward::Moe(MoELayer { router, experts, top_k: self.config.top_k });
        }
        if !out.has_lora() {
            out.attach_lora()?;
        }
        out.stage = Stage::Moe;
        Ok(out)
    }

    /// Copy with no shared trainable tensors. The frozen encoder is shared.
    pub fn deep_clone(&self) -> TouchLanguageModel {
        let mut out = self.clone();
        let mut fresh = |p: &mut Param| *p = p.deep_clone(p.group);
        out.visit_mut(&mut fresh);
        out
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        fn linear(l: &mut Linear, f: &mut dyn FnMut(&mut Param)) {
            f(&mut l.weight);
            if let Some(b) = &mut l.bias {
                f(b);
            }
            if let Some(lo) = &mut l.lora {
                f(&mut lo.a);
                f(&mut lo.b);
            }
        }
        fn swiglu(s: &mut SwiGlu, f: &mut dyn FnMut(&mut Param)) {
            linear(&mut s.gate, f);
            linear(&mut s.up, f);
            linear(&mut s.down, f);
        }
        linear(&mut self.adapter.proj, f);
        f(&mut self.embed);
        f(&mut self.positions);
        for b in &mut self.blocks {
            f(&mut b.attn_norm.gain);
            for p in b.attn.projections_mut() {
                linear(p, f);
            }
            f(&mut b.ffn_norm.gain);
            match &mut b.ffn {
                FeedForward::Dense(s) => swiglu(s, f),
                FeedForward::Moe(m) => {
                    f(&mut m.router);
                    for e in &mut m.experts {
                        swiglu(e, f);
                    }
                }
            }
        }
        f(&mut self.final_norm.gain);
        linear(&mut self.head, f);
    }

    /// All parameters with their dotted names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name, p.clone())));
        out
    }

    /// Enables gradients exactly for the given groups.
    pub fn set_trainable(&self, groups: &BTreeSet<ParamGroup>) {
        self.visit("", &mut |_, p| p.tensor.set_requires_grad(groups.contains(&p.group)));
    }

    pub fn param_count(&self, filter: impl Fn(ParamGroup) -> bool) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if filter(p.group) {
                n += p.tensor.numel();
            }
        });
        n
    }

    /// Language-model parameters a single token passes through: shared
    /// weights plus the router and `k` experts of every MoE layer.
    pub fn active_param_count(&self) -> usize {
        let mut n = self.param_count(|g| !matches!(g, ParamGroup::TouchEncoder | ParamGroup::Experts));
        for b in &self.blocks {
            if let FeedForward::Moe(m) = &b.ffn {
                let mut per_expert = 0;
                m.experts[0].visit("", &mut |_, p| per_expert += p.tensor.numel());
                n += m.top_k * per_expert;
            }
        }
        n
    }

    /// Frozen encoder output for a clip, pooled over frames: `P × C_enc`.
    pub fn encode_tactile(&self, clip: &TactileClip) -> Result<Tensor> {
        self.encoder.encode_clip(clip)
    }

    /// Adapter output: tactile tokens in the language model's space, `P × D`.
    pub fn tactile_tokens(&self, pooled: &Tensor) -> Result<Tensor> {
        self.adapter.adapt(pooled)
    }

    /// Splices tactile tokens into a prompt row and runs the language model.
    pub fn forward_row(&self, pooled: &Tensor, row: &PromptRow, trace: bool) -> Result<ForwardOutput> {
        let v = self.tactile_tokens(pooled)?;
        let (before, after) = row.split();
        self.forward(&v, before, after, trace)
    }

    /// Logits for the sequence `before ++ tactile ++ after`.
    pub fn forward(&self, tactile: &Tensor, before: &[u32], after: &[u32], trace: bool) -> Result<ForwardOutput> {
        let (p, d) = tactile.dims2()?;
        if d != self.config.hidden {
            return Err(Error::shape("forward", tactile.shape(), &[p, self.config.hidden]));
        }
        let len = before.len() + p + after.len();
        if len > self.config.max_seq {
            return Err(Error::Length { len, max: self.config.max_seq });
        }
        let mut parts = Vec::with_capacity(3);
        let mut modalities = Vec::with_capacity(len);
        if !before.is_empty() {
            parts.push(self.embed_ids(before)?);
            modalities.extend(std::iter::repeat_n(Modality::Text, before.len()));
        }
        parts.push(tactile.clone());
        modalities.extend(std::iter::repeat_n(Modality::Tactile, p));
        if !after.is_empty() {
            parts.push(self.embed_ids(after)?);
            modalities.extend(std::iter::repeat_n(Modality::Text, after.len()));
        }
        let x = if parts.len() == 1 { parts.pop().unwrap() } else { Tensor::concat_rows(&parts)? };
        self.forward_embedded(&x, &modalities, trace)
    }

    fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.embed.tensor.embedding(&idx)
    }

    /// Runs the blocks over an already embedded `T × D` sequence.
    pub fn forward_embedded(&self, x: &Tensor, modalities: &[Modality], trace: bool) -> Result<ForwardOutput> {
        let (t, _) = x.dims2()?;
        if t > self.config.max_seq {
            return Err(Error::Length { len: t, max: self.config.max_seq });
        }
        let pos: Vec<usize> = (0..t).collect();
        let mut h = x.add(&self.positions.tensor.embedding(&pos)?)?;
        let mut routing = Vec::new();
        let mut aux = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            h = h.add(&b.attn.forward(&b.attn_norm.forward(&h)?)?)?;
            let n = b.ffn_norm.forward(&h)?;
            let y = match &b.ffn {
                FeedForward::Dense(ffn) => ffn.forward(&n)?,
                FeedForward::Moe(layer) => {
                    let r = moe_route(&n, layer, i, modalities, trace)?;
                    routing.extend(r.records);
                    aux.push(r.aux);
                    r.out
                }
            };
            h = h.add(&y)?;
        }
        let logits = self.head.forward(&self.final_norm.forward(&h)?)?;
        Ok(ForwardOutput { logits, routing, aux })
    }

    /// Greedy continuation of a prompt row. Stops at EOS or after `max_new`
    /// tokens; EOS is not included in the result.
    pub fn generate_ids(&self, pooled: &Tensor, prompt: &PromptRow, max_new: usize) -> Result<Vec<u32>> {
        let p = pooled.dims2()?.0;
        let len = prompt.expanded_len(p);
        if len + max_new > self.config.max_seq {
            return Err(Error::Length { len: len + max_new, max: self.config.max_seq });
        }
        no_grad(|| {
            let v = self.tactile_tokens(pooled)?;
            let (before, after) = prompt.split();
            let mut after = after.to_vec();
            let mut out = Vec::new();
            for _ in 0..max_new {
                let logits = self.forward(&v, before, &after, false)?.logits;
                let last = logits.row(logits.shape()[0] - 1);
                let next = top_k_indices(&last, 1)[0] as u32;
                if next == EOS {
                    break;
                }
                out.push(next);
                after.push(next);
            }
            Ok(out)
        })
    }

    pub fn generate(
        &self,
        clip: &TactileClip,
        question: &str,
        template: &PromptTemplate,
        vocab: &Vocab,
        max_new: usize,
    ) -> Result<String> {
        let pooled = self.encode_tactile(clip)?;
        let prompt = build_generation_prompt(question, template, vocab)?;
        Ok(vocab.detokenize(&self.generate_ids(&pooled, &prompt, max_new)?))
    }
}

impl Module for TouchLanguageModel {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.encoder.visit(&child(prefix, "encoder"), f);
        self.adapter.visit(&child(prefix, "adapter"), f);
        f(child(prefix, "embed"), &self.embed);
        f(child(prefix, "positions"), &self.positions);
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = child(prefix, &format!("blocks.{i}"));
            b.attn_norm.visit(&child(&pre, "attn_norm"), f);
            b.attn.visit(&child(&pre, "attn"), f);
            b.ffn_norm.visit(&child(&pre, "ffn_norm"), f);
            match &b.ffn {
                FeedForward::Dense(ffn) => ffn.visit(&child(&pre, "ffn"), f),
                FeedForward::Moe(m) => m.visit(&child(&pre, "moe"), f),
            }
        }
        self.final_norm.visit(&child(prefix, "final_norm"), f);
        self.head.visit(&child(prefix, "head"), f);
    }
}

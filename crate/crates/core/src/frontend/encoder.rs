use serde::{Deserialize, Serialize};

use super::clip::{num_patches, TactileClip, CHANNELS, PATCH};
use crate::error::{Error, Result};
use crate::nn::{child, Attention, Linear, Module, Param, ParamGroup, RmsNorm, SwiGlu, Visit};
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

pub const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;

/// Unfolds an `H×W×3` frame into `P × 588` patch rows. Patches are ordered
/// row-major over the patch grid; each row is the patch's pixels in
/// (row, column, channel) order.
pub fn patchify(frame: &[f64], height: usize, width: usize) -> Result<Tensor> {
    if height % PATCH != 0 || width % PATCH != 0 || height == 0 || width == 0 {
        return Err(Error::shape("patchify (H, W must be multiples of 14)", &[height, width], &[PATCH, PATCH]));
    }
    if frame.len() != height * width * CHANNELS {
        return Err(Error::shape("patchify", &[height, width, CHANNELS], &[frame.len()]));
    }
    let (gh, gw) = (height / PATCH, width / PATCH);
    let mut out = Vec::with_capacity(frame.len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..PATCH {
                let y = py * PATCH + dy;
                let start = (y * width + px * PATCH) * CHANNELS;
                out.extend_from_slice(&frame[start..start + PATCH * CHANNELS]);
            }
        }
    }
    Tensor::new(out, &[gh * gw, PATCH_DIM])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of the encoder's token embeddings.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Largest patch grid supported (256 covers 224×224 frames).
    pub max_patches: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { width: 64, blocks: 2, heads: 4, max_patches: 256, seed: 0x70c4 }
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn_norm: RmsNorm,
    attn: Attention,
    mlp_norm: RmsNorm,
    mlp: SwiGlu,
}

/// Small bidirectional patch transformer with fixed, seed-derived weights.
/// Its parameters never require gradients.
#[derive(Clone, Debug)]
pub struct TouchEncoder {
    config: EncoderConfig,
    patch_embed: Linear,
    positions: Param,
    blocks: Vec<EncoderBlock>,
    final_norm: RmsNorm,
}

impl TouchEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let g = ParamGroup::TouchEncoder;
        let mut rng = Rng::new(config.seed).split_named("touch-encoder");
        let c = config.width;
        let patch_embed = Linear::new(&mut rng, PATCH_DIM, c, true, g);
        let positions = Param::normal(&mut rng, &[config.max_patches, c], 0.1, g);
        let blocks = (0..config.blocks)
            .map(|_| {
                Ok(EncoderBlock {
                    attn_norm: RmsNorm::new(c, g),
                    attn: Attention::new(&mut rng, c, config.heads, false, g)?,
                    mlp_norm: RmsNorm::new(c, g),
                    mlp: SwiGlu::new(&mut rng, c, 2 * c, g),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let enc = TouchEncoder { config, patch_embed, positions, blocks, final_norm: RmsNorm::new(c, g) };
        enc.visit("", &mut |_, p| p.tensor.set_requires_grad(false));
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    /// Tokens of one frame: `P × width`.
    pub fn encode_image(&self, frame: &[f64], height: usize, width: usize) -> Result<Tensor> {
        let patches = patchify(frame, height, width)?;
        let p = patches.shape()[0];
        if p > self.config.max_patches {
            return Err(Error::Length { len: p, max: self.config.max_patches });
        }
        no_grad(|| {
            // pixels in [0, 1] -> [-1, 1]
            let centered = patches.scale(2.0).add(&Tensor::full(patches.shape(), -1.0))?;
            let pos: Vec<usize> = (0..p).collect();
            let mut x = self.patch_embed.forward(&centered)?.add(&self.positions.tensor.embedding(&pos)?)?;
            for b in &self.blocks {
                x = x.add(&b.attn.forward(&b.attn_norm.forward(&x)?)?)?;
                x = x.add(&b.mlp.forward(&b.mlp_norm.forward(&x)?)?)?;
            }
            self.final_norm.forward(&x)
        })
    }

    /// Frames encoded independently: `N × P × width`.
    pub fn encode_frames(&self, clip: &TactileClip) -> Result<Tensor> {
        let frames = (0..clip.num_frames())
            .map(|i| self.encode_image(clip.frame(i), clip.height(), clip.width()))
            .collect::<Result<Vec<_>>>()?;
        let p = num_patches(clip.height(), clip.width());
        Tensor::concat_rows(&frames)?.reshape(&[clip.num_frames(), p, self.config.width])
    }

    /// Video-level tokens: frame tokens averaged over time, `P × width`.
    pub fn encode_clip(&self, clip: &TactileClip) -> Result<Tensor> {
        pool_video(&self.encode_frames(clip)?)
    }
}

impl Module for TouchEncoder {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.patch_embed.visit(&child(prefix, "patch_embed"), f);
        f(child(prefix, "positions"), &self.positions);
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = child(prefix, &format!("blocks.{i}"));
            b.attn_norm.visit(&child(&pre, "attn_norm"), f);
            b.attn.visit(&child(&pre, "attn"), f);
            b.mlp_norm.visit(&child(&pre, "mlp_norm"), f);
            b.mlp.visit(&child(&pre, "mlp"), f);
        }
        self.final_norm.visit(&child(prefix, "final_norm"), f);
    }
}

/// Mean over the frame axis of an `N × P × C` tensor.
pub fn pool_video(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 3 {
        return Err(Error::Parameter(format!("expected N×P×C frame tokens, got {:?}", z.shape())));
    }
    z.mean_axis(0)
}

/// Linear map from encoder width to the language model's hidden size.
#[derive(Clone, Debug)]
pub struct TouchAdapter {
    pub proj: Linear,
}

impl TouchAdapter {
    pub fn new(rng: &mut Rng, encoder_width: usize, hidden: usize) -> Self {
        TouchAdapter { proj: Linear::new(rng, encoder_width, hidden, true, ParamGroup::Adapter) }
    }

    pub fn adapt(&self, pooled: &Tensor) -> Result<Tensor> {
        let (_, c) = pooled.dims2()?;
        if c != self.proj.input_dim() {
            return Err(Error::shape("adapter", pooled.shape(), self.proj.weight.tensor.shape()));
        }
        self.proj.forward(pooled)
    }
}

impl Module for TouchAdapter {
    fn visit(&self, prefix: &str, f: &mut Visit<'_>) {
        self.proj.visit(&child(prefix, "proj"), f);
    }
}

//! Prompt-free mask decoder.
//!
//! A single learned output token attends to the image embedding through
//! two-way attention blocks. The updated embedding is upsampled by `log2(p)`
//! stride-2 transposed convolutions back to full resolution, and a
//! hypernetwork MLP on the output token produces per-channel weights that
//! are dotted with the upsampled features to give per-pixel logits.
//!
//! Each upsampler weight and bias is `P + ΔP`: `P` frozen, `ΔP` trainable
//! from zero and penalized by `λ_p · Σ ΔP²`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, Attention, LayerNorm, Linear, Mlp};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Two-way attention blocks.
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Channels of the last upsampler and width of the hypernetwork output.
    pub head_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 2,
            heads: 4,
            mlp_dim: 256,
            head_channels: 8,
        }
    }
}

/// Number of stride-2 upsamplers that undo a patch size of `p`.
pub fn upsampler_count(patch_size: usize) -> Result<usize> {
    if patch_size < 2 || !patch_size.is_power_of_two() {
        return Err(Error::Config(format!(
            "patch size {patch_size} must be a power of two >= 2"
        )));
    }
    Ok(patch_size.trailing_zeros() as usize)
}

/// Output channels per upsampler: halve from `c` each step, never below
/// `head`, and end exactly at `head`.
pub fn channel_schedule(c: usize, k: usize, head: usize) -> Vec<usize> {
    (0..k)
        .map(|i| if i + 1 == k { head } else { (c >> (i + 1)).max(head) })
        .collect()
}

/// Weight or bias stored as frozen base plus trainable delta.
#[derive(Clone, Copy, Debug)]
pub struct DeltaParam {
    pub base: ParamId,
    pub delta: ParamId,
}

impl DeltaParam {
    fn new(store: &mut ParamStore, name: &str, base: Tensor) -> Self {
        let shape = base.shape().to_vec();
        DeltaParam {
            base: store.add(format!("{name}.base"), base),
            delta: store.add(format!("{name}.delta"), Tensor::zeros(&shape)),
        }
    }

    fn effective(&self, g: &mut Graph, store: &ParamStore, with_delta: bool) -> Result<Var> {
        let base = g.param(store, self.base);
        if !with_delta {
            return Ok(base);
        }
        let delta = g.param(store, self.delta);
        g.add(base, delta)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Upsampler {
    pub weight: DeltaParam,
    pub bias: DeltaParam,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub cross_image_to_token: Attention,
    pub norm4: LayerNorm,
}

impl TwoWayBlock {
    fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.self_attn.ids();
        ids.extend(self.norm1.ids());
        ids.extend(self.cross_token_to_image.ids());
        ids.extend(self.norm2.ids());
        ids.extend(self.mlp.ids());
        ids.extend(self.norm3.ids());
        ids.extend(self.cross_image_to_token.ids());
        ids.extend(self.norm4.ids());
        ids
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        query_pe: Var,
        key_pe: Var,
    ) -> Result<(Var, Var)> {
        let q = g.add(queries, query_pe)?;
        let a = self.self_attn.forward(g, store, q, q, queries)?;
        let queries = g.add(queries, a)?;
        let queries = self.norm1.forward(g, store, queries)?;

        let q = g.add(queries, query_pe)?;
        let k = g.add_broadcast(keys, key_pe)?;
        let a = self.cross_token_to_image.forward(g, store, q, k, keys)?;
        let queries = g.add(queries, a)?;
        let queries = self.norm2.forward(g, store, queries)?;

        let m = self.mlp.forward(g, store, queries)?;
        let queries = g.add(queries, m)?;
        let queries = self.norm3.forward(g, store, queries)?;

        let q = g.add(queries, query_pe)?;
        let a = self.cross_image_to_token.forward(g, store, k, q, queries)?;
        let keys = g.add(keys, a)?;
        let keys = self.norm4.forward(g, store, keys)?;
        Ok((queries, keys))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embed_dim: usize,
    pub grid: usize,
    pub output_token: ParamId,
    pub image_pe: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub final_norm: LayerNorm,
    pub upsamplers: Vec<Upsampler>,
    pub hyper: [Linear; 3],
}

impl Decoder {
    pub fn new(
        config: DecoderConfig,
        embed_dim: usize,
        patch_size: usize,
        grid: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let k = upsampler_count(patch_size)?;
        let c = embed_dim;
        if config.heads == 0 || !c.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "{} decoder heads do not divide width {c}",
                config.heads
            )));
        }
        if config.head_channels == 0 || config.depth == 0 {
            return Err(Error::Config("decoder depth and head channels must be positive".into()));
        }
        let output_token = store.add("decoder.output_token", uniform(&[1, c], 1.0, rng));
        let image_pe = store.add("decoder.image_pe", uniform(&[grid * grid, c], 0.02, rng));
        let blocks = (0..config.depth)
            .map(|i| {
                let n = format!("decoder.blocks.{i}");
                TwoWayBlock {
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), c, config.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), c),
                    cross_token_to_image: Attention::new(store, &format!("{n}.cross_t2i"), c, config.heads, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), c),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), c, config.mlp_dim, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), c),
                    cross_image_to_token: Attention::new(store, &format!("{n}.cross_i2t"), c, config.heads, rng),
                    norm4: LayerNorm::new(store, &format!("{n}.norm4"), c),
                }
            })
            .collect();
        let final_attn = Attention::new(store, "decoder.final_attn", c, config.heads, rng);
        let final_norm = LayerNorm::new(store, "decoder.final_norm", c);

        let mut in_ch = c;
        let upsamplers = channel_schedule(c, k, config.head_channels)
            .into_iter()
            .enumerate()
            .map(|(i, out_ch)| {
                let n = format!("decoder.upsample.{i}");
                let bound = 1.0 / ((in_ch * 4) as f64).sqrt();
                let up = Upsampler {
                    weight: DeltaParam::new(
                        store,
                        &format!("{n}.weight"),
                        uniform(&[in_ch, out_ch, 2, 2], bound, rng),
                    ),
                    bias: DeltaParam::new(store, &format!("{n}.bias"), Tensor::zeros(&[out_ch])),
                    in_channels: in_ch,
                    out_channels: out_ch,
                };
                in_ch = out_ch;
                up
            })
            .collect();
        let hyper = [
            Linear::new(store, "decoder.hyper.0", c, c, rng),
            Linear::new(store, "decoder.hyper.1", c, c, rng),
            Linear::new(store, "decoder.hyper.2", c, config.head_channels, rng),
        ];
        Ok(Decoder {
            config,
            embed_dim: c,
            grid,
            output_token,
            image_pe,
            blocks,
            final_attn,
            final_norm,
            upsamplers,
            hyper,
        })
    }

    /// Transformer blocks, positional table and hypernetwork head.
    pub fn attention_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.image_pe];
        ids.extend(self.blocks.iter().flat_map(TwoWayBlock::ids));
        ids.extend(self.final_attn.ids());
        ids.extend(self.final_norm.ids());
        ids.extend(self.hyper.iter().flat_map(Linear::ids));
        ids
    }

    pub fn base_ids(&self) -> Vec<ParamId> {
        self.upsamplers
            .iter()
            .flat_map(|u| [u.weight.base, u.bias.base])
            .collect()
    }

    pub fn delta_ids(&self) -> Vec<ParamId> {
        self.upsamplers
            .iter()
            .flat_map(|u| [u.weight.delta, u.bias.delta])
            .collect()
    }

    /// Image embedding `[B, c, g, g]` to logits `[B, 1, g*2^K, g*2^K]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, embedding: Var, with_delta: bool) -> Result<Var> {
        let s = g.shape(embedding).to_vec();
        let (c, grid) = (self.embed_dim, self.grid);
        if s.len() != 4 || s[1..] != [c, grid, grid] {
            return Err(Error::shape("decode", &s, &[c, grid, grid]));
        }
        let b = s[0];
        let flat = g.reshape(embedding, &[b, c, grid * grid])?;
        let mut keys = g.permute(flat, &[0, 2, 1])?;
        let key_pe = g.param(store, self.image_pe);

        let token = g.param(store, self.output_token);
        let zeros = g.constant(Tensor::zeros(&[b, 1, c]));
        let query_pe = g.add_broadcast(zeros, token)?;
        let mut queries = query_pe;
        for block in &self.blocks {
            (queries, keys) = block.forward(g, store, queries, keys, query_pe, key_pe)?;
        }
        let q = g.add(queries, query_pe)?;
        let k = g.add_broadcast(keys, key_pe)?;
        let a = self.final_attn.forward(g, store, q, k, keys)?;
        let queries = g.add(queries, a)?;
        let queries = self.final_norm.forward(g, store, queries)?;

        let t = g.permute(keys, &[0, 2, 1])?;
        let mut x = g.reshape(t, &[b, c, grid, grid])?;
        for up in &self.upsamplers {
            let w = up.weight.effective(g, store, with_delta)?;
            let bias = up.bias.effective(g, store, with_delta)?;
            x = g.conv_transpose2d(x, w, Some(bias), 2)?;
            x = g.gelu(x);
        }
        let hw = g.shape(x)[2];
        let ch = self.config.head_channels;

        let mut h = g.reshape(queries, &[b, c])?;
        for (i, lin) in self.hyper.iter().enumerate() {
            h = lin.forward(g, store, h)?;
            if i + 1 < self.hyper.len() {
                h = g.relu(h);
            }
        }
        let h = g.reshape(h, &[b, 1, ch])?;
        let feats = g.reshape(x, &[b, ch, hw * hw])?;
        let logits = g.bmm(h, feats)?;
        g.reshape(logits, &[b, 1, hw, hw])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_p: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_p: 1e-4 }
    }
}

/// `λ_p · Σ ΔP²` over every upsampler delta, recorded in the graph.
pub fn reg_loss(g: &mut Graph, store: &ParamStore, deltas: &[ParamId], lambda_p: f32) -> Result<Var> {
    if !(lambda_p >= 0.0) {
        return Err(Error::invalid(format!("lambda_p {lambda_p} must be non-negative")));
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for &id in deltas {
        let d = g.param(store, id);
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        total = g.add(total, s)?;
    }
    Ok(g.scale(total, lambda_p))
}

/// Direct evaluation of the penalty.
pub fn reg_value(store: &ParamStore, deltas: &[ParamId], lambda_p: f32) -> f64 {
    let sum: f64 = deltas
        .iter()
        .flat_map(|&id| store.get(id).data().iter())
        .map(|&v| v as f64 * v as f64)
        .sum();
    lambda_p as f64 * sum
}

/// `BCE(logits, target) + λ_p Σ ΔP²`. Targets must be exactly 0 or 1.
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    target: &Tensor,
    store: &ParamStore,
    deltas: &[ParamId],
    cfg: &LossConfig,
) -> Result<Var> {
    if let Some(v) = target.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("target value {v} is not binary")));
    }
    let bce = g.bce_with_logits(logits, target)?;
    let reg = reg_loss(g, store, deltas, cfg.lambda_p)?;
    g.add(bce, reg)
}

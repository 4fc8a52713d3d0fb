//! ViT image encoder with two bottleneck adapters per block.
//!
//! Block dataflow, with `A1`, `A2` the adapters and `s` the balance factor:
//!
//! ```text
//! X1 = A1(X)                       adapter before the attention norm
//! X2 = X1 + MHA(norm1(X1))
//! Y  = norm2(X2)
//! X' = X2 + MLP(Y) + s * A2core(Y) adapter parallel to the MLP
//! ```
//!
//! `A(X) = X + A_core(X)` with `A_core(X) = relu(norm(X) W_down + b_down) W_up + b_up`.
//! `W_up` starts at zero, so every adapter is the identity at initialization.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{uniform, Attention, LayerNorm, Linear, Mlp};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub adapter_dim: usize,
    pub balance: f32,
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            adapter_dim: 8,
            balance: 0.5,
            input_channels: 5,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.adapter_dim == 0 || self.adapter_dim >= self.embed_dim {
            return bad(format!(
                "adapter dim {} must lie in 1..{}",
                self.adapter_dim, self.embed_dim
            ));
        }
        if !(self.balance > 0.0 && self.balance <= 1.0) {
            return bad(format!("balance factor {} outside (0, 1]", self.balance));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("{} heads do not divide width {}", self.heads, self.embed_dim));
        }
        if self.input_channels == 0 || self.input_channels.is_multiple_of(2) {
            return bad(format!("input channel count {} must be odd", self.input_channels));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return bad("depth and mlp_ratio must be positive".into());
        }
        Ok(())
    }
}

/// Residual bottleneck adapter.
#[derive(Clone, Copy, Debug)]
pub struct Adapter {
    pub norm: LayerNorm,
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, bottleneck: usize, rng: &mut ChaCha8Rng) -> Self {
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dim);
        // Kaiming-uniform for a ReLU fan-in
        let bound = (6.0 / dim as f64).sqrt();
        let down = Linear::with_init(
            store,
            &format!("{name}.down"),
            uniform(&[dim, bottleneck], bound, rng),
            dim,
            bottleneck,
        );
        let up = Linear::with_init(
            store,
            &format!("{name}.up"),
            Tensor::zeros(&[bottleneck, dim]),
            bottleneck,
            dim,
        );
        Adapter { norm, down, up }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.norm
            .ids()
            .into_iter()
            .chain(self.down.ids())
            .chain(self.up.ids())
            .collect()
    }

    /// Bottleneck branch without the outer residual.
    pub fn core(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, store, x)?;
        let h = self.down.forward(g, store, h)?;
        let h = g.relu(h);
        self.up.forward(g, store, h)
    }

    /// `x + core(x)` for tokens `[..., c]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = self.core(g, store, x)?;
        g.add(x, c)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub adapter1: Adapter,
    pub adapter2: Adapter,
}

impl Block {
    fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = self.norm1.ids().to_vec();
        ids.extend(self.attn.ids());
        ids.extend(self.norm2.ids());
        ids.extend(self.mlp.ids());
        ids
    }

    /// One block over tokens `[B, N, c]`. With `adapters == false` the block
    /// is the plain pre-norm ViT block.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, balance: f32, adapters: bool) -> Result<Var> {
        let x1 = if adapters {
            self.adapter1.forward(g, store, x)?
        } else {
            x
        };
        let h = self.norm1.forward(g, store, x1)?;
        let a = self.attn.forward(g, store, h, h, h)?;
        let x2 = g.add(x1, a)?;
        let y = self.norm2.forward(g, store, x2)?;
        let m = self.mlp.forward(g, store, y)?;
        let out = g.add(x2, m)?;
        if !adapters {
            return Ok(out);
        }
        let side = self.adapter2.core(g, store, y)?;
        let side = g.scale(side, balance);
        g.add(out, side)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (c, p, m) = (config.embed_dim, config.patch_size, config.input_channels);
        let fan_in = (m * p * p) as f64;
        let patch_w = store.add(
            "encoder.patch_embed.weight",
            uniform(&[c, m, p, p], 1.0 / fan_in.sqrt(), rng),
        );
        let patch_b = store.add("encoder.patch_embed.bias", Tensor::zeros(&[c]));
        let pos_embed = store.add("encoder.pos_embed", uniform(&[config.tokens(), c], 0.02, rng));
        let blocks = (0..config.depth)
            .map(|i| {
                let n = format!("encoder.blocks.{i}");
                Block {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), c),
                    attn: Attention::new(store, &format!("{n}.attn"), c, config.heads, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), c),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), c, c * config.mlp_ratio, rng),
                    adapter1: Adapter::new(store, &format!("{n}.adapter1"), c, config.adapter_dim, rng),
                    adapter2: Adapter::new(store, &format!("{n}.adapter2"), c, config.adapter_dim, rng),
                }
            })
            .collect();
        Ok(Encoder {
            config,
            patch_w,
            patch_b,
            pos_embed,
            blocks,
        })
    }

    /// Every pretrained tensor: patch embedding, positional table and block weights.
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos_embed];
        ids.extend(self.blocks.iter().flat_map(Block::backbone_ids));
        ids
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.adapter1.ids().into_iter().chain(b.adapter2.ids()))
            .collect()
    }

    /// Freezes the backbone and leaves adapters trainable. Idempotent.
    pub fn freeze_backbone(&self, store: &mut ParamStore) {
        for id in self.backbone_ids() {
            store.set_trainable(id, false);
        }
        for id in self.adapter_ids() {
            store.set_trainable(id, true);
        }
    }

    /// `x: [B, M, H, W]` to the embedding grid `[B, c, H/p, W/p]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, adapters: bool) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(x).to_vec();
        let want = [cfg.input_channels, cfg.image_size, cfg.image_size];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape("encode", &s, &want));
        }
        let (b, c, n, grid) = (s[0], cfg.embed_dim, cfg.tokens(), cfg.grid());
        let w = g.param(store, self.patch_w);
        let bias = g.param(store, self.patch_b);
        let e = g.conv2d(x, w, Some(bias), cfg.patch_size, 0)?;
        let e = g.reshape(e, &[b, c, n])?;
        let tokens = g.permute(e, &[0, 2, 1])?;
        let pos = g.param(store, self.pos_embed);
        let mut t = g.add_broadcast(tokens, pos)?;
        for block in &self.blocks {
            t = block.forward(g, store, t, cfg.balance, adapters)?;
        }
        let t = g.permute(t, &[0, 2, 1])?;
        g.reshape(t, &[b, c, grid, grid])
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            adapter_dim: 4,
            balance: 0.5,
            input_channels: 3,
        }
    }

    #[test]
    fn adapter_hand_examples() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Adapter::new(&mut store, "a", 2, 1, &mut rng);
        store.get_mut(a.down.w).data_mut().copy_from_slice(&[1.0, 0.0]);
        store.get_mut(a.up.w).data_mut().copy_from_slice(&[2.0, -1.0]);

        let run = |x: [f32; 2]| {
            let mut g = Graph::new();
            let xv = g.constant(Tensor::new(&[1, 2], x.to_vec()).unwrap());
            let y = a.forward(&mut g, &store, xv).unwrap();
            g.value(y).data().to_vec()
        };
        let y = run([3.0, 1.0]);
        assert!((y[0] - 5.0).abs() < 1e-4 && y[1].abs() < 1e-4, "{y:?}");
        assert_eq!(run([1.0, 3.0]), vec![1.0, 3.0]);
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Adapter::new(&mut store, "a", 8, 2, &mut rng);
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[3, 8], |k| (k as f32 * 0.37).sin());
        let xv = g.constant(x.clone());
        let y = a.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn encode_shape_and_validation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(small(), &mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 16, 16], 0.1));
        let y = enc.forward(&mut g, &store, x, true).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 4, 4]);
        let bad = g.constant(Tensor::full(&[2, 5, 16, 16], 0.1));
        assert!(enc.forward(&mut g, &store, bad, true).is_err());

        let mut cfg = small();
        cfg.adapter_dim = 16;
        assert!(cfg.validate().is_err());
        cfg = small();
        cfg.image_size = 18;
        assert!(cfg.validate().is_err());
        cfg = small();
        cfg.balance = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn freeze_backbone_is_idempotent() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::new(small(), &mut store, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, true);
        }
        enc.freeze_backbone(&mut store);
        let first: Vec<bool> = store.iter().map(|(_, _, t)| t.trainable()).collect();
        enc.freeze_backbone(&mut store);
        let second: Vec<bool> = store.iter().map(|(_, _, t)| t.trainable()).collect();
        assert_eq!(first, second);
        for id in enc.backbone_ids() {
            assert!(!store.get(id).trainable());
        }
        for id in enc.adapter_ids() {
            assert!(store.get(id).trainable());
        }
        assert_eq!(enc.blocks.len() * 2, 4);
    }
}

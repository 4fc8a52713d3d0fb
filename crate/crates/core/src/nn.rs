//! Small parameterized layers shared by the encoder and decoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound) as f32)
}

/// Affine map over the last axis: `x W + b`, `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights uniform in `±1/sqrt(d_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self::with_init(store, name, uniform(&[d_in, d_out], bound, rng), d_in, d_out)
    }

    pub fn with_init(store: &mut ParamStore, name: &str, w: Tensor, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    /// Applies to `x: [..., d_in]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = g.value(x).numel() / self.d_in.max(1);
        let flat = g.reshape(x, &[rows, self.d_in])?;
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(flat, w)?;
        let y = g.add_broadcast(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.d_out;
        g.reshape(y, &out_shape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Query/key/value/output projections around [`Graph::attention`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q_proj"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k_proj"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v_proj"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out_proj"), dim, dim, rng),
            heads,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.q, self.k, self.v, self.out]
            .iter()
            .flat_map(Linear::ids)
            .collect()
    }

    /// `q: [B, Nq, c]`, `k, v: [B, Nk, c]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var, k: Var, v: Var) -> Result<Var> {
        let q = self.q.forward(g, store, q)?;
        let k = self.k.forward(g, store, k)?;
        let v = self.v.forward(g, store, v)?;
        let o = g.attention(q, k, v, self.heads)?;
        self.out.forward(g, store, o)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.fc1.ids().into_iter().chain(self.fc2.ids()).collect()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

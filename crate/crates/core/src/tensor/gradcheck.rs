//! Central finite-difference verification of every differentiable op, run in
//! `f64`.
//!
//! Inputs are dyadic rationals and the step is `2^-13` (about `1.2e-4`), so
//! perturbations are exact and purely linear ops check to zero error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1.0 / 8192.0;

/// Operation under test. Shapes passed to [`grad_check`] describe the
/// primary inputs; auxiliary inputs (biases, norm affine, attention
/// values, loss targets) are derived from them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckOp {
    Identity,
    Add,
    Sub,
    Mul,
    Scale,
    /// `[x, b]` with `b` a trailing sub-shape of `x`.
    AddBroadcast,
    MatMul,
    BatchMatMul,
    /// `[x, w]`, bias `[O]` derived.
    Conv2d {
        stride: usize,
        pad: usize,
    },
    /// `[x, w]`, bias `[O]` derived.
    ConvTranspose2d {
        stride: usize,
    },
    /// `[x]`, scale and shift derived.
    LayerNorm,
    Relu,
    Gelu,
    Softmax,
    Sigmoid,
    /// `[q, kv]`; keys and values share the `kv` shape.
    Attention {
        heads: usize,
    },
    /// `[x, new_shape]`.
    Reshape,
    /// `[x]`, reverses the axis order.
    Permute,
    Sum,
    Mean,
    /// `[logits]`, target drawn from `[0, 1]`.
    BceWithLogits,
    /// `[pred]`, target drawn at random.
    Mse,
}

impl CheckOp {
    pub fn name(&self) -> &'static str {
        match self {
            CheckOp::Identity => "identity",
            CheckOp::Add => "add",
            CheckOp::Sub => "sub",
            CheckOp::Mul => "mul",
            CheckOp::Scale => "scale",
            CheckOp::AddBroadcast => "add_broadcast",
            CheckOp::MatMul => "matmul",
            CheckOp::BatchMatMul => "bmm",
            CheckOp::Conv2d { .. } => "conv2d",
            CheckOp::ConvTranspose2d { .. } => "conv_transpose2d",
            CheckOp::LayerNorm => "layer_norm",
            CheckOp::Relu => "relu",
            CheckOp::Gelu => "gelu",
            CheckOp::Softmax => "softmax",
            CheckOp::Sigmoid => "sigmoid",
            CheckOp::Attention { .. } => "attention",
            CheckOp::Reshape => "reshape",
            CheckOp::Permute => "permute",
            CheckOp::Sum => "sum",
            CheckOp::Mean => "mean",
            CheckOp::BceWithLogits => "bce_with_logits",
            CheckOp::Mse => "mse",
        }
    }

    /// Shapes of every differentiable input, in call order.
    fn input_shapes(&self, shapes: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        let need = |n: usize| -> Result<()> {
            if shapes.len() < n {
                Err(Error::invalid(format!(
                    "{} needs {n} input shapes, got {}",
                    self.name(),
                    shapes.len()
                )))
            } else {
                Ok(())
            }
        };
        Ok(match self {
            CheckOp::Add | CheckOp::Sub | CheckOp::Mul => {
                need(1)?;
                vec![shapes[0].to_vec(), shapes[shapes.len() - 1].to_vec()]
            }
            CheckOp::AddBroadcast | CheckOp::MatMul | CheckOp::BatchMatMul => {
                need(2)?;
                vec![shapes[0].to_vec(), shapes[1].to_vec()]
            }
            CheckOp::Conv2d { .. } => {
                need(2)?;
                vec![shapes[0].to_vec(), shapes[1].to_vec(), vec![shapes[1][0]]]
            }
            CheckOp::ConvTranspose2d { .. } => {
                need(2)?;
                vec![shapes[0].to_vec(), shapes[1].to_vec(), vec![shapes[1][1]]]
            }
            CheckOp::LayerNorm => {
                need(1)?;
                let n = *shapes[0].last().unwrap_or(&1);
                vec![shapes[0].to_vec(), vec![n], vec![n]]
            }
            CheckOp::Attention { .. } => {
                need(2)?;
                vec![shapes[0].to_vec(), shapes[1].to_vec(), shapes[1].to_vec()]
            }
            _ => {
                need(1)?;
                vec![shapes[0].to_vec()]
            }
        })
    }

    fn apply(&self, g: &mut Graph<f64>, x: &[Var], extra: &Extra) -> Result<Var> {
        Ok(match *self {
            CheckOp::Identity => x[0],
            CheckOp::Add => g.add(x[0], x[1])?,
            CheckOp::Sub => g.sub(x[0], x[1])?,
            CheckOp::Mul => g.mul(x[0], x[1])?,
            CheckOp::Scale => g.scale(x[0], -1.75),
            CheckOp::AddBroadcast => g.add_broadcast(x[0], x[1])?,
            CheckOp::MatMul => g.matmul(x[0], x[1])?,
            CheckOp::BatchMatMul => g.bmm(x[0], x[1])?,
            CheckOp::Conv2d { stride, pad } => g.conv2d(x[0], x[1], Some(x[2]), stride, pad)?,
            CheckOp::ConvTranspose2d { stride } => g.conv_transpose2d(x[0], x[1], Some(x[2]), stride)?,
            CheckOp::LayerNorm => g.layer_norm(x[0], x[1], x[2], 1e-5)?,
            CheckOp::Relu => g.relu(x[0]),
            CheckOp::Gelu => g.gelu(x[0]),
            CheckOp::Softmax => g.softmax(x[0]),
            CheckOp::Sigmoid => g.sigmoid(x[0]),
            CheckOp::Attention { heads } => g.attention(x[0], x[1], x[2], heads)?,
            CheckOp::Reshape => g.reshape(x[0], &extra.reshape)?,
            CheckOp::Permute => {
                let axes: Vec<usize> = (0..g.shape(x[0]).len()).rev().collect();
                g.permute(x[0], &axes)?
            }
            CheckOp::Sum => g.sum(x[0]),
            CheckOp::Mean => g.mean(x[0]),
            CheckOp::BceWithLogits => g.bce_with_logits(x[0], &extra.target)?,
            CheckOp::Mse => g.mse(x[0], &extra.target)?,
        })
    }
}

struct Extra {
    reshape: Vec<usize>,
    target: Tensor<f64>,
}

/// Dyadic value in `[-2, 2]` that is never within `2^-9` of zero.
fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
    (rng.random_range(-512i32..512) as f64 + 0.5) / 256.0
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dyadic(rng)).collect())
}

fn forward_loss(
    op: CheckOp,
    inputs: &[Tensor<f64>],
    extra: &Extra,
    weights: Option<&Tensor<f64>>,
    track: bool,
) -> Result<(Graph<f64>, Vec<Var>, Var)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
    let out = op.apply(&mut g, &vars, extra)?;
    let loss = match weights {
        Some(w) => {
            let w = g.constant(w.clone());
            let prod = g.mul(out, w)?;
            g.sum(prod)
        }
        None => out,
    };
    Ok((g, vars, loss))
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every element of
/// every differentiable input.
pub fn grad_check(op: CheckOp, shapes: &[&[usize]], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_shapes = op.input_shapes(shapes)?;
    let inputs = input_shapes
        .iter()
        .map(|s| random_tensor(s, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let reshape = match op {
        CheckOp::Reshape => shapes
            .get(1)
            .map(|s| s.to_vec())
            .ok_or_else(|| Error::invalid("reshape needs a target shape"))?,
        _ => Vec::new(),
    };
    let target = Tensor::new(
        &input_shapes[0],
        (0..inputs[0].numel())
            .map(|_| rng.random_range(0u32..=16) as f64 / 16.0)
            .collect(),
    )?;
    let extra = Extra { reshape, target };

    let (probe, _, out) = forward_loss(op, &inputs, &extra, None, false)?;
    let weights = if probe.value(out).numel() == 1 {
        None
    } else {
        Some(random_tensor(probe.shape(out), &mut rng)?)
    };

    let (mut g, vars, loss) = forward_loss(op, &inputs, &extra, weights.as_ref(), true)?;
    g.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = inputs.clone();
                perturbed[i].data_mut()[j] += delta;
                let (g, _, l) = forward_loss(op, &perturbed, &extra, weights.as_ref(), false)?;
                Ok(g.value(l).item())
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Every differentiable op with the shapes it is checked at.
pub fn suite() -> Vec<(CheckOp, Vec<Vec<usize>>)> {
    vec![
        (CheckOp::Identity, vec![vec![3, 4]]),
        (CheckOp::Add, vec![vec![2, 5]]),
        (CheckOp::Sub, vec![vec![2, 5]]),
        (CheckOp::Mul, vec![vec![2, 5]]),
        (CheckOp::Scale, vec![vec![7]]),
        (CheckOp::AddBroadcast, vec![vec![2, 3, 4], vec![3, 4]]),
        (CheckOp::MatMul, vec![vec![3, 4], vec![4, 2]]),
        (CheckOp::BatchMatMul, vec![vec![2, 3, 4], vec![2, 4, 5]]),
        (
            CheckOp::Conv2d { stride: 1, pad: 1 },
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]],
        ),
        (
            CheckOp::Conv2d { stride: 2, pad: 0 },
            vec![vec![1, 3, 6, 6], vec![4, 3, 2, 2]],
        ),
        (
            CheckOp::ConvTranspose2d { stride: 2 },
            vec![vec![2, 3, 3, 3], vec![3, 2, 2, 2]],
        ),
        (
            CheckOp::ConvTranspose2d { stride: 2 },
            vec![vec![1, 2, 3, 2], vec![2, 3, 3, 3]],
        ),
        (CheckOp::LayerNorm, vec![vec![2, 8]]),
        (CheckOp::Relu, vec![vec![4, 5]]),
        (CheckOp::Gelu, vec![vec![4, 5]]),
        (CheckOp::Softmax, vec![vec![3, 6]]),
        (CheckOp::Sigmoid, vec![vec![4, 5]]),
        (CheckOp::Attention { heads: 2 }, vec![vec![2, 3, 4], vec![2, 5, 4]]),
        (CheckOp::Attention { heads: 1 }, vec![vec![1, 1, 6], vec![1, 4, 6]]),
        (CheckOp::Reshape, vec![vec![2, 6], vec![3, 4]]),
        (CheckOp::Permute, vec![vec![2, 3, 4]]),
        (CheckOp::Sum, vec![vec![3, 3]]),
        (CheckOp::Mean, vec![vec![3, 3]]),
        (CheckOp::BceWithLogits, vec![vec![2, 7]]),
        (CheckOp::Mse, vec![vec![2, 7]]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        assert_eq!(grad_check(CheckOp::Identity, &[&[3, 5]], 1).unwrap(), 0.0);
    }

    #[test]
    fn layer_norm_within_tolerance() {
        let e = grad_check(CheckOp::LayerNorm, &[&[2, 8]], 7).unwrap();
        assert!(e < 1e-4, "{e}");
    }

    #[test]
    fn matmul_within_tolerance() {
        let e = grad_check(CheckOp::MatMul, &[&[3, 4], &[4, 2]], 3).unwrap();
        assert!(e < 1e-6, "{e}");
    }
}

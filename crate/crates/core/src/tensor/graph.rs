use std::collections::HashMap;

use super::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        target: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records executed operations in topological order and replays them in
/// reverse to accumulate gradients.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materializes `x` with axes reordered so that output axis `i` is input axis `axes[i]`.
fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.set_trainable(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    /// Leaf with an explicit gradient flag.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_with(value, Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.leaf(t.clone(), t.trainable());
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.shape(a), data).expect("same-shape elementwise");
        self.push(t, op, &[a, b])
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x), data).expect("unary map");
        self.push(t, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`
    /// (bias rows, positional tables, token tiling).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_broadcast", xs, bs));
        }
        let bd = self.data(b);
        let n = bd.len();
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&u, &v)| u + v))
            .collect();
        let t = Tensor::new(self.shape(x), data)?;
        Ok(self.push(t, Op::AddBroadcast(x, b), &[x, b]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            Mat::rm(self.data(a), k),
            Mat::rm(self.data(b), n),
            T::zero(),
            &mut out,
            n,
            1,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bn * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bn {
            gemm(
                m,
                k,
                n,
                Mat::rm(&ad[i * m * k..(i + 1) * m * k], k),
                Mat::rm(&bd[i * k * n..(i + 1) * k * n], n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        let t = Tensor::new(&[bn, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// 2D convolution. `x: [B, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape("conv2d", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        let (bn, o) = (sx[0], sw[0]);
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let img = sx[1] * sx[2] * sx[3];
        let mut cols = vec![T::zero(); rows * ncol];
        let mut out = vec![T::zero(); bn * o * ncol];
        for i in 0..bn {
            im2col(&self.data(x)[i * img..(i + 1) * img], &geom, &mut cols);
            let dst = &mut out[i * o * ncol..(i + 1) * o * ncol];
            gemm(
                o,
                rows,
                ncol,
                Mat::rm(self.data(w), rows),
                Mat::rm(&cols, ncol),
                T::zero(),
                dst,
                ncol,
                1,
            );
            if let Some(b) = b {
                for (ch, &bv) in self.data(b).iter().enumerate() {
                    dst[ch * ncol..(ch + 1) * ncol].iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        let t = Tensor::new(&[bn, o, geom.out_h(), geom.out_w()], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Transposed convolution without padding. `x: [B, C, H, W]`,
    /// `w: [C, O, kh, kw]`, output `[B, O, (H-1)*stride+kh, (W-1)*stride+kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(Error::shape("conv_transpose2d", &sw, self.shape(b)));
            }
        }
        let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let o = sw[1];
        let geom = ConvGeom {
            channels: o,
            height: (h - 1) * stride + sw[2],
            width: (wd - 1) * stride + sw[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad: 0,
        };
        let rows = geom.col_rows();
        let hw = h * wd;
        let out_img = o * geom.height * geom.width;
        let mut cols = vec![T::zero(); rows * hw];
        let mut out = vec![T::zero(); bn * out_img];
        for i in 0..bn {
            gemm(
                rows,
                c,
                hw,
                Mat::tr(self.data(w), rows),
                Mat::rm(&self.data(x)[i * c * hw..(i + 1) * c * hw], hw),
                T::zero(),
                &mut cols,
                hw,
                1,
            );
            let dst = &mut out[i * out_img..(i + 1) * out_img];
            col2im(&cols, &geom, dst);
            if let Some(b) = b {
                let plane = geom.height * geom.width;
                for (ch, &bv) in self.data(b).iter().enumerate() {
                    dst[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        let t = Tensor::new(&[bn, o, geom.height, geom.width], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, stride }, &inputs))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let n = *sx.last().expect("tensor has at least one axis");
        if self.shape(gamma) != [n] {
            return Err(Error::shape("layer_norm", sx, self.shape(gamma)));
        }
        if self.shape(beta) != [n] {
            return Err(Error::shape("layer_norm", sx, self.shape(beta)));
        }
        let eps = T::from_f64(eps);
        let nf = T::from_f64(n as f64);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let rows = self.data(x).len() / n;
        let mut xhat = Vec::with_capacity(rows * n);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * n);
        for row in self.data(x).chunks(n) {
            let mean = row.iter().fold(T::zero(), |a, &b| a + b) / nf;
            let var = row.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + bt[j]);
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        self.map(
            x,
            move |v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().expect("tensor has at least one axis");
        let mut out = self.data(x).to_vec();
        out.chunks_mut(n).for_each(softmax_row);
        let t = Tensor::new(self.shape(x), out).expect("softmax");
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Scaled dot-product attention split over `heads`.
    /// `q: [B, Nq, c]`, `k, v: [B, Nk, c]` -> `[B, Nq, c]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape("attention", sq, sk));
        }
        if sk != sv {
            return Err(Error::shape("attention", sk, sv));
        }
        let (bn, nq, c, nk) = (sq[0], sq[1], sq[2], sk[1]);
        if heads == 0 || c % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: {heads} heads do not divide width {c}"
            )));
        }
        let dh = c / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); bn * heads * nq * nk];
        let mut out = vec![T::zero(); bn * nq * c];
        for b in 0..bn {
            for h in 0..heads {
                let qo = b * nq * c + h * dh;
                let ko = b * nk * c + h * dh;
                let po = (b * heads + h) * nq * nk;
                let p = &mut probs[po..po + nq * nk];
                gemm(
                    nq,
                    dh,
                    nk,
                    Mat::strided(&qd[qo..], c, 1),
                    Mat::strided(&kd[ko..], 1, c),
                    T::zero(),
                    p,
                    nk,
                    1,
                );
                for row in p.chunks_mut(nk) {
                    row.iter_mut().for_each(|s| *s = *s * scale);
                    softmax_row(row);
                }
                gemm(
                    nq,
                    nk,
                    dh,
                    Mat::rm(p, nk),
                    Mat::strided(&vd[ko..], c, 1),
                    T::zero(),
                    &mut out[qo..],
                    c,
                    1,
                );
            }
        }
        let t = Tensor::new(&[bn, nq, c], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len()
            || axes
                .iter()
                .any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", sx, axes));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let data = permute_data(self.data(x), sx, axes);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.data(x).len() as f64);
        let s = self.data(x).iter().fold(T::zero(), |a, &b| a + b) / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy of `logits` against a constant target.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape("bce_with_logits", self.shape(logits), target.shape()));
        }
        let n = T::from_f64(target.numel() as f64);
        let loss = self
            .data(logits)
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&z, &y)| {
                acc + z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
            })
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("mse", self.shape(pred), target.shape()));
        }
        let n = T::from_f64(target.numel() as f64);
        let loss = self
            .data(pred)
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&p, &y)| acc + (p - y) * (p - y))
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        ))
    }

    /// Reverse pass from a one-element `loss`. Gradients are then available
    /// through [`Graph::grad`] for every node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Runs [`Graph::backward`] and accumulates gradients of bound parameters
    /// into `store`. Frozen parameters receive nothing.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = self.grads.get(v.0).and_then(|g| g.as_deref()) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => add_into(buf, &d),
                slot => *slot = Some(d),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.to_vec());
                acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(grads, *a, g.iter().zip(val(*b)).map(|(&u, &v)| u * v).collect());
                }
                if rg(*b) {
                    acc(grads, *b, g.iter().zip(val(*a)).map(|(&u, &v)| u * v).collect());
                }
            }
            Op::Scale(x, s) => acc(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::AddBroadcast(x, b) => {
                acc(grads, *x, g.to_vec());
                if rg(*b) {
                    let n = val(*b).len();
                    let mut gb = vec![T::zero(); n];
                    g.chunks(n).for_each(|row| add_into(&mut gb, row));
                    acc(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k, n) = (shp(*a)[0], shp(*a)[1], shp(*b)[1]);
                if rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, Mat::rm(g, n), Mat::tr(val(*b), n), T::zero(), &mut ga, k, 1);
                    acc(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, Mat::tr(val(*a), k), Mat::rm(g, n), T::zero(), &mut gb, n, 1);
                    acc(grads, *b, gb);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (bn, m, k, n) = (shp(*a)[0], shp(*a)[1], shp(*a)[2], shp(*b)[2]);
                let (ad, bd) = (val(*a), val(*b));
                if rg(*a) {
                    let mut ga = vec![T::zero(); bn * m * k];
                    for i in 0..bn {
                        gemm(
                            m,
                            n,
                            k,
                            Mat::rm(&g[i * m * n..], n),
                            Mat::tr(&bd[i * k * n..], n),
                            T::zero(),
                            &mut ga[i * m * k..],
                            k,
                            1,
                        );
                    }
                    acc(grads, *a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); bn * k * n];
                    for i in 0..bn {
                        gemm(
                            k,
                            m,
                            n,
                            Mat::tr(&ad[i * m * k..], k),
                            Mat::rm(&g[i * m * n..], n),
                            T::zero(),
                            &mut gb[i * k * n..],
                            n,
                            1,
                        );
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (sx, sw) = (shp(*x), shp(*w));
                let geom = ConvGeom {
                    channels: sx[1],
                    height: sx[2],
                    width: sx[3],
                    kh: sw[2],
                    kw: sw[3],
                    stride: *stride,
                    pad: *pad,
                };
                let (bn, o) = (sx[0], sw[0]);
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                let img = sx[1] * sx[2] * sx[3];
                let mut cols = vec![T::zero(); rows * ncol];
                let mut gw = rg(*w).then(|| vec![T::zero(); o * rows]);
                let mut gx = rg(*x).then(|| vec![T::zero(); bn * img]);
                for i in 0..bn {
                    let gi = &g[i * o * ncol..(i + 1) * o * ncol];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&val(*x)[i * img..(i + 1) * img], &geom, &mut cols);
                        gemm(
                            o,
                            ncol,
                            rows,
                            Mat::rm(gi, ncol),
                            Mat::tr(&cols, ncol),
                            T::one(),
                            gw,
                            rows,
                            1,
                        );
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            rows,
                            o,
                            ncol,
                            Mat::tr(val(*w), rows),
                            Mat::rm(gi, ncol),
                            T::zero(),
                            &mut cols,
                            ncol,
                            1,
                        );
                        col2im(&cols, &geom, &mut gx[i * img..(i + 1) * img]);
                    }
                }
                if let Some(gw) = gw {
                    acc(grads, *w, gw);
                }
                if let Some(gx) = gx {
                    acc(grads, *x, gx);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    acc(grads, b, channel_sums(g, bn, o, ncol));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let (sx, sw) = (shp(*x), shp(*w));
                let (bn, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let o = sw[1];
                let geom = ConvGeom {
                    channels: o,
                    height: (h - 1) * stride + sw[2],
                    width: (wd - 1) * stride + sw[3],
                    kh: sw[2],
                    kw: sw[3],
                    stride: *stride,
                    pad: 0,
                };
                let rows = geom.col_rows();
                let hw = h * wd;
                let out_img = o * geom.height * geom.width;
                let mut cols = vec![T::zero(); rows * hw];
                let mut gw = rg(*w).then(|| vec![T::zero(); c * rows]);
                let mut gx = rg(*x).then(|| vec![T::zero(); bn * c * hw]);
                for i in 0..bn {
                    im2col(&g[i * out_img..(i + 1) * out_img], &geom, &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            c,
                            rows,
                            hw,
                            Mat::rm(val(*w), rows),
                            Mat::rm(&cols, hw),
                            T::zero(),
                            &mut gx[i * c * hw..],
                            hw,
                            1,
                        );
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xi = &val(*x)[i * c * hw..(i + 1) * c * hw];
                        gemm(c, hw, rows, Mat::rm(xi, hw), Mat::tr(&cols, hw), T::one(), gw, rows, 1);
                    }
                }
                if let Some(gw) = gw {
                    acc(grads, *w, gw);
                }
                if let Some(gx) = gx {
                    acc(grads, *x, gx);
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    acc(grads, b, channel_sums(g, bn, o, geom.height * geom.width));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = val(*gamma).len();
                let gm = val(*gamma);
                let nf = T::from_f64(n as f64);
                if rg(*x) {
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, ((gr, xr), out)) in g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let d = gr[j] * gm[j];
                            s1 = s1 + d;
                            s2 = s2 + d * xr[j];
                        }
                        let (m1, m2) = (s1 / nf, s2 / nf);
                        for j in 0..n {
                            out[j] = rstd[r] * (gr[j] * gm[j] - m1 - xr[j] * m2);
                        }
                    }
                    acc(grads, *x, gx);
                }
                if rg(*gamma) {
                    let mut gg = vec![T::zero(); n];
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] = gg[j] + gr[j] * xr[j];
                        }
                    }
                    acc(grads, *gamma, gg);
                }
                if rg(*beta) {
                    let mut gb = vec![T::zero(); n];
                    g.chunks(n).for_each(|row| add_into(&mut gb, row));
                    acc(grads, *beta, gb);
                }
            }
            Op::Relu(x) => acc(
                grads,
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(&u, &v)| if v > T::zero() { u } else { T::zero() })
                    .collect(),
            ),
            Op::Gelu(x) => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(val(*x))
                        .map(|(&u, &v)| {
                            let th = (c * (v + a * v * v * v)).tanh();
                            let d = half * (T::one() + th)
                                + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                            u * d
                        })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => acc(
                grads,
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(&u, &s)| u * s * (T::one() - s))
                    .collect(),
            ),
            Op::Softmax(x) => {
                let n = *shp(*x).last().unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(n).zip(node.value.data().chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&u, &y)| a + u * y);
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (bn, nq, c) = (shp(*q)[0], shp(*q)[1], shp(*q)[2]);
                let nk = shp(*k)[1];
                let dh = c / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut gq = vec![T::zero(); qd.len()];
                let mut gk = vec![T::zero(); kd.len()];
                let mut gv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); nq * nk];
                for b in 0..bn {
                    for h in 0..*heads {
                        let qo = b * nq * c + h * dh;
                        let ko = b * nk * c + h * dh;
                        let po = (b * heads + h) * nq * nk;
                        let p = &probs[po..po + nq * nk];
                        let go = Mat::strided(&g[qo..], c, 1);
                        // dV = P^T dO
                        gemm(nk, nq, dh, Mat::tr(p, nk), go, T::one(), &mut gv[ko..], c, 1);
                        // dP = dO V^T
                        gemm(nq, dh, nk, go, Mat::strided(&vd[ko..], 1, c), T::zero(), &mut dp, nk, 1);
                        for (dr, pr) in dp.chunks_mut(nk).zip(p.chunks(nk)) {
                            let dot = dr.iter().zip(pr).fold(T::zero(), |a, (&d, &p)| a + d * p);
                            for j in 0..nk {
                                dr[j] = pr[j] * (dr[j] - dot) * scale;
                            }
                        }
                        gemm(
                            nq,
                            nk,
                            dh,
                            Mat::rm(&dp, nk),
                            Mat::strided(&kd[ko..], c, 1),
                            T::one(),
                            &mut gq[qo..],
                            c,
                            1,
                        );
                        gemm(
                            nk,
                            nq,
                            dh,
                            Mat::tr(&dp, nk),
                            Mat::strided(&qd[qo..], c, 1),
                            T::one(),
                            &mut gk[ko..],
                            c,
                            1,
                        );
                    }
                }
                acc(grads, *q, gq);
                acc(grads, *k, gk);
                acc(grads, *v, gv);
            }
            Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                acc(grads, *x, permute_data(g, node.value.shape(), &inv));
            }
            Op::Sum(x) => acc(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                acc(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::BceWithLogits { logits, target } => {
                let s = g[0] / T::from_f64(target.len() as f64);
                acc(
                    grads,
                    *logits,
                    val(*logits)
                        .iter()
                        .zip(target)
                        .map(|(&z, &y)| (sigmoid(z) - y) * s)
                        .collect(),
                );
            }
            Op::Mse { pred, target } => {
                let s = g[0] * T::from_f64(2.0 / target.len() as f64);
                acc(
                    grads,
                    *pred,
                    val(*pred).iter().zip(target).map(|(&p, &y)| (p - y) * s).collect(),
                );
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

fn channel_sums<T: Scalar>(g: &[T], bn: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); ch];
    for i in 0..bn {
        for (c, o) in out.iter_mut().enumerate() {
            let start = (i * ch + c) * plane;
            *o = g[start..start + plane].iter().fold(*o, |a, &b| a + b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[3.0, -3.0]), true);
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_two_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 2], &[3.0, 1.0]));
        let gamma = g.constant(t(&[2], &[1.0, 1.0]));
        let beta = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-4 && (d[1] + 1.0).abs() < 1e-4, "{d:?}");
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[2, 3], 0.5), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::full(&[1], 4.0), true);
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2]));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[3, 4]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "matmul: shape mismatch between [3, 4] and [3, 2]");
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().starts_with("add:"));
    }

    #[test]
    fn permute_matches_index_formula() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        let yd = g.value(y).data();
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(yd[(a * 2 + b) * 3 + c], data[(b * 3 + c) * 4 + a]);
                }
            }
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f32>::new();
        let mut w = Tensor::full(&[2, 2], 1.0);
        w.set_trainable(true);
        let w = store.add("w", w);
        let f = store.add("f", Tensor::full(&[2, 2], 1.0));
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let fv = g.param(&store, f);
        let y = g.matmul(wv, fv).unwrap();
        let s = g.sum(y);
        g.backward_into(s, &mut store).unwrap();
        assert!(store.get(w).grad().is_some());
        assert!(store.get(f).grad().is_none());
        assert!(g.grad(fv).is_none());
    }
}

//! Reverse-mode automatic differentiation on an arena tape.
//!
//! A [`Graph`] records every operation in construction order, which is
//! already topological, so the backward sweep is a single reverse pass over
//! the arena. Parameters live outside graphs in a [`ParamStore`]; binding a
//! parameter copies its current value into a leaf node tagged with the
//! parameter id, and `backward_into` accumulates gradients back into the
//! store. Graphs are built per forward pass and dropped afterwards.

use crate::error::{Error, Result};
use crate::numerics::resize::axis_taps;
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::{matmul_into, matmul_transa_into, matmul_transb_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Flat registry of named parameters with their gradients.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Mark every parameter as frozen or trainable.
    pub fn set_trainable_all(&mut self, ids: &[ParamId], trainable: bool) {
        for &id in ids {
            self.params[id.0].trainable = trainable;
        }
    }

    /// Count of scalar entries across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrite every value with small Gaussian noise. Verification helper:
    /// finite-difference checks need generic (non-zero) gradients, which
    /// zero-initialized output layers would not provide.
    pub fn randomize(&mut self, rng: &mut RngStream, sigma: f64) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = rng.normal() * sigma;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// x·mul + c (the constant does not affect the gradient)
    Affine(Var, f64),
    /// [.., n] + [n]
    AddBias(Var, Var),
    /// [B,C,H,W] + [C]
    BiasChannels(Var, Var),
    /// [B,C,H,W] + [B,C]
    AddChannelVec(Var, Var),
    Matmul(Var, Var),
    /// [b,m,k]·[b,k,n]
    Bmm(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2(Var),
    ResizeBilinear(Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    /// Step function; has no gradient.
    Heaviside(Var),
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    /// [I, L] -> [I, Np, patch]
    Unfold1d {
        x: Var,
        patch: usize,
        stride: usize,
    },
    /// [I, L] -> [I, L+p], replicating the final entry.
    PadLastReplicate(Var, usize),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// One forward computation, recorded for reverse-mode differentiation.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward target with respect to `v`.
    pub fn grad_of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Non-differentiable data leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    /// Differentiable non-parameter leaf (for input-gradient queries).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Bind a parameter: copies its current value into the graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(Op::Param(id), p.value.clone(), p.trainable)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), value, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), value, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).mul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), value, needs)
    }

    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = self.value(x).map(|v| v * mul + add);
        let needs = self.needs(x);
        self.push(Op::Affine(x, mul), value, needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let n = *self.shape(x).last().expect("add_bias on scalar");
        assert_eq!(self.shape(b), &[n], "bias extent mismatch");
        let xv = self.value(x);
        let bv = self.value(b).data();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (o, &bb) in chunk.iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data);
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::AddBias(x, b), value, needs)
    }

    pub fn bias_channels(&mut self, x: Var, b: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "bias_channels expects NCHW");
        assert_eq!(self.shape(b), &[s[1]]);
        let hw = s[2] * s[3];
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(hw).enumerate() {
            let bb = bv[i % s[1]];
            chunk.iter_mut().for_each(|v| *v += bb);
        }
        let value = Tensor::new(s, data);
        let needs = self.needs(x) || self.needs(b);
        self.push(Op::BiasChannels(x, b), value, needs)
    }

    pub fn add_channel_vec(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "add_channel_vec expects NCHW");
        assert_eq!(self.shape(v), &[s[0], s[1]]);
        let hw = s[2] * s[3];
        let vv = self.value(v).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(hw).enumerate() {
            let add = vv[i]; // i runs over B*C in order
            chunk.iter_mut().for_each(|p| *p += add);
        }
        let value = Tensor::new(s, data);
        let needs = self.needs(x) || self.needs(v);
        self.push(Op::AddChannelVec(x, v), value, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), value, needs)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3, "bmm lhs must be 3-D");
        assert_eq!(sb.len(), 3, "bmm rhs must be 3-D");
        assert_eq!(sa[0], sb[0], "bmm batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm inner mismatch");
        let (bb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; bb * m * n];
        for i in 0..bb {
            matmul_into(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bb, m, n], out);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Bmm(a, b), value, needs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = conv2d_forward(self.value(x), self.value(w), b.map(|bv| self.value(bv)), stride, pad);
        let needs =
            self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            value,
            needs,
        )
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * 4 * h * w];
        for bc in 0..b * c {
            let sp = &src[bc * h * w..(bc + 1) * h * w];
            let op = &mut out[bc * 4 * h * w..(bc + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    op[i * 2 * w + j] = sp[(i / 2) * w + j / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out);
        let needs = self.needs(x);
        self.push(Op::UpsampleNearest2(x), value, needs)
    }

    /// Bilinear resize of each plane of an NCHW tensor.
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h0, w0) = (s[0], s[1], s[2], s[3]);
        let rows = axis_taps(h0, h);
        let cols = axis_taps(w0, w);
        let src = self.value(x).data();
        let mut out = vec![0.0; b * c * h * w];
        for bc in 0..b * c {
            let sp = &src[bc * h0 * w0..(bc + 1) * h0 * w0];
            let op = &mut out[bc * h * w..(bc + 1) * h * w];
            for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
                for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                    let t = sp[r0 * w0 + c0] + (sp[r0 * w0 + c1] - sp[r0 * w0 + c0]) * fx;
                    let bo = sp[r1 * w0 + c0] + (sp[r1 * w0 + c1] - sp[r1 * w0 + c0]) * fx;
                    op[i * w + j] = t + (bo - t) * fy;
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out);
        let needs = self.needs(x);
        self.push(Op::ResizeBilinear(x), value, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(Op::Relu(x), value, needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let needs = self.needs(x);
        self.push(Op::Silu(x), value, needs)
    }

    pub fn sigmoid_op(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(Op::Sigmoid(x), value, needs)
    }

    pub fn tanh_op(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let needs = self.needs(x);
        self.push(Op::Tanh(x), value, needs)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let needs = self.needs(x);
        self.push(Op::Exp(x), value, needs)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        let needs = self.needs(x);
        self.push(Op::Ln(x), value, needs)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sin);
        let needs = self.needs(x);
        self.push(Op::Sin(x), value, needs)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::cos);
        let needs = self.needs(x);
        self.push(Op::Cos(x), value, needs)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sqrt);
        let needs = self.needs(x);
        self.push(Op::Sqrt(x), value, needs)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let needs = self.needs(x);
        self.push(Op::Clamp(x, lo, hi), value, needs)
    }

    /// Θ(x): 1 for x ≥ 0, else 0. Differentiating through it is a
    /// capability error.
    pub fn heaviside(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
        let needs = self.needs(x);
        self.push(Op::Heaviside(x), value, needs)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("softmax on scalar");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data);
        let needs = self.needs(x);
        self.push(Op::SoftmaxLast(x), value, needs)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("layer_norm on scalar");
        assert_eq!(self.shape(gamma), &[n]);
        assert_eq!(self.shape(beta), &[n]);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Op::LayerNorm { x, gamma, beta, eps }, value, needs)
    }

    /// Group normalization over channel groups of an NCHW tensor.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "group_norm expects NCHW");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let cg = c / groups;
        let gsize = cg * h * w;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for bi in 0..b {
            for gi in 0..groups {
                let start = bi * c * h * w + gi * gsize;
                let seg = &mut data[start..start + gsize];
                let (mean, var) = mean_var(seg);
                let inv = 1.0 / (var + eps).sqrt();
                for (k, v) in seg.iter_mut().enumerate() {
                    let ch = gi * cg + k / (h * w);
                    *v = (*v - mean) * inv * gv[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::new(s, data);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
            value,
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let needs = self.needs(x);
        self.push(Op::Reshape(x), value, needs)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let value = permute_tensor(self.value(x), perm);
        let needs = self.needs(x);
        self.push(Op::Permute(x, perm.to_vec()), value, needs)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = concat_tensors(&tensors, axis);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Op::Concat(parts.to_vec(), axis), value, needs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = slice_tensor(self.value(x), axis, start, len);
        let needs = self.needs(x);
        self.push(
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            value,
            needs,
        )
    }

    pub fn unfold1d(&mut self, x: Var, patch: usize, stride: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2, "unfold1d expects [instances, length]");
        let (inst, l) = (s[0], s[1]);
        assert!(l >= patch, "length {l} shorter than patch {patch}");
        let np = (l - patch) / stride + 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; inst * np * patch];
        for i in 0..inst {
            for p in 0..np {
                let from = i * l + p * stride;
                let to = (i * np + p) * patch;
                out[to..to + patch].copy_from_slice(&src[from..from + patch]);
            }
        }
        let value = Tensor::new(vec![inst, np, patch], out);
        let needs = self.needs(x);
        self.push(Op::Unfold1d { x, patch, stride }, value, needs)
    }

    pub fn pad_last_replicate(&mut self, x: Var, pad: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (inst, l) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; inst * (l + pad)];
        for i in 0..inst {
            out[i * (l + pad)..i * (l + pad) + l].copy_from_slice(&src[i * l..(i + 1) * l]);
            let last = src[(i + 1) * l - 1];
            for j in 0..pad {
                out[i * (l + pad) + l + j] = last;
            }
        }
        let value = Tensor::new(vec![inst, l + pad], out);
        let needs = self.needs(x);
        self.push(Op::PadLastReplicate(x, pad), value, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(Op::SumAll(x), value, needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let needs = self.needs(x);
        self.push(Op::MeanAll(x), value, needs)
    }

    /// mean((a−b)²)
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Run the reverse sweep from a scalar `loss`. Node gradients stay
    /// queryable via [`grad_of`](Self::grad_of); parameter gradients are
    /// accumulated into `store`.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[i] {
                    let p = store.get_mut(id);
                    let acc = p.grad.data_mut();
                    for (a, &gv) in acc.iter_mut().zip(g.data()) {
                        *a += gv;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reverse sweep only; gradients retrievable per node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward target must be scalar, got {} elements",
                self.value(loss).len()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        ));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout)?;
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                let gd = g.data_mut();
                for (a, &d) in gd.iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, gout: &Tensor) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(a, gout.clone());
                self.accumulate(b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, gout.clone());
                self.accumulate(b, gout.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = gout.mul(self.value(b));
                let gb = gout.mul(self.value(a));
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Affine(x, m) => {
                self.accumulate(x, gout.scale(m));
            }
            Op::AddBias(x, b) => {
                self.accumulate(x, gout.clone());
                if self.needs(b) {
                    let n = self.shape(b)[0];
                    let mut gb = vec![0.0; n];
                    for chunk in gout.data().chunks(n) {
                        for (a, &g) in gb.iter_mut().zip(chunk) {
                            *a += g;
                        }
                    }
                    self.accumulate(b, Tensor::new(vec![n], gb));
                }
            }
            Op::BiasChannels(x, b) => {
                self.accumulate(x, gout.clone());
                if self.needs(b) {
                    let s = self.shape(x).to_vec();
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in gout.data().chunks(hw).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(b, Tensor::new(vec![c], gb));
                }
            }
            Op::AddChannelVec(x, v) => {
                self.accumulate(x, gout.clone());
                if self.needs(v) {
                    let s = self.shape(x).to_vec();
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut gv = vec![0.0; b * c];
                    for (i, chunk) in gout.data().chunks(hw).enumerate() {
                        gv[i] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(v, Tensor::new(vec![b, c], gv));
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_transb_into(gout.data(), self.value(b).data(), &mut ga, m, n, k);
                    self.accumulate(a, Tensor::new(vec![m, k], ga));
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_transa_into(self.value(a).data(), gout.data(), &mut gb, k, m, n);
                    self.accumulate(b, Tensor::new(vec![k, n], gb));
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (bb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs(a) {
                    let mut ga = vec![0.0; bb * m * k];
                    for i in 0..bb {
                        matmul_transb_into(
                            &gout.data()[i * m * n..(i + 1) * m * n],
                            &self.value(b).data()[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(a, Tensor::new(vec![bb, m, k], ga));
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; bb * k * n];
                    for i in 0..bb {
                        matmul_transa_into(
                            &self.value(a).data()[i * m * k..(i + 1) * m * k],
                            &gout.data()[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(b, Tensor::new(vec![bb, k, n], gb));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = conv2d_backward(
                    self.value(x),
                    self.value(w),
                    gout,
                    stride,
                    pad,
                    self.needs(x),
                    self.needs(w),
                    b.map(|bv| self.needs(bv)).unwrap_or(false),
                );
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, gw);
                }
                if let (Some(bv), Some(gb)) = (b, gb) {
                    self.accumulate(bv, gb);
                }
            }
            Op::UpsampleNearest2(x) => {
                let s = self.shape(x).to_vec();
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![0.0; b * c * h * w];
                let gd = gout.data();
                for bc in 0..b * c {
                    let gp = &gd[bc * 4 * h * w..(bc + 1) * 4 * h * w];
                    let xp = &mut gx[bc * h * w..(bc + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            xp[(i / 2) * w + j / 2] += gp[i * 2 * w + j];
                        }
                    }
                }
                self.accumulate(x, Tensor::new(vec![b, c, h, w], gx));
            }
            Op::ResizeBilinear(x) => {
                let s = self.shape(x).to_vec();
                let (b, c, h0, w0) = (s[0], s[1], s[2], s[3]);
                let os = gout.shape();
                let (h, w) = (os[2], os[3]);
                let rows = axis_taps(h0, h);
                let cols = axis_taps(w0, w);
                let gd = gout.data();
                let mut gx = vec![0.0; b * c * h0 * w0];
                for bc in 0..b * c {
                    let gp = &gd[bc * h * w..(bc + 1) * h * w];
                    let xp = &mut gx[bc * h0 * w0..(bc + 1) * h0 * w0];
                    for (i, &(r0, r1, fy)) in rows.iter().enumerate() {
                        for (j, &(c0, c1, fx)) in cols.iter().enumerate() {
                            let g = gp[i * w + j];
                            xp[r0 * w0 + c0] += g * (1.0 - fy) * (1.0 - fx);
                            xp[r0 * w0 + c1] += g * (1.0 - fy) * fx;
                            xp[r1 * w0 + c0] += g * fy * (1.0 - fx);
                            xp[r1 * w0 + c1] += g * fy * fx;
                        }
                    }
                }
                self.accumulate(x, Tensor::new(s, gx));
            }
            Op::Relu(x) => {
                let gx = gout.zip_map(self.value(x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.accumulate(x, gx);
            }
            Op::Silu(x) => {
                let gx = gout.zip_map(self.value(x), |g, v| {
                    let s = sigmoid(v);
                    g * (s + v * s * (1.0 - s))
                });
                self.accumulate(x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = gout.zip_map(&self.nodes[i].value, |g, y| g * y * (1.0 - y));
                self.accumulate(x, gx);
            }
            Op::Tanh(x) => {
                let gx = gout.zip_map(&self.nodes[i].value, |g, y| g * (1.0 - y * y));
                self.accumulate(x, gx);
            }
            Op::Exp(x) => {
                let gx = gout.mul(&self.nodes[i].value);
                self.accumulate(x, gx);
            }
            Op::Ln(x) => {
                let gx = gout.zip_map(self.value(x), |g, v| g / v);
                self.accumulate(x, gx);
            }
            Op::Sin(x) => {
                let gx = gout.zip_map(self.value(x), |g, v| g * v.cos());
                self.accumulate(x, gx);
            }
            Op::Cos(x) => {
                let gx = gout.zip_map(self.value(x), |g, v| -g * v.sin());
                self.accumulate(x, gx);
            }
            Op::Sqrt(x) => {
                let gx = gout.zip_map(&self.nodes[i].value, |g, y| g * 0.5 / y);
                self.accumulate(x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let gx = gout.zip_map(self.value(x), |g, v| if v >= lo && v <= hi { g } else { 0.0 });
                self.accumulate(x, gx);
            }
            Op::Heaviside(x) => {
                if self.needs(x) {
                    return Err(Error::Capability(
                        "heaviside has no gradient; remove it from the differentiated path".into(),
                    ));
                }
            }
            Op::SoftmaxLast(x) => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().unwrap();
                let mut gx = vec![0.0; y.len()];
                for ((gxr, yr), gr) in gx
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(gout.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(x, Tensor::new(y.shape().to_vec(), gx));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (gx, gg, gb) = layer_norm_backward(
                    self.value(x),
                    self.value(gamma),
                    gout,
                    eps,
                    self.needs(x),
                );
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                self.accumulate(gamma, gg);
                self.accumulate(beta, gb);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let (gx, gg, gb) = group_norm_backward(
                    self.value(x),
                    self.value(gamma),
                    gout,
                    groups,
                    eps,
                    self.needs(x),
                );
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                self.accumulate(gamma, gg);
                self.accumulate(beta, gb);
            }
            Op::Reshape(x) => {
                let gx = gout.clone().reshape(self.shape(x).to_vec());
                self.accumulate(x, gx);
            }
            Op::Permute(x, perm) => {
                let inv = invert_perm(&perm);
                let gx = permute_tensor(gout, &inv);
                self.accumulate(x, gx);
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in &parts {
                    let len = self.shape(p)[axis];
                    let gp = slice_tensor(gout, axis, start, len);
                    self.accumulate(p, gp);
                    start += len;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let gx = unslice_tensor(gout, self.shape(x), axis, start, len);
                self.accumulate(x, gx);
            }
            Op::Unfold1d { x, patch, stride } => {
                let s = self.shape(x).to_vec();
                let (inst, l) = (s[0], s[1]);
                let np = (l - patch) / stride + 1;
                let mut gx = vec![0.0; inst * l];
                let gd = gout.data();
                for i in 0..inst {
                    for p in 0..np {
                        let from = (i * np + p) * patch;
                        let to = i * l + p * stride;
                        for k in 0..patch {
                            gx[to + k] += gd[from + k];
                        }
                    }
                }
                self.accumulate(x, Tensor::new(vec![inst, l], gx));
            }
            Op::PadLastReplicate(x, pad) => {
                let s = self.shape(x).to_vec();
                let (inst, l) = (s[0], s[1]);
                let gd = gout.data();
                let mut gx = vec![0.0; inst * l];
                for i in 0..inst {
                    let row = &gd[i * (l + pad)..(i + 1) * (l + pad)];
                    gx[i * l..(i + 1) * l].copy_from_slice(&row[..l]);
                    gx[(i + 1) * l - 1] += row[l..].iter().sum::<f64>();
                }
                self.accumulate(x, Tensor::new(vec![inst, l], gx));
            }
            Op::SumAll(x) => {
                let g = gout.item();
                let gx = Tensor::full(self.shape(x).to_vec(), g);
                self.accumulate(x, gx);
            }
            Op::MeanAll(x) => {
                let n = self.value(x).len() as f64;
                let g = gout.item() / n;
                let gx = Tensor::full(self.shape(x).to_vec(), g);
                self.accumulate(x, gx);
            }
        }
        Ok(())
    }
}

/// Evaluate a scalar computation over the store's parameters, run backward,
/// and accumulate per-parameter gradients. Returns the loss value.
pub fn gradient<F>(store: &mut ParamStore, f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if g.value(loss).len() != 1 {
        return Err(Error::Dimension("gradient target must be scalar".into()));
    }
    let value = g.value(loss).item();
    g.backward_into(loss, store)?;
    Ok(value)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    assert_eq!(perm.len(), shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; t.len()];
    let src = t.data();
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    for o in out.iter_mut() {
        let mut flat = 0;
        for (k, &i) in idx.iter().enumerate() {
            flat += i * in_strides[perm[k]];
        }
        *o = src[flat];
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < out_shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn concat_tensors(parts: &[&Tensor], axis: usize) -> Tensor {
    let first = parts[0].shape();
    let rank = first.len();
    assert!(axis < rank);
    let mut out_shape = first.to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    for p in parts {
        for (d, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
            assert!(d == axis || a == b, "concat shape mismatch on axis {d}");
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total_axis = out_shape[axis];
    let mut out = vec![0.0; outer * total_axis * inner];
    let mut offset = 0;
    for p in parts {
        let pa = p.shape()[axis];
        let src = p.data();
        for o in 0..outer {
            let dst = (o * total_axis + offset) * inner;
            let from = o * pa * inner;
            out[dst..dst + pa * inner].copy_from_slice(&src[from..from + pa * inner]);
        }
        offset += pa;
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn slice_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = t.shape();
    assert!(axis < shape.len());
    assert!(start + len <= shape[axis], "slice out of range");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = vec![0.0; outer * len * inner];
    let src = t.data();
    for o in 0..outer {
        let from = (o * shape[axis] + start) * inner;
        let to = o * len * inner;
        out[to..to + len * inner].copy_from_slice(&src[from..from + len * inner]);
    }
    Tensor::new(out_shape, out)
}

fn unslice_tensor(g: &Tensor, full_shape: &[usize], axis: usize, start: usize, len: usize) -> Tensor {
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let mut out = vec![0.0; full_shape.iter().product()];
    let src = g.data();
    for o in 0..outer {
        let to = (o * full_shape[axis] + start) * inner;
        let from = o * len * inner;
        out[to..to + len * inner].copy_from_slice(&src[from..from + len * inner]);
    }
    Tensor::new(full_shape.to_vec(), out)
}

fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    let m = ho * wo;
    for ci in 0..c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * m..((ci * kh + ky) * kw + kx + 1) * m];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [f64],
) {
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    let m = ho * wo;
    for ci in 0..c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * m..((ci * kh + ky) * kw + kx + 1) * m];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
    assert_eq!(ws.len(), 4, "conv2d weight must be OIHW");
    let (bsz, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, c_in2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    assert_eq!(c_in, c_in2, "conv2d channel mismatch");
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(wd, kw, stride, pad);
    let m = ho * wo;
    let k = c_in * kh * kw;
    let mut out = vec![0.0; bsz * c_out * m];
    let xd = x.data();
    let wd_ = w.data();
    crate::par::for_each_chunk_mut(&mut out, c_out * m, |i, out_item| {
        let mut cols = vec![0.0; k * m];
        im2col(
            &xd[i * c_in * h * wd..(i + 1) * c_in * h * wd],
            c_in,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            &mut cols,
        );
        matmul_into(wd_, &cols, out_item, c_out, k, m);
    });
    if let Some(bias) = b {
        let bd = bias.data();
        for (i, chunk) in out.chunks_mut(m).enumerate() {
            let add = bd[i % c_out];
            chunk.iter_mut().for_each(|v| *v += add);
        }
    }
    Tensor::new(vec![bsz, c_out, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let xs = x.shape();
    let ws = w.shape();
    let (bsz, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_out, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(wd, kw, stride, pad);
    let m = ho * wo;
    let k = c_in * kh * kw;
    let xd = x.data();
    let wdat = w.data();
    let gd = gout.data();

    let gb = need_b.then(|| {
        let mut acc = vec![0.0; c_out];
        for (i, chunk) in gd.chunks(m).enumerate() {
            acc[i % c_out] += chunk.iter().sum::<f64>();
        }
        Tensor::new(vec![c_out], acc)
    });

    // Per-item partials computed in parallel, reduced in index order.
    let partials: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = crate::par::map_range(bsz, |i| {
        let gitem = &gd[i * c_out * m..(i + 1) * c_out * m];
        let mut cols = vec![0.0; k * m];
        im2col(
            &xd[i * c_in * h * wd..(i + 1) * c_in * h * wd],
            c_in,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            &mut cols,
        );
        let gw_item = need_w.then(|| {
            let mut gw = vec![0.0; c_out * k];
            matmul_transb_into(gitem, &cols, &mut gw, c_out, m, k);
            gw
        });
        let gx_item = need_x.then(|| {
            let mut gcols = vec![0.0; k * m];
            matmul_transa_into(wdat, gitem, &mut gcols, k, c_out, m);
            let mut gx = vec![0.0; c_in * h * wd];
            col2im(&gcols, c_in, h, wd, kh, kw, stride, pad, &mut gx);
            gx
        });
        (gw_item, gx_item)
    });

    let gw = need_w.then(|| {
        let mut acc = vec![0.0; c_out * k];
        for (gw_item, _) in &partials {
            for (a, &v) in acc.iter_mut().zip(gw_item.as_ref().unwrap()) {
                *a += v;
            }
        }
        Tensor::new(ws.to_vec(), acc)
    });
    let gx = need_x.then(|| {
        let mut acc = vec![0.0; bsz * c_in * h * wd];
        for (i, (_, gx_item)) in partials.iter().enumerate() {
            acc[i * c_in * h * wd..(i + 1) * c_in * h * wd]
                .copy_from_slice(gx_item.as_ref().unwrap());
        }
        Tensor::new(xs.to_vec(), acc)
    });
    (gx, gw, gb)
}

fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    gout: &Tensor,
    eps: f64,
    need_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let n = *x.shape().last().unwrap();
    let gv = gamma.data();
    let mut ggamma = vec![0.0; n];
    let mut gbeta = vec![0.0; n];
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let rows = x.len() / n;
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let gr = &gout.data()[r * n..(r + 1) * n];
        let (mean, var) = mean_var(xr);
        let inv = 1.0 / (var + eps).sqrt();
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..n {
            let xhat = (xr[j] - mean) * inv;
            ggamma[j] += gr[j] * xhat;
            gbeta[j] += gr[j];
            let dxhat = gr[j] * gv[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        if let Some(gx) = gx.as_mut() {
            let gxr = &mut gx[r * n..(r + 1) * n];
            let nf = n as f64;
            for j in 0..n {
                let xhat = (xr[j] - mean) * inv;
                let dxhat = gr[j] * gv[j];
                gxr[j] = inv / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (
        gx.map(|g| Tensor::new(x.shape().to_vec(), g)),
        Tensor::new(vec![n], ggamma),
        Tensor::new(vec![n], gbeta),
    )
}

fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    gout: &Tensor,
    groups: usize,
    eps: f64,
    need_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cg = c / groups;
    let gsize = cg * h * w;
    let gv = gamma.data();
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    for bi in 0..b {
        for gi in 0..groups {
            let start = bi * c * h * w + gi * gsize;
            let xr = &x.data()[start..start + gsize];
            let gr = &gout.data()[start..start + gsize];
            let (mean, var) = mean_var(xr);
            let inv = 1.0 / (var + eps).sqrt();
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for k in 0..gsize {
                let ch = gi * cg + k / (h * w);
                let xhat = (xr[k] - mean) * inv;
                ggamma[ch] += gr[k] * xhat;
                gbeta[ch] += gr[k];
                let dxhat = gr[k] * gv[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            if let Some(gx) = gx.as_mut() {
                let gxr = &mut gx[start..start + gsize];
                let nf = gsize as f64;
                for k in 0..gsize {
                    let ch = gi * cg + k / (h * w);
                    let xhat = (xr[k] - mean) * inv;
                    let dxhat = gr[k] * gv[ch];
                    gxr[k] = inv / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
    }
    (
        gx.map(|g| Tensor::new(s.to_vec(), g)),
        Tensor::new(vec![c], ggamma),
        Tensor::new(vec![c], gbeta),
    )
}

/// Finite-difference verification utilities. These evaluate the recorded
/// computation forward-only and never touch the backward sweep, so they are
/// an independent check of it.
pub mod check {
    use super::*;

    /// Central finite difference of `f` w.r.t. entry `idx` of parameter `id`.
    pub fn fd_param<F>(store: &mut ParamStore, id: ParamId, idx: usize, step: f64, mut f: F) -> f64
    where
        F: FnMut(&mut Graph, &ParamStore) -> Var,
    {
        let orig = store.get(id).value.data()[idx];
        let mut eval = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let out = f(&mut g, store);
            g.value(out).item()
        };
        store.get_mut(id).value.data_mut()[idx] = orig + step;
        let up = eval(store);
        store.get_mut(id).value.data_mut()[idx] = orig - step;
        let down = eval(store);
        store.get_mut(id).value.data_mut()[idx] = orig;
        (up - down) / (2.0 * step)
    }

    /// Relative error per the gradient contract: |ad − fd| / (|fd| + 1e−8).
    pub fn rel_err(ad: f64, fd: f64) -> f64 {
        (ad - fd).abs() / (fd.abs() + 1e-8)
    }

    /// Check sampled entries of every trainable parameter against central
    /// finite differences. Returns the worst relative error.
    pub fn grad_check_params<F>(
        store: &mut ParamStore,
        per_tensor: usize,
        step: f64,
        mut f: F,
    ) -> Result<f64>
    where
        F: FnMut(&mut Graph, &ParamStore) -> Var,
    {
        store.zero_grads();
        gradient(store, |g, s| Ok(f(g, s)))?;
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        let mut worst = 0.0f64;
        for id in ids {
            let n = store.get(id).value.len();
            let stride = (n / per_tensor).max(1);
            let picks: Vec<usize> = (0..n).step_by(stride).take(per_tensor).collect();
            for idx in picks {
                let ad = store.get(id).grad.data()[idx];
                let fd = fd_param(store, id, idx, step, &mut f);
                worst = worst.max(rel_err(ad, fd));
            }
        }
        Ok(worst)
    }
}

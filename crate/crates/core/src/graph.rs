//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Values are treated as row-major matrices whose last dimension is the
//! feature axis. Every node records the operation that produced it; the
//! tape doubles as an operation audit (kinds and flop estimates) used to
//! check architectural contracts such as "attention-free".

use crate::error::{Error, Result};
use crate::kernels::{self, dot64};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a smaller row-set is broadcast over a larger one in [`Graph::add_broadcast`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Row `r` of the input uses row `r % rows(y)`.
    Tile,
    /// Row `r` of the input uses row `r / n`.
    Repeat(usize),
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<f32>,
    },
    GatherRows(Var, Vec<usize>),
    Permute(Var, Vec<usize>),
    ConcatTokens {
        parts: Vec<(Var, usize)>,
        batch: usize,
    },
    AddBroadcast(Var, Var, Broadcast),
    Mse(Var, Tensor),
    CosineAlign {
        z: Var,
        target: Tensor,
        lambda: f32,
    },
    NtXent {
        z: Var,
        tau: f32,
    },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::GatherRows(..) => "gather_rows",
            Op::Permute(..) => "permute",
            Op::ConcatTokens { .. } => "concat_tokens",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Mse(..) => "mse_loss",
            Op::CosineAlign { .. } => "cosine_align_loss",
            Op::NtXent { .. } => "nt_xent_loss",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    flops: u64,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// An append-only computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn cols(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

fn rows(t: &Tensor) -> usize {
    let c = cols(t);
    if c == 0 {
        0
    } else {
        t.numel() / c
    }
}

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, flops: u64) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Matmul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) => {
                self.rg(*a) || self.rg(*b)
            }
            Op::AddBroadcast(a, b, _) => self.rg(*a) || self.rg(*b),
            Op::Scale(x, _) | Op::Gelu(x) | Op::GatherRows(x, _) | Op::Permute(x, _) => self.rg(*x),
            Op::Sum(x) | Op::Mse(x, _) => self.rg(*x),
            Op::LayerNorm { x, gain, bias, .. } => self.rg(*x) || self.rg(*gain) || self.rg(*bias),
            Op::Attention { q, k, v, .. } => self.rg(*q) || self.rg(*k) || self.rg(*v),
            Op::ConcatTokens { parts, .. } => parts.iter().any(|(p, _)| self.rg(*p)),
            Op::CosineAlign { z, .. } | Op::NtXent { z, .. } => self.rg(*z),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            flops,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, 0)
    }

    /// A leaf that receives a gradient when `trainable`.
    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        let v = self.push(t, Op::Leaf, 0);
        self.nodes[v.0].requires_grad = trainable;
        v
    }

    /// Names of every non-leaf operation in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.op.name())
            .collect()
    }

    /// Estimated forward floating-point operation count of the whole tape.
    pub fn flops(&self) -> u64 {
        self.nodes.iter().map(|n| n.flops).sum()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 {
            return Err(Error::invalid(format!("matmul rhs must be 2-D, got {:?}", bv.shape())));
        }
        let (m, k, n) = (rows(av), cols(av), bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(Error::invalid(format!(
                "matmul inner dims {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = kernels::gemm(av.data(), bv.data(), m, k, n);
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b), 2 * (m * k * n) as u64))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = cols(xv);
        if bv.numel() != n {
            return Err(Error::invalid(format!(
                "bias of {} elements for width {}",
                bv.numel(),
                n
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let fl = out.numel() as u64;
        Ok(self.push(out, Op::AddBias(x, bias), fl))
    }

    /// `x · w + b` for `x[m×k]`, `w[k×n]`, `b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let fl = out.numel() as u64;
        Ok(self.push(out, Op::Add(a, b), fl))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let fl = out.numel() as u64;
        Ok(self.push(out, Op::Mul(a, b), fl))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        let fl = out.numel() as u64;
        self.push(out, Op::Scale(x, s), fl)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        let fl = 8 * out.numel() as u64;
        self.push(out, Op::Gelu(x), fl)
    }

    /// Layer normalization over the last dimension with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = cols(xv);
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != n || b.numel() != n {
            return Err(Error::invalid("layer norm parameter width mismatch"));
        }
        let m = rows(xv);
        let mut xhat = vec![0.0f32; m * n];
        let mut rstd = vec![0.0f32; m];
        let mut out = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let rs = (1.0 / (var + LN_EPS as f64).sqrt()) as f32;
            rstd[r] = rs;
            let mean = mean as f32;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let t = Tensor::from_vec(&shape, out)?;
        let fl = 8 * (m * n) as u64;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            fl,
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `[batch·tokens, dim]`; attention runs within each
    /// sample, heads split the feature axis into contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        qv.expect_same_shape(kv)?;
        qv.expect_same_shape(vv)?;
        let d = cols(qv);
        let total = rows(qv);
        if batch == 0 || total % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "attention shape {:?} with batch {} heads {}",
                qv.shape(),
                batch,
                heads
            )));
        }
        let t = total / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let blocks = kernels::map_collect(batch, |b| {
            let base = b * t * d;
            let mut out = vec![0.0f32; t * d];
            let mut probs = vec![0.0f32; heads * t * t];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qd[base + i * d + off..base + i * d + off + dh];
                    let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let mut mx = f32::NEG_INFINITY;
                    for j in 0..t {
                        let kj = &kd[base + j * d + off..base + j * d + off + dh];
                        let s: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                        p[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0f32;
                    for pj in p.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    let inv = 1.0 / z;
                    for pj in p.iter_mut() {
                        *pj *= inv;
                    }
                    let o = &mut out[i * d + off..i * d + off + dh];
                    for j in 0..t {
                        let vj = &vd[base + j * d + off..base + j * d + off + dh];
                        let pj = p[j];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += pj * vv;
                        }
                    }
                }
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(total * d);
        let mut probs = Vec::with_capacity(batch * heads * t * t);
        for (o, p) in blocks {
            out.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let shape = qv.shape().to_vec();
        let fl = 4 * (batch * t * t * d) as u64;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens: t,
                heads,
                probs,
            },
            fl,
        ))
    }

    /// Gather leading rows (any row may repeat).
    pub fn gather_rows(&mut self, x: Var, rows_idx: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.dim0();
        if let Some(&bad) = rows_idx.iter().find(|&&r| r >= n) {
            return Err(Error::invalid(format!("row {} out of range for {} rows", bad, n)));
        }
        let out = xv.select_rows(&rows_idx);
        Ok(self.push(out, Op::GatherRows(x, rows_idx), 0))
    }

    /// Element permutation/gather: `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn permute(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        if index.iter().any(|&i| i >= n) {
            return Err(Error::invalid("permute index out of range"));
        }
        let data: Vec<f32> = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Permute(x, index), 0))
    }

    /// Per-sample concatenation along the token axis.
    ///
    /// Each part holds `batch·tokens_p` rows; the output holds, for every
    /// sample, the part-0 tokens followed by the part-1 tokens and so on.
    pub fn concat_tokens(&mut self, parts: &[(Var, usize)], batch: usize) -> Result<Var> {
        let d = parts
            .first()
            .map(|(p, _)| cols(self.value(*p)))
            .ok_or_else(|| Error::invalid("concat of zero parts"))?;
        for (p, t) in parts {
            let v = self.value(*p);
            if cols(v) != d || rows(v) != batch * t {
                return Err(Error::invalid(format!(
                    "concat part {:?} does not hold {} x {} tokens of width {}",
                    v.shape(),
                    batch,
                    t,
                    d
                )));
            }
        }
        let total: usize = parts.iter().map(|(_, t)| t).sum();
        let mut out = Vec::with_capacity(batch * total * d);
        for b in 0..batch {
            for (p, t) in parts {
                let src = self.value(*p).data();
                out.extend_from_slice(&src[b * t * d..(b + 1) * t * d]);
            }
        }
        let value = Tensor::from_vec(&[batch * total, d], out)?;
        Ok(self.push(
            value,
            Op::ConcatTokens {
                parts: parts.to_vec(),
                batch,
            },
            0,
        ))
    }

    pub fn add_broadcast(&mut self, x: Var, y: Var, mode: Broadcast) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let d = cols(xv);
        let (rx, ry) = (rows(xv), rows(yv));
        let ok = cols(yv) == d
            && match mode {
                Broadcast::Tile => ry > 0 && rx % ry == 0,
                Broadcast::Repeat(n) => n > 0 && rx == ry * n,
            };
        if !ok {
            return Err(Error::invalid(format!(
                "cannot broadcast {:?} onto {:?} with {:?}",
                yv.shape(),
                xv.shape(),
                mode
            )));
        }
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
            let src = match mode {
                Broadcast::Tile => r % ry,
                Broadcast::Repeat(n) => r / n,
            };
            for (o, &v) in row.iter_mut().zip(&yv.data()[src * d..(src + 1) * d]) {
                *o += v;
            }
        }
        let fl = out.numel() as u64;
        Ok(self.push(out, Op::AddBroadcast(x, y, mode), fl))
    }

    /// Mean of squared differences against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_same_shape(target)?;
        let n = pv.numel().max(1);
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        let out = Tensor::scalar((s / n as f64) as f32);
        Ok(self.push(out, Op::Mse(pred, target.clone()), 3 * n as u64))
    }

    /// `lambda · mean_i (1 − cos(z_i, target_i))`; the target is constant.
    pub fn cosine_align_loss(&mut self, z: Var, target: &Tensor, lambda: f32) -> Result<Var> {
        let zv = self.value(z);
        zv.expect_same_shape(target)?;
        let d = cols(zv);
        let b = rows(zv);
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut acc = 0.0f64;
        for i in 0..b {
            let zi = &zv.data()[i * d..(i + 1) * d];
            let fi = &target.data()[i * d..(i + 1) * d];
            acc += 1.0 - cosine64(zi, fi, i)?;
        }
        let out = Tensor::scalar((lambda as f64 * acc / b as f64) as f32);
        Ok(self.push(
            out,
            Op::CosineAlign {
                z,
                target: target.clone(),
                lambda,
            },
            (6 * b * d) as u64,
        ))
    }

    /// Symmetric cross-view contrastive loss over `[2B, D]` embeddings.
    ///
    /// Rows `0..B` are the first views and rows `B..2B` the second views of
    /// the same images. For every anchor in one view the candidates are all
    /// rows of the other view; the positive is the same-image row.
    pub fn nt_xent_loss(&mut self, z: Var, tau: f32) -> Result<Var> {
        let zv = self.value(z);
        let n = rows(zv);
        if n < 4 || n % 2 != 0 {
            return Err(Error::invalid("contrastive loss needs at least 2 image pairs"));
        }
        if !(tau > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let parts = nt_xent_parts(zv, tau)?;
        let out = Tensor::scalar(parts.loss as f32);
        let b = n / 2;
        let fl = (2 * b * b * cols(zv) + 10 * b * b) as u64;
        Ok(self.push(out, Op::NtXent { z, tau }, fl))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let fl = self.value(x).numel() as u64;
        self.push(Tensor::scalar(s as f32), Op::Sum(x), fl)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid("backward needs a scalar output"));
        }
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Vec<f32>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::from_vec(&shape, contrib).expect("gradient shape"));
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (rows(av), cols(av), bv.shape()[1]);
                if self.rg(*a) {
                    let da = kernels::gemm_a_bt(gd, bv.data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let db = kernels::gemm_at_b(av.data(), gd, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    self.accumulate(grads, *bias, column_sums(gd, n));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, gd.iter().map(|g| g * s).collect());
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &v)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let m = rstd.len();
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; m * n];
                    for r in 0..m {
                        let gr = &gd[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0f32;
                        let mut mean_dh = 0.0f32;
                        for j in 0..n {
                            let dxh = gr[j] * gv[j];
                            mean_d += dxh;
                            mean_dh += dxh * hr[j];
                        }
                        mean_d /= n as f32;
                        mean_dh /= n as f32;
                        for j in 0..n {
                            let dxh = gr[j] * gv[j];
                            dx[r * n + j] = rstd[r] * (dxh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*gain) {
                    let mut dg = vec![0.0f32; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.rg(*bias) {
                    self.accumulate(grads, *bias, column_sums(gd, n));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            } => {
                let (batch, t, heads) = (*batch, *tokens, *heads);
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let d = cols(self.value(*q));
                let dh = d / heads;
                let scale = 1.0 / (dh as f32).sqrt();
                let blocks = kernels::map_collect(batch, |b| {
                    let base = b * t * d;
                    let mut dq = vec![0.0f32; t * d];
                    let mut dk = vec![0.0f32; t * d];
                    let mut dv = vec![0.0f32; t * d];
                    let mut dp = vec![0.0f32; t];
                    for h in 0..heads {
                        let off = h * dh;
                        let pb = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                        for i in 0..t {
                            let go = &gd[base + i * d + off..base + i * d + off + dh];
                            let p = &pb[i * t..(i + 1) * t];
                            let mut acc = 0.0f32;
                            for j in 0..t {
                                let vj = &vd[base + j * d + off..base + j * d + off + dh];
                                let s: f32 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dp[j] = s;
                                acc += s * p[j];
                                let dvj = &mut dv[j * d + off..j * d + off + dh];
                                for (x, &y) in dvj.iter_mut().zip(go) {
                                    *x += p[j] * y;
                                }
                            }
                            let qi = &qd[base + i * d + off..base + i * d + off + dh];
                            for j in 0..t {
                                let ds = p[j] * (dp[j] - acc) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kd[base + j * d + off..base + j * d + off + dh];
                                let dqi = &mut dq[i * d + off..i * d + off + dh];
                                for (x, &y) in dqi.iter_mut().zip(kj) {
                                    *x += ds * y;
                                }
                                let dkj = &mut dk[j * d + off..j * d + off + dh];
                                for (x, &y) in dkj.iter_mut().zip(qi) {
                                    *x += ds * y;
                                }
                            }
                        }
                    }
                    (dq, dk, dv)
                });
                let mut dq = Vec::with_capacity(batch * t * d);
                let mut dk = Vec::with_capacity(batch * t * d);
                let mut dv = Vec::with_capacity(batch * t * d);
                for (a, b, c) in blocks {
                    dq.extend_from_slice(&a);
                    dk.extend_from_slice(&b);
                    dv.extend_from_slice(&c);
                }
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::GatherRows(x, rows_idx) => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let w = xv.row_len();
                    let mut dx = vec![0.0f32; xv.numel()];
                    for (i, &r) in rows_idx.iter().enumerate() {
                        for j in 0..w {
                            dx[r * w + j] += gd[i * w + j];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Permute(x, index) => {
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; self.value(*x).numel()];
                    for (i, &src) in index.iter().enumerate() {
                        dx[src] += gd[i];
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::ConcatTokens { parts, batch } => {
                let d = cols(g);
                let total: usize = parts.iter().map(|(_, t)| t).sum();
                let mut offset = 0;
                for (p, t) in parts {
                    if self.rg(*p) {
                        let mut dp = Vec::with_capacity(batch * t * d);
                        for b in 0..*batch {
                            let start = (b * total + offset) * d;
                            dp.extend_from_slice(&gd[start..start + t * d]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += t;
                }
            }
            Op::AddBroadcast(x, y, mode) => {
                self.accumulate(grads, *x, gd.to_vec());
                if self.rg(*y) {
                    let yv = self.value(*y);
                    let d = cols(yv);
                    let ry = rows(yv);
                    let mut dy = vec![0.0f32; yv.numel()];
                    for (r, row) in gd.chunks(d).enumerate() {
                        let dst = match mode {
                            Broadcast::Tile => r % ry,
                            Broadcast::Repeat(n) => r / n,
                        };
                        for (a, &b) in dy[dst * d..(dst + 1) * d].iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *y, dy);
                }
            }
            Op::Mse(pred, target) => {
                let pv = self.value(*pred).data();
                let n = pv.len().max(1) as f32;
                let s = 2.0 * gd[0] / n;
                let dp = pv.iter().zip(target.data()).map(|(a, b)| s * (a - b)).collect();
                self.accumulate(grads, *pred, dp);
            }
            Op::CosineAlign { z, target, lambda } => {
                let zv = self.value(*z);
                let d = cols(zv);
                let b = rows(zv);
                let s = gd[0] as f64 * *lambda as f64 / b as f64;
                let mut dz = vec![0.0f32; zv.numel()];
                for i in 0..b {
                    let zi = &zv.data()[i * d..(i + 1) * d];
                    let fi = &target.data()[i * d..(i + 1) * d];
                    let nz = dot64(zi, zi).sqrt();
                    let nf = dot64(fi, fi).sqrt();
                    let c = dot64(zi, fi) / (nz * nf);
                    for j in 0..d {
                        let dc = fi[j] as f64 / (nz * nf) - c * zi[j] as f64 / (nz * nz);
                        dz[i * d + j] = (-s * dc) as f32;
                    }
                }
                self.accumulate(grads, *z, dz);
            }
            Op::NtXent { z, tau } => {
                let parts = nt_xent_parts(self.value(*z), *tau)?;
                let s = gd[0] as f64;
                self.accumulate(
                    grads,
                    *z,
                    parts.grad.iter().map(|&v| (v * s) as f32).collect(),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
        }
        Ok(())
    }
}

fn column_sums(g: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    for row in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn cosine64(a: &[f32], b: &[f32], row: usize) -> Result<f64> {
    let na = dot64(a, a).sqrt();
    let nb = dot64(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerical(format!("zero-norm row {} in cosine similarity", row)));
    }
    Ok(dot64(a, b) / (na * nb))
}

struct NtXentParts {
    loss: f64,
    grad: Vec<f64>,
}

/// Loss value and gradient of the symmetric cross-view contrastive loss.
fn nt_xent_parts(z: &Tensor, tau: f32) -> Result<NtXentParts> {
    let d = cols(z);
    let n = rows(z);
    let b = n / 2;
    let tau = tau as f64;
    let mut unit = vec![0.0f64; n * d];
    let mut norms = vec![0.0f64; n];
    for i in 0..n {
        let r = &z.data()[i * d..(i + 1) * d];
        let nr = dot64(r, r).sqrt();
        if nr == 0.0 {
            return Err(Error::Numerical(format!("zero-norm embedding row {}", i)));
        }
        norms[i] = nr;
        for j in 0..d {
            unit[i * d + j] = r[j] as f64 / nr;
        }
    }
    // sim[i][j] = cos(view1_i, view2_j)
    let mut sim = vec![0.0f64; b * b];
    for i in 0..b {
        for j in 0..b {
            let a = &unit[i * d..(i + 1) * d];
            let c = &unit[(b + j) * d..(b + j + 1) * d];
            sim[i * b + j] = a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / tau;
        }
    }
    let mut loss = 0.0f64;
    // dL/dlogit, both directions accumulated into one b×b matrix.
    let mut dl = vec![0.0f64; b * b];
    let norm = 1.0 / (2.0 * b as f64);
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| sim[i * b + j]).collect();
        let (lse, sm) = log_softmax(&row);
        loss += lse - sim[i * b + i];
        for j in 0..b {
            dl[i * b + j] += norm * (sm[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..b {
        let col: Vec<f64> = (0..b).map(|i| sim[i * b + j]).collect();
        let (lse, sm) = log_softmax(&col);
        loss += lse - sim[j * b + j];
        for i in 0..b {
            dl[i * b + j] += norm * (sm[i] - if i == j { 1.0 } else { 0.0 });
        }
    }
    loss *= norm;
    // d/dunit
    let mut du = vec![0.0f64; n * d];
    for i in 0..b {
        for j in 0..b {
            let w = dl[i * b + j] / tau;
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                du[i * d + k] += w * unit[(b + j) * d + k];
                du[(b + j) * d + k] += w * unit[i * d + k];
            }
        }
    }
    let mut grad = vec![0.0f64; n * d];
    for i in 0..n {
        let u = &unit[i * d..(i + 1) * d];
        let g = &du[i * d..(i + 1) * d];
        let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..d {
            grad[i * d + k] = (g[k] - u[k] * proj) / norms[i];
        }
    }
    Ok(NtXentParts { loss, grad })
}

fn log_softmax(x: &[f64]) -> (f64, Vec<f64>) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = x.iter().map(|v| (v - mx).exp()).sum();
    let lse = mx + z.ln();
    (lse, x.iter().map(|v| (v - lse).exp()).collect())
}

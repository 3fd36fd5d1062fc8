use std::sync::Arc;

use super::{Node, Tensor};
use crate::error::{Error, Result};

/// Gather index that reads as zero (used for convolution padding).
pub const PAD_INDEX: usize = usize::MAX;

/// Norm floor below which cosine similarity is undefined.
pub const COSINE_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddBias(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Gather {
        src: Tensor,
        index: Arc<Vec<usize>>,
    },
    Concat {
        parts: Vec<Tensor>,
        axis: usize,
    },
    Sum(Tensor),
    SumAxis {
        src: Tensor,
        axis: usize,
    },
    Softmax {
        src: Tensor,
        axis: usize,
    },
    Silu(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    RotatePairs {
        src: Tensor,
        cos: Arc<Vec<f64>>,
        sin: Arc<Vec<f64>>,
    },
    Cosine {
        a: Tensor,
        b: Tensor,
        dot: f64,
        norm_a: f64,
        norm_b: f64,
    },
    Attention {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        n_heads: usize,
        scale: f64,
        /// Softmax weights, `[head][query][key]`.
        probs: Arc<Vec<f64>>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::Silu(..) => "silu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::RotatePairs { .. } => "rotate_pairs",
            Op::Cosine { .. } => "cosine_similarity",
            Op::Attention { .. } => "attention",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _) | Op::Transpose(a) | Op::Reshape(a) | Op::Sum(a) | Op::Silu(a) => vec![a],
            Op::Gather { src, .. }
            | Op::SumAxis { src, .. }
            | Op::Softmax { src, .. }
            | Op::RotatePairs { src, .. } => vec![src],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Conv2d {
                input,
                weight,
                bias,
            } => vec![input, weight, bias],
            Op::Cosine { a, b, .. } => vec![a, b],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
        }
    }

    /// Gradient contributions to each parent given the output gradient `g`.
    pub(crate) fn backward(&self, out: &Node, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
        match self {
            Op::Add(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.to_vec())],
            Op::Sub(a, b) => vec![(a.clone(), g.to_vec()), (b.clone(), g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Scale(a, s) => vec![(a.clone(), g.iter().map(|v| v * s).collect())],
            Op::AddBias(x, b) => {
                let n = b.numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                }
                vec![(x.clone(), g.to_vec()), (b.clone(), gb)]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut out = Vec::with_capacity(2);
                if a.requires_grad() {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    let bd = b.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((a.clone(), ga));
                }
                if b.requires_grad() {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    let ad = a.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            gb[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(acc, v)| *acc += av * v);
                        }
                    }
                    out.push((b.clone(), gb));
                }
                out
            }
            Op::Transpose(a) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                // g has shape [n, m]
                vec![(a.clone(), transpose_raw(g, n, m))]
            }
            Op::Reshape(a) => vec![(a.clone(), g.to_vec())],
            Op::Gather { src, index } => {
                let mut gs = vec![0.0; src.numel()];
                for (&ix, v) in index.iter().zip(g) {
                    if ix != PAD_INDEX {
                        gs[ix] += v;
                    }
                }
                vec![(src.clone(), gs)]
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out.shape[..*axis].iter().product();
                let total_inner: usize = out.shape[*axis..].iter().product();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let inner: usize = p.shape()[*axis..].iter().product();
                    let mut gp = Vec::with_capacity(p.numel());
                    for o in 0..outer {
                        let start = o * total_inner + offset;
                        gp.extend_from_slice(&g[start..start + inner]);
                    }
                    offset += inner;
                    res.push((p.clone(), gp));
                }
                res
            }
            Op::Sum(a) => vec![(a.clone(), vec![g[0]; a.numel()])],
            Op::SumAxis { src, axis } => {
                let (outer, len, inner) = split_axis(src.shape(), *axis);
                let mut gs = vec![0.0; src.numel()];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gs[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![(src.clone(), gs)]
            }
            Op::Softmax { src, axis } => {
                let (outer, len, inner) = split_axis(src.shape(), *axis);
                let y = &out.data;
                let mut gs = vec![0.0; src.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gs[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                vec![(src.clone(), gs)]
            }
            Op::Silu(a) => {
                let gs = a
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, gv)| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                vec![(a.clone(), gs)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = gamma.numel();
                let rows = x.numel() / d;
                let gam = gamma.data();
                let mut gx = vec![0.0; x.numel()];
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * xh[j];
                        gbeta[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let scale = inv_std[r] / d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        gx[r * d + j] = scale * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                vec![(x.clone(), gx), (gamma.clone(), gg), (beta.clone(), gbeta)]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => conv2d_backward(input, weight, bias, g),
            Op::RotatePairs { src, cos, sin } => {
                let mut gs = vec![0.0; src.numel()];
                for (p, (c, s)) in cos.iter().zip(sin.iter()).enumerate() {
                    let (g0, g1) = (g[2 * p], g[2 * p + 1]);
                    gs[2 * p] = g0 * c + g1 * s;
                    gs[2 * p + 1] = -g0 * s + g1 * c;
                }
                vec![(src.clone(), gs)]
            }
            Op::Cosine {
                a,
                b,
                dot,
                norm_a,
                norm_b,
            } => {
                let go = g[0];
                let cos = dot / (norm_a * norm_b);
                let inv = 1.0 / (norm_a * norm_b);
                let ga = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| go * (y * inv - cos * x / (norm_a * norm_a)))
                    .collect();
                let gb = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| go * (x * inv - cos * y / (norm_b * norm_b)))
                    .collect();
                vec![(a.clone(), ga), (b.clone(), gb)]
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                scale,
                probs,
            } => attention_backward(q, k, v, *n_heads, *scale, probs, g),
        }
    }
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    scale: f64,
    probs: &[f64],
    g: &[f64],
) -> Vec<(Tensor, Vec<f64>)> {
    let (n_q, dim) = (q.shape()[0], q.shape()[1]);
    let n_k = k.shape()[0];
    let hd = dim / n_heads;
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let mut ds = vec![0.0; n_k];
    for h in 0..n_heads {
        let off = h * hd;
        for i in 0..n_q {
            let p = &probs[(h * n_q + i) * n_k..(h * n_q + i + 1) * n_k];
            let gi = &g[i * dim + off..i * dim + off + hd];
            let mut dot = 0.0;
            for j in 0..n_k {
                let vj = &vd[j * dim + off..j * dim + off + hd];
                let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                ds[j] = dp;
                dot += p[j] * dp;
                if p[j] != 0.0 {
                    gv[j * dim + off..j * dim + off + hd]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(acc, gv)| *acc += p[j] * gv);
                }
            }
            for j in 0..n_k {
                let dsj = p[j] * (ds[j] - dot) * scale;
                if dsj == 0.0 {
                    continue;
                }
                for d in 0..hd {
                    gq[i * dim + off + d] += dsj * kd[j * dim + off + d];
                    gk[j * dim + off + d] += dsj * qd[i * dim + off + d];
                }
            }
        }
    }
    vec![(q.clone(), gq), (k.clone(), gk), (v.clone(), gv)]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn transpose_raw(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn conv_dims(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let bad = || Error::Dimension {
        op: "conv2d",
        lhs: input.shape().to_vec(),
        rhs: weight.shape().to_vec(),
    };
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(bad());
    }
    let (n, c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (c_out, wc_in, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    if wc_in != c_in || kh != kw || kh % 2 == 0 {
        return Err(bad());
    }
    if bias.shape() != [c_out] {
        return Err(Error::Dimension {
            op: "conv2d bias",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    Ok((n, c_in, h, w, c_out, kh))
}

fn conv2d_backward(input: &Tensor, weight: &Tensor, bias: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    let (n, c_in, h, w, c_out, k) = conv_dims(input, weight, bias).expect("validated in forward");
    let pad = (k / 2) as isize;
    let x = input.data();
    let wt = weight.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; c_out];
    for b in 0..n {
        for co in 0..c_out {
            for oy in 0..h {
                for ox in 0..w {
                    let gv = g[((b * c_out + co) * h + oy) * w + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    gb[co] += gv;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = oy as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox as isize + kx as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * c_in + ci) * h + iy as usize) * w + ix as usize;
                                let wi = ((co * c_in + ci) * k + ky) * k + kx;
                                gw[wi] += gv * x[xi];
                                gx[xi] += gv * wt[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    vec![(input.clone(), gx), (weight.clone(), gw), (bias.clone(), gb)]
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * s).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    /// Adds `bias` (shape `[n]`) to every length-`n` row of the trailing axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = bias.numel();
        if n == 0 || self.shape().last() != Some(&n) {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data();
        let data = self
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::AddBias(self.clone(), bias.clone())))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let (a, b) = (self.data(), other.data());
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                crow.iter_mut()
                    .zip(&b[p * n..(p + 1) * n])
                    .for_each(|(acc, bv)| *acc += av * bv);
            }
        }
        Ok(Tensor::from_op(c, vec![m, n], Op::MatMul(self.clone(), other.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", self.shape())));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let data = transpose_raw(self.data(), m, n);
        Ok(Tensor::from_op(data, vec![n, m], Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(self.from_shared(shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// `out[i] = self[index[i]]` over the flat buffer; [`PAD_INDEX`] reads 0.
    pub fn gather(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "gather of {} indices into shape {:?}",
                index.len(),
                shape
            )));
        }
        let src = self.data();
        let mut data = Vec::with_capacity(index.len());
        for &ix in index.iter() {
            if ix == PAD_INDEX {
                data.push(0.0);
            } else if ix < src.len() {
                data.push(src[ix]);
            } else {
                return Err(Error::Shape(format!("gather index {ix} out of range {}", src.len())));
            }
        }
        Ok(Tensor::from_op(data, shape.to_vec(), Op::Gather { src: self.clone(), index }))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if perm.len() != rank || sorted != (0..rank).collect::<Vec<_>>() {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let in_shape = self.shape();
        let mut in_strides = vec![1; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let mut index = Vec::with_capacity(self.numel());
        let mut coord = vec![0usize; rank];
        for _ in 0..self.numel() {
            index.push(coord.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum());
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                if coord[ax] < out_shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        self.gather(Arc::new(index), &out_shape)
    }

    /// Rows `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(&rows)
    }

    /// Rows by index (repeats allowed) of a rank-2 tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Shape(format!("select_rows needs rank 2, got {:?}", self.shape())));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        if let Some(&r) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!("row {r} out of range for {m} rows")));
        }
        let index: Vec<usize> = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(Arc::new(index), &[rows.len(), n])
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() != 2 || start + len > self.shape()[1] {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                self.shape()
            )));
        }
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let index: Vec<usize> = (0..m).flat_map(|r| (start..start + len).map(move |c| r * n + c)).collect();
        self.gather(Arc::new(index), &[m, len])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::Shape(format!("concat axis {axis} for rank {}", first.rank())));
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            out_shape[axis] += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let inner: usize = p.shape()[axis..].iter().product();
                data.extend_from_slice(&p.data()[o * inner..(o + 1) * inner]);
            }
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], Vec::new(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!("axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += x[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(data, shape, Op::SumAxis { src: self.clone(), axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Shape(format!("axis {axis} for shape {:?}", self.shape())))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len.max(1) as f64))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Shape(format!("softmax axis {axis} for shape {:?}", self.shape())));
        }
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (x[at(l)] - max).exp();
                    data[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    data[at(l)] /= z;
                }
            }
        }
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Softmax { src: self.clone(), axis }))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Silu(self.clone()))
    }

    /// Normalizes over the trailing axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let d = gamma.numel();
        if self.shape().last() != Some(&d) || beta.numel() != d {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (gam, bet) = (gamma.data(), beta.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                data[r * d + j] = h * gam[j] + bet[j];
            }
        }
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Same-padded stride-1 convolution. Input `[n, c_in, h, w]`, weight
    /// `[c_out, c_in, k, k]` with odd `k`, bias `[c_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (n, c_in, h, w, c_out, k) = conv_dims(self, weight, bias)?;
        let pad = (k / 2) as isize;
        let x = self.data();
        let wt = weight.data();
        let b = bias.data();
        let mut data = vec![0.0; n * c_out * h * w];
        for bi in 0..n {
            for co in 0..c_out {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = b[co];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                let iy = oy as isize + ky as isize - pad;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = ox as isize + kx as isize - pad;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c_in + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((co * c_in + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        data[((bi * c_out + co) * h + oy) * w + ox] = acc;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            data,
            vec![n, c_out, h, w],
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
            },
        ))
    }

    /// Multi-head scaled dot-product attention of `self` (`[n_q × dim]`) over
    /// `k`/`v` (`[n_k × dim]`), heads taken as contiguous column blocks.
    /// `mask` is an optional additive `[n_q × n_k]` mask (`-inf` hides a key).
    /// Returns the output and the weights, `[head][query][key]`.
    pub fn multi_head_attention(
        &self,
        k: &Tensor,
        v: &Tensor,
        n_heads: usize,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Arc<Vec<f64>>)> {
        let dims_err = || Error::Dimension {
            op: "multi_head_attention",
            lhs: self.shape().to_vec(),
            rhs: k.shape().to_vec(),
        };
        if self.rank() != 2 || k.rank() != 2 || k.shape() != v.shape() || self.shape()[1] != k.shape()[1] {
            return Err(dims_err());
        }
        let (n_q, dim) = (self.shape()[0], self.shape()[1]);
        let n_k = k.shape()[0];
        if n_heads == 0 || dim % n_heads != 0 || n_k == 0 {
            return Err(dims_err());
        }
        if let Some(m) = mask {
            if m.shape() != [n_q, n_k] {
                return Err(dims_err());
            }
        }
        let hd = dim / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (self.data(), k.data(), v.data());
        let md = mask.map(|m| m.data());
        let mut probs = vec![0.0; n_heads * n_q * n_k];
        let mut out = vec![0.0; n_q * dim];
        // Per head, K is stored transposed ([hd × n_k]) so logits accumulate
        // as contiguous axpys over keys, and V contiguously ([n_k × hd]).
        let mut kt = vec![0.0; hd * n_k];
        let mut vh = vec![0.0; n_k * hd];
        for h in 0..n_heads {
            let off = h * hd;
            for j in 0..n_k {
                for d in 0..hd {
                    kt[d * n_k + j] = kd[j * dim + off + d];
                }
                vh[j * hd..(j + 1) * hd].copy_from_slice(&vd[j * dim + off..j * dim + off + hd]);
            }
            for i in 0..n_q {
                let p = &mut probs[(h * n_q + i) * n_k..(h * n_q + i + 1) * n_k];
                for (d, kd_row) in kt.chunks_exact(n_k).enumerate() {
                    let qv = qd[i * dim + off + d];
                    p.iter_mut().zip(kd_row).for_each(|(pj, kv)| *pj += qv * kv);
                }
                let mut max = f64::NEG_INFINITY;
                let mut nan = false;
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj *= scale;
                    if let Some(md) = md {
                        *pj += md[i * n_k + j];
                    }
                    nan |= pj.is_nan();
                    max = max.max(*pj);
                }
                if nan {
                    // Propagate so callers' finiteness checks see it.
                    p.fill(f64::NAN);
                    out[i * dim + off..i * dim + off + hd].fill(f64::NAN);
                    continue;
                }
                if max == f64::NEG_INFINITY {
                    return Err(Error::Contract(format!("attention row {i} has every key masked")));
                }
                let mut z = 0.0;
                for pj in p.iter_mut() {
                    *pj = if *pj == f64::NEG_INFINITY { 0.0 } else { (*pj - max).exp() };
                    z += *pj;
                }
                let orow = &mut out[i * dim + off..i * dim + off + hd];
                for (pj, vj) in p.iter_mut().zip(vh.chunks_exact(hd)) {
                    *pj /= z;
                    if *pj == 0.0 {
                        continue;
                    }
                    orow.iter_mut().zip(vj).for_each(|(acc, vv)| *acc += *pj * vv);
                }
            }
        }
        let probs = Arc::new(probs);
        let t = Tensor::from_op(
            out,
            vec![n_q, dim],
            Op::Attention {
                q: self.clone(),
                k: k.clone(),
                v: v.clone(),
                n_heads,
                scale,
                probs: Arc::clone(&probs),
            },
        );
        Ok((t, probs))
    }

    /// Rotates consecutive channel pairs `(2p, 2p+1)` of the flat buffer by
    /// the angle whose cosine/sine are `cos[p]`/`sin[p]`.
    pub fn rotate_pairs(&self, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>>) -> Result<Tensor> {
        if !self.numel().is_multiple_of(2) || cos.len() * 2 != self.numel() || sin.len() != cos.len() {
            return Err(Error::Shape(format!(
                "rotate_pairs: {} angles for {} elements",
                cos.len(),
                self.numel()
            )));
        }
        let x = self.data();
        let mut data = vec![0.0; x.len()];
        for (p, (c, s)) in cos.iter().zip(sin.iter()).enumerate() {
            let (x0, x1) = (x[2 * p], x[2 * p + 1]);
            data[2 * p] = x0 * c - x1 * s;
            data[2 * p + 1] = x0 * s + x1 * c;
        }
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::RotatePairs {
                src: self.clone(),
                cos,
                sin,
            },
        ))
    }

    /// `⟨a,b⟩ / (‖a‖‖b‖)` over all elements, as a rank-0 tensor.
    pub fn cosine_similarity(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("cosine_similarity", self, other)?;
        let dot: f64 = self.data().iter().zip(other.data()).map(|(a, b)| a * b).sum();
        let norm_a = self.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let norm_b = other.data().iter().map(|b| b * b).sum::<f64>().sqrt();
        for norm in [norm_a, norm_b] {
            if !norm.is_finite() {
                return Err(Error::NonFinite {
                    what: "cosine similarity input".into(),
                    stats: format!("norm {norm}"),
                });
            }
            if norm < COSINE_EPS {
                return Err(Error::DegenerateNorm { norm, eps: COSINE_EPS });
            }
        }
        let cos = (dot / (norm_a * norm_b)).clamp(-1.0, 1.0);
        Ok(Tensor::from_op(
            vec![cos],
            Vec::new(),
            Op::Cosine {
                a: self.clone(),
                b: other.clone(),
                dot,
                norm_a,
                norm_b,
            },
        ))
    }
}

//! Differentiable operations on [`Tensor`].
//!
//! Elementwise binary ops accept equal shapes, or one operand of shape `[]`
//! (scalar) which is broadcast. Every other shape disagreement is an error.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{LabError, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    AddConst(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Reshape(Tensor),
    Concat(Vec<Tensor>, usize),
    Slice {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    IndexSelect(Tensor, Vec<usize>),
    Softmax {
        input: Tensor,
        axis: usize,
        out: Vec<f64>,
    },
    LogSoftmax {
        input: Tensor,
        axis: usize,
        probs: Vec<f64>,
    },
    LayerNorm {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Tensor),
    Mean(Tensor, usize),
    Sum(Tensor),
    L2Norm(Tensor, f64),
    AddBias(Tensor, Tensor),
    MaskedFill(Tensor, Vec<bool>),
}

/// `(outer, dim, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn bcast(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Reduces a full-size gradient onto an operand that may have been broadcast.
fn reduce_to(g: Vec<f64>, operand: &Tensor) -> Vec<f64> {
    if operand.numel() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | AddBias(a, b) => {
                vec![a, b]
            }
            Scale(a, _)
            | AddConst(a)
            | Transpose(a)
            | Reshape(a)
            | IndexSelect(a, _)
            | Gelu(a)
            | Mean(a, _)
            | Sum(a)
            | L2Norm(a, _)
            | MaskedFill(a, _) => vec![a],
            Slice { input, .. } | Softmax { input, .. } | LogSoftmax { input, .. } => vec![input],
            LayerNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Concat(parts, _) => parts.iter().collect(),
        }
    }

    /// Gradient contributions for every parent that tracks gradients.
    pub(crate) fn backward(&self, g: &[f64], out_shape: &[usize]) -> Vec<(Tensor, Vec<f64>)> {
        let mut out: Vec<(Tensor, Vec<f64>)> = Vec::new();
        let mut emit = |t: &Tensor, f: &dyn Fn() -> Vec<f64>| {
            if t.requires_grad() {
                out.push((t.clone(), f()));
            }
        };
        match self {
            Op::Add(a, b) => {
                emit(a, &|| reduce_to(g.to_vec(), a));
                emit(b, &|| reduce_to(g.to_vec(), b));
            }
            Op::Sub(a, b) => {
                emit(a, &|| reduce_to(g.to_vec(), a));
                emit(b, &|| reduce_to(g.iter().map(|x| -x).collect(), b));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                emit(a, &|| {
                    let full = (0..g.len()).map(|i| g[i] * bcast(&bd, i)).collect();
                    reduce_to(full, a)
                });
                emit(b, &|| {
                    let full = (0..g.len()).map(|i| g[i] * bcast(&ad, i)).collect();
                    reduce_to(full, b)
                });
            }
            Op::Div(a, b) => {
                let (ad, bd) = (a.data(), b.data());
                emit(a, &|| {
                    let full = (0..g.len()).map(|i| g[i] / bcast(&bd, i)).collect();
                    reduce_to(full, a)
                });
                emit(b, &|| {
                    let full = (0..g.len())
                        .map(|i| {
                            let bv = bcast(&bd, i);
                            -g[i] * bcast(&ad, i) / (bv * bv)
                        })
                        .collect();
                    reduce_to(full, b)
                });
            }
            Op::Scale(a, c) => emit(a, &|| g.iter().map(|x| x * c).collect()),
            Op::AddConst(a) => emit(a, &|| g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (ad, bd) = (a.data(), b.data());
                emit(a, &|| kernels::matmul_nt(g, &bd, m, n, k));
                emit(b, &|| kernels::matmul_tn(&ad, g, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                // g has shape [c, r]
                emit(a, &|| kernels::transpose(g, c, r));
            }
            Op::Reshape(a) => emit(a, &|| g.to_vec()),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let d = p.shape()[*axis];
                    emit(p, &|| {
                        let mut pg = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            pg.extend_from_slice(&g[base..base + d * inner]);
                        }
                        pg
                    });
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => emit(input, &|| {
                let (outer, dim, inner) = split_axis(input.shape(), *axis);
                let len = out_shape[*axis];
                let mut pg = vec![0.0; input.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * dim + start) * inner;
                    pg[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                pg
            }),
            Op::IndexSelect(a, idx) => emit(a, &|| {
                let row: usize = a.shape()[1..].iter().product();
                let mut pg = vec![0.0; a.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..row {
                        pg[i * row + j] += g[r * row + j];
                    }
                }
                pg
            }),
            Op::Softmax { input, axis, out: y } => emit(input, &|| {
                let (outer, dim, inner) = split_axis(input.shape(), *axis);
                let mut pg = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let dot: f64 = (0..dim).map(|d| g[at(d)] * y[at(d)]).sum();
                        for d in 0..dim {
                            pg[at(d)] = y[at(d)] * (g[at(d)] - dot);
                        }
                    }
                }
                pg
            }),
            Op::LogSoftmax { input, axis, probs } => emit(input, &|| {
                let (outer, dim, inner) = split_axis(input.shape(), *axis);
                let mut pg = vec![0.0; probs.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let gsum: f64 = (0..dim).map(|d| g[at(d)]).sum();
                        for d in 0..dim {
                            pg[at(d)] = g[at(d)] - probs[at(d)] * gsum;
                        }
                    }
                }
                pg
            }),
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *input.shape().last().unwrap();
                let rows = xhat.len() / d.max(1);
                let gam = gamma.data();
                emit(input, &|| {
                    let mut pg = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let s = r * d;
                        let mut mean_gy = 0.0;
                        let mut mean_gy_xhat = 0.0;
                        for j in 0..d {
                            let gy = g[s + j] * gam[j];
                            mean_gy += gy;
                            mean_gy_xhat += gy * xhat[s + j];
                        }
                        mean_gy /= d as f64;
                        mean_gy_xhat /= d as f64;
                        for j in 0..d {
                            let gy = g[s + j] * gam[j];
                            pg[s + j] = rstd[r] * (gy - mean_gy - xhat[s + j] * mean_gy_xhat);
                        }
                    }
                    pg
                });
                emit(gamma, &|| {
                    let mut pg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            pg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    pg
                });
                emit(beta, &|| {
                    let mut pg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            pg[j] += g[r * d + j];
                        }
                    }
                    pg
                });
            }
            Op::Gelu(a) => emit(a, &|| {
                let ad = a.data();
                ad.iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect()
            }),
            Op::Mean(a, axis) => emit(a, &|| {
                let (outer, dim, inner) = split_axis(a.shape(), *axis);
                let mut pg = vec![0.0; a.numel()];
                let inv = 1.0 / dim as f64;
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            pg[(o * dim + d) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                pg
            }),
            Op::Sum(a) => emit(a, &|| vec![g[0]; a.numel()]),
            Op::L2Norm(a, norm) => emit(a, &|| a.data().iter().map(|x| g[0] * x / norm).collect()),
            Op::AddBias(x, b) => {
                emit(x, &|| g.to_vec());
                emit(b, &|| {
                    let d = b.numel();
                    let mut pg = vec![0.0; d];
                    for (i, gv) in g.iter().enumerate() {
                        pg[i % d] += gv;
                    }
                    pg
                });
            }
            Op::MaskedFill(a, mask) => emit(a, &|| {
                g.iter()
                    .zip(mask)
                    .map(|(&gv, &m)| if m { 0.0 } else { gv })
                    .collect()
            }),
        }
        out
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> LabError {
    LabError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(LabError::InvalidOp {
            op,
            message: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(())
}

impl Tensor {
    fn elementwise(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let shape = if self.shape() == other.shape() || other.rank() == 0 {
            self.shape().to_vec()
        } else if self.rank() == 0 {
            other.shape().to_vec()
        } else {
            return Err(shape_err(op, self, other));
        };
        let data = {
            let (a, b) = (self.data(), other.data());
            let n = shape.iter().product::<usize>();
            (0..n).map(|i| f(bcast(&a, i), bcast(&b, i))).collect()
        };
        Ok(Tensor::from_op(data, shape, make(self.clone(), other.clone())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddConst(self.clone()))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(shape_err("matmul", self, other));
        }
        let (m, k, n) = (self.shape()[0], self.shape()[1], other.shape()[1]);
        let data = kernels::matmul(&self.data(), &other.data(), m, k, n);
        Ok(Tensor::from_op(
            data,
            vec![m, n],
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(LabError::InvalidOp {
                op: "transpose",
                message: format!("expected rank 2, got shape {:?}", self.shape()),
            });
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let data = kernels::transpose(&self.data(), r, c);
        Ok(Tensor::from_op(
            data,
            vec![c, r],
            Op::Transpose(self.clone()),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(LabError::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| LabError::InvalidOp {
            op: "concat",
            message: "no inputs".into(),
        })?;
        check_axis("concat", first, axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let conforms = p.rank() == first.rank()
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !conforms {
                return Err(shape_err("concat", first, p));
            }
            shape[axis] += p.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        let guards: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (p, d) in parts.iter().zip(&guards) {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(guards);
        Ok(Tensor::from_op(data, shape, Op::Concat(parts.to_vec(), axis)))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        check_axis("slice", self, axis)?;
        if start > end || end > self.shape()[axis] {
            return Err(LabError::InvalidOp {
                op: "slice",
                message: format!(
                    "range {start}..{end} out of bounds for axis {axis} of shape {:?}",
                    self.shape()
                ),
            });
        }
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let len = end - start;
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Slice {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Rows `indices` along axis 0, in the given order.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(LabError::InvalidOp {
                op: "index_select",
                message: "cannot index a scalar".into(),
            });
        }
        let rows = self.shape()[0];
        let row: usize = self.shape()[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(LabError::InvalidOp {
                op: "index_select",
                message: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        Ok(Tensor::from_op(
            data,
            shape,
            Op::IndexSelect(self.clone(), indices.to_vec()),
        ))
    }

    fn softmax_values(&self, axis: usize) -> Vec<f64> {
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| x[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for d in 0..dim {
                    let e = (x[at(d)] - max).exp();
                    y[at(d)] = e;
                    sum += e;
                }
                for d in 0..dim {
                    y[at(d)] /= sum;
                }
            }
        }
        y
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let y = self.softmax_values(axis);
        Ok(Tensor::from_op(
            y.clone(),
            self.shape().to_vec(),
            Op::Softmax {
                input: self.clone(),
                axis,
                out: y,
            },
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self, axis)?;
        let probs = self.softmax_values(axis);
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| x[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..dim).map(|d| (x[at(d)] - max).exp()).sum::<f64>().ln();
                for d in 0..dim {
                    out[at(d)] = x[at(d)] - lse;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LogSoftmax {
                input: self.clone(),
                axis,
                probs,
            },
        ))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| LabError::InvalidOp {
            op: "layer_norm",
            message: "scalar input".into(),
        })?;
        if gamma.shape() != [d] {
            return Err(shape_err("layer_norm", self, gamma));
        }
        if beta.shape() != [d] {
            return Err(shape_err("layer_norm", self, beta));
        }
        let x = self.data();
        let (gam, bet) = (gamma.data(), beta.data());
        let rows = x.len() / d.max(1);
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gam[j] * h + bet[j];
            }
        }
        drop((x, gam, bet));
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                input: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gelu(self.clone()))
    }

    /// Mean along `axis`; the axis is removed from the shape.
    pub fn mean(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean", self, axis)?;
        let (outer, dim, inner) = split_axis(self.shape(), axis);
        if dim == 0 {
            return Err(LabError::InvalidOp {
                op: "mean",
                message: format!("empty axis {axis} in shape {:?}", self.shape()),
            });
        }
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * dim + d) * inner + i];
                }
            }
        }
        drop(x);
        out.iter_mut().for_each(|v| *v /= dim as f64);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(out, shape, Op::Mean(self.clone(), axis)))
    }

    /// Sum of all entries, shape `[]`.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![], Op::Sum(self.clone()))
    }

    /// Mean of all entries, shape `[]`.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Euclidean norm of all entries, shape `[]`.
    pub fn l2_norm(&self) -> Tensor {
        let norm = self.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::from_op(vec![norm], vec![], Op::L2Norm(self.clone(), norm))
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("dot", self, other));
        }
        Ok(self.mul(other)?.sum())
    }

    /// Adds `bias` (shape `[d]`) to every row of a tensor whose last axis is `d`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = self.shape().last().copied();
        if bias.rank() != 1 || d != Some(bias.numel()) {
            return Err(shape_err("add_bias", self, bias));
        }
        let data = {
            let (x, b) = (self.data(), bias.data());
            let d = b.len();
            x.iter().enumerate().map(|(i, v)| v + b[i % d]).collect()
        };
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::AddBias(self.clone(), bias.clone()),
        ))
    }

    /// Replaces entries where `mask` is true by `value`; those entries pass no gradient.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(LabError::Shape {
                op: "masked_fill",
                lhs: self.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = self
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::MaskedFill(self.clone(), mask.to_vec()),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let i = t(&[1., 0., 0., 1.], &[2, 2]);
        assert_eq!(a.matmul(&i).unwrap().to_vec(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = t(&[0., 0.], &[2]).softmax(0).unwrap();
        assert_eq!(s.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn l2_norm_345() {
        assert_eq!(Tensor::from_slice(&[3., 4.]).l2_norm().item(), 5.0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let a = t(&[1., 2., 3.], &[3]);
        let b = t(&[1., 2.], &[2]);
        let msg = a.add(&b).unwrap_err().to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[3]") && msg.contains("[2]"), "{msg}");
        let m = t(&[0.; 6], &[2, 3]);
        let msg = m.matmul(&m).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn scalar_broadcast_is_the_only_broadcast() {
        let a = t(&[1., 2., 3.], &[3]);
        let s = Tensor::scalar(2.0);
        assert_eq!(a.mul(&s).unwrap().to_vec(), vec![2., 4., 6.]);
        assert_eq!(s.sub(&a).unwrap().to_vec(), vec![1., 0., -1.]);
        let one = t(&[2.], &[1]);
        assert!(a.mul(&one).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::param("x", vec![1., 2., 3.], &[3]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2., 4., 6.]);
    }

    #[test]
    fn mean_gradient() {
        let x = Tensor::param("x", vec![1., -2., 3., 0.5], &[4]).unwrap();
        x.mean(0).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        let x = Tensor::param("x", vec![2.0], &[]).unwrap();
        // y = x*3 + x*x  => dy/dx = 3 + 2x = 7
        let y = x.scale(3.0).add(&x.mul(&x).unwrap()).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
        // second backward of a fresh graph sums into the same grad
        x.scale(3.0).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![10.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn non_scalar_backward_is_an_error() {
        let x = Tensor::param("x", vec![1., 2.], &[2]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(LabError::NonScalarLoss(_))));
    }

    #[test]
    fn requires_grad_propagates_as_or() {
        let c = t(&[1., 2.], &[2]);
        let p = Tensor::param("p", vec![1., 1.], &[2]).unwrap();
        assert!(!c.add(&c).unwrap().requires_grad());
        assert!(c.add(&p).unwrap().requires_grad());
        assert!(!super::super::no_grad(|| c.add(&p).unwrap().requires_grad()));
    }

    #[test]
    fn concat_and_slice_shapes() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = t(&[5., 6.], &[2, 1]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1., 2., 5., 3., 4., 6.]);
        assert_eq!(c.slice(1, 1, 3).unwrap().to_vec(), vec![2., 5., 4., 6.]);
        let bad = t(&[1., 2., 3.], &[3, 1]);
        assert!(Tensor::concat(&[a, bad], 1).is_err());
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let x = Tensor::param("x", vec![1., 2., 3.], &[3]).unwrap();
        let y = x.masked_fill(&[false, true, false], f64::NEG_INFINITY).unwrap();
        let lp = y.log_softmax(0).unwrap();
        lp.slice(0, 0, 1).unwrap().sum().backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[1], 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }
}

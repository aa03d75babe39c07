//! Differentiable tensor operations.
//!
//! Binary element-wise ops broadcast NumPy-style (right-aligned, size-1 dims
//! stretch). Reductions along an axis drop that axis. All backward closures
//! write into zero-initialised per-parent buffers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Tensor, TensorError};

/// Right-aligned broadcast of two shapes; panics on incompatibility since
/// that is a programming error at call sites, not an input condition.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "cannot broadcast shapes {a:?} and {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Flat-index map from an output shape back into a (possibly broadcast)
/// input shape; `None` when the shapes already match.
fn index_map(from: &[usize], to: &[usize]) -> Option<Vec<usize>> {
    if from == to {
        return None;
    }
    let rank = to.len();
    let offset = rank - from.len();
    let mut from_strides = vec![0usize; from.len()];
    let mut s = 1;
    for i in (0..from.len()).rev() {
        from_strides[i] = s;
        s *= from[i];
    }
    let mut eff = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && !(from[i - offset] == 1 && to[i] != 1) {
            eff[i] = from_strides[i - offset];
        }
    }
    let total: usize = to.iter().product();
    let mut map = vec![0usize; total];
    let mut idx = vec![0usize; rank];
    let mut fidx = 0usize;
    for (flat, slot) in map.iter_mut().enumerate() {
        *slot = fidx;
        if flat + 1 == total {
            break;
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            fidx += eff[ax];
            if idx[ax] < to[ax] {
                break;
            }
            idx[ax] = 0;
            fidx -= eff[ax] * to[ax];
        }
    }
    Some(map)
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

/// Splits a shape at `axis` into (outer, lane, inner) extents so that flat
/// index `(o * lane + l) * inner + i` walks the axis.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange { axis, rank: shape.len() });
    }
    Ok(())
}

/// Unary op whose gradient is an element-wise factor known at forward time.
fn unary_with_deriv(x: &Tensor, out: Vec<f64>, deriv: Vec<f64>) -> Tensor {
    Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |g, bufs| {
            for ((b, gi), d) in bufs[0].iter_mut().zip(g).zip(&deriv) {
                *b = gi * d;
            }
        }),
    )
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        let shape = broadcast_shape(self.shape(), other.shape());
        let ma = index_map(self.shape(), &shape);
        let mb = index_map(other.shape(), &shape);
        let (a, b) = (self.data(), other.data());
        let total: usize = shape.iter().product();
        let out: Vec<f64> = (0..total).map(|i| a[at(&ma, i)] + b[at(&mb, i)]).collect();
        drop(a);
        drop(b);
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, bufs| {
                for (i, gi) in g.iter().enumerate() {
                    bufs[0][at(&ma, i)] += gi;
                    bufs[1][at(&mb, i)] += gi;
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let shape = broadcast_shape(self.shape(), other.shape());
        let ma = index_map(self.shape(), &shape);
        let mb = index_map(other.shape(), &shape);
        let (a, b) = (self.data(), other.data());
        let total: usize = shape.iter().product();
        let out: Vec<f64> = (0..total).map(|i| a[at(&ma, i)] - b[at(&mb, i)]).collect();
        drop(a);
        drop(b);
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, bufs| {
                for (i, gi) in g.iter().enumerate() {
                    bufs[0][at(&ma, i)] += gi;
                    bufs[1][at(&mb, i)] -= gi;
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let shape = broadcast_shape(self.shape(), other.shape());
        let ma = index_map(self.shape(), &shape);
        let mb = index_map(other.shape(), &shape);
        let a = self.to_vec();
        let b = other.to_vec();
        let total: usize = shape.iter().product();
        let out: Vec<f64> = (0..total).map(|i| a[at(&ma, i)] * b[at(&mb, i)]).collect();
        Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, bufs| {
                for (i, gi) in g.iter().enumerate() {
                    bufs[0][at(&ma, i)] += gi * b[at(&mb, i)];
                    bufs[1][at(&mb, i)] += gi * a[at(&ma, i)];
                }
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, k: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * k).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for (b, gi) in bufs[0].iter_mut().zip(g) {
                    *b = gi * k;
                }
            }),
        )
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&self, k: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v + k).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|g, bufs| bufs[0].copy_from_slice(g)),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|&v| v.max(0.0)).collect();
        let deriv: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        drop(x);
        unary_with_deriv(self, out, deriv)
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let x = self.data();
        let mut out = Vec::with_capacity(x.len());
        let mut deriv = Vec::with_capacity(x.len());
        for &v in x.iter() {
            let u = C * (v + A * v * v * v);
            let t = u.tanh();
            out.push(0.5 * v * (1.0 + t));
            deriv.push(0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v));
        }
        drop(x);
        unary_with_deriv(self, out, deriv)
    }

    pub fn sigmoid(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|&v| sigmoid_scalar(v)).collect();
        drop(x);
        let deriv: Vec<f64> = out.iter().map(|&s| s * (1.0 - s)).collect();
        unary_with_deriv(self, out, deriv)
    }

    /// log(1 + e^x), computed to avoid overflow for large |x|.
    pub fn softplus(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|&v| softplus_scalar(v)).collect();
        let deriv: Vec<f64> = x.iter().map(|&v| sigmoid_scalar(v)).collect();
        drop(x);
        unary_with_deriv(self, out, deriv)
    }

    /// |x|; the subgradient at zero is taken as 0.
    pub fn abs(&self) -> Tensor {
        let x = self.data();
        let out: Vec<f64> = x.iter().map(|&v| v.abs()).collect();
        let deriv: Vec<f64> = x
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        drop(x);
        unary_with_deriv(self, out, deriv)
    }

    /// 2-D matrix product `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2, "matmul lhs must be rank 2, got {:?}", self.shape());
        assert_eq!(other.rank(), 2, "matmul rhs must be rank 2, got {:?}", other.shape());
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let (k2, m) = (other.shape()[0], other.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims disagree: {:?} x {:?}", self.shape(), other.shape());
        let a = self.to_vec();
        let b = other.to_vec();
        let mut out = vec![0.0; n * m];
        mm(&a, &b, n, k, m, &mut out);
        Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, bufs| {
                // dA = G . B^T
                for i in 0..n {
                    for l in 0..k {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[i * m + j] * b[l * m + j];
                        }
                        bufs[0][i * k + l] = acc;
                    }
                }
                // dB = A^T . G
                for i in 0..n {
                    for l in 0..k {
                        let av = a[i * k + l];
                        for j in 0..m {
                            bufs[1][l * m + j] += av * g[i * m + j];
                        }
                    }
                }
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        check_axis(self.shape(), axis)?;
        let (outer, lane, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * lane + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(x[idx(l)]);
                }
                let mut z = 0.0;
                for l in 0..lane {
                    let e = (x[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..lane {
                    out[idx(l)] /= z;
                }
            }
        }
        drop(x);
        let s = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..lane {
                            dot += g[idx(l)] * s[idx(l)];
                        }
                        for l in 0..lane {
                            bufs[0][idx(l)] = s[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }),
        ))
    }

    /// log(softmax(x)) along `axis`, stable for large logits.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        check_axis(self.shape(), axis)?;
        let (outer, lane, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * lane + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(x[idx(l)]);
                }
                let mut z = 0.0;
                for l in 0..lane {
                    z += (x[idx(l)] - max).exp();
                }
                let lz = z.ln() + max;
                for l in 0..lane {
                    out[idx(l)] = x[idx(l)] - lz;
                }
            }
        }
        drop(x);
        let y = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * lane + l) * inner + i;
                        let mut gsum = 0.0;
                        for l in 0..lane {
                            gsum += g[idx(l)];
                        }
                        for l in 0..lane {
                            bufs[0][idx(l)] = g[idx(l)] - y[idx(l)].exp() * gsum;
                        }
                    }
                }
            }),
        ))
    }

    /// Normalises each slice along the last axis to zero mean, unit variance
    /// (population variance, stabilised by `eps`). No affine parameters; the
    /// surrounding layer supplies those if needed.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        assert!(self.rank() >= 1, "layer_norm needs at least rank 1");
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let axis = self.rank() - 1;
        let (outer, lane, _) = lanes(self.shape(), axis);
        let x = self.to_vec();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; outer];
        for o in 0..outer {
            let row = &x[o * lane..(o + 1) * lane];
            let mean = row.iter().sum::<f64>() / lane as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / lane as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[o] = s;
            for l in 0..lane {
                out[o * lane + l] = (row[l] - mean) * s;
            }
        }
        let y = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for o in 0..outer {
                    let base = o * lane;
                    let mut gmean = 0.0;
                    let mut gydot = 0.0;
                    for l in 0..lane {
                        gmean += g[base + l];
                        gydot += g[base + l] * y[base + l];
                    }
                    gmean /= lane as f64;
                    gydot /= lane as f64;
                    for l in 0..lane {
                        bufs[0][base + l] =
                            inv_std[o] * (g[base + l] - gmean - y[base + l] * gydot);
                    }
                }
            }),
        )
    }

    /// Scales each slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&self, eps: f64) -> Tensor {
        assert!(self.rank() >= 1, "l2_normalize needs at least rank 1");
        let axis = self.rank() - 1;
        let (outer, lane, _) = lanes(self.shape(), axis);
        let x = self.to_vec();
        let mut out = vec![0.0; x.len()];
        let mut norms = vec![0.0; outer];
        for o in 0..outer {
            let row = &x[o * lane..(o + 1) * lane];
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            norms[o] = n;
            for l in 0..lane {
                out[o * lane + l] = row[l] / n;
            }
        }
        let y = out.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for o in 0..outer {
                    let base = o * lane;
                    let mut dot = 0.0;
                    for l in 0..lane {
                        dot += g[base + l] * y[base + l];
                    }
                    for l in 0..lane {
                        bufs[0][base + l] = (g[base + l] - y[base + l] * dot) / norms[o];
                    }
                }
            }),
        )
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(|g, bufs| bufs[0].fill(g[0])),
        )
    }

    /// Mean of all elements, as a rank-0 scalar.
    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        let total: f64 = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |g, bufs| bufs[0].fill(g[0] / n)),
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        check_axis(self.shape(), axis)?;
        let (outer, lane, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * lane + l) * inner + i];
                }
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for o in 0..outer {
                    for l in 0..lane {
                        for i in 0..inner {
                            bufs[0][(o * lane + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor, TensorError> {
        check_axis(self.shape(), axis)?;
        let lane = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / lane))
    }

    /// Concatenates tensors along `axis`; all other dims must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        check_axis(first.shape(), axis)?;
        let rank = first.rank();
        for p in parts {
            if p.rank() != rank {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat rank disagreement: {:?} vs {:?}",
                    first.shape(),
                    p.shape()
                )));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != first.shape()[d] {
                    return Err(TensorError::ShapeMismatch(format!(
                        "concat shapes differ off-axis: {:?} vs {:?}",
                        first.shape(),
                        p.shape()
                    )));
                }
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let out_lane: usize = blocks.iter().sum();
        let mut out = vec![0.0; outer * out_lane];
        for o in 0..outer {
            let mut off = o * out_lane;
            for (p, &blk) in parts.iter().zip(&blocks) {
                let data = p.data();
                out[off..off + blk].copy_from_slice(&data[o * blk..(o + 1) * blk]);
                off += blk;
            }
        }
        Ok(Tensor::from_op(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g, bufs| {
                for o in 0..outer {
                    let mut off = o * out_lane;
                    for (pi, &blk) in blocks.iter().enumerate() {
                        bufs[pi][o * blk..(o + 1) * blk].copy_from_slice(&g[off..off + blk]);
                        off += blk;
                    }
                }
            }),
        ))
    }

    /// Reinterprets the data with a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let new_len: usize = shape.iter().product();
        assert_eq!(
            new_len,
            self.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, bufs| bufs[0].copy_from_slice(g)),
        )
    }

    /// Reorders axes. `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor, TensorError> {
        let rank = self.rank();
        if axes.len() != rank || {
            let mut seen = vec![false; rank];
            axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
        } {
            return Err(TensorError::InvalidArgument(format!(
                "permute axes {axes:?} is not a permutation of 0..{rank}"
            )));
        }
        let in_shape = self.shape().to_vec();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let total = self.len();
        // map[out_flat] = in_flat
        let mut map = vec![0usize; total];
        let mut idx = vec![0usize; rank];
        for slot in map.iter_mut() {
            let mut f = 0;
            for (d, &ax) in axes.iter().enumerate() {
                f += idx[d] * in_strides[ax];
            }
            *slot = f;
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let x = self.data();
        let out: Vec<f64> = map.iter().map(|&f| x[f]).collect();
        drop(x);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for (i, &f) in map.iter().enumerate() {
                    bufs[0][f] += g[i];
                }
            }),
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor, TensorError> {
        check_axis(self.shape(), axis)?;
        let dim = self.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(TensorError::InvalidArgument(format!(
                "narrow [{start}, {start}+{len}) out of range for axis {axis} of size {dim}"
            )));
        }
        let (outer, lane, inner) = lanes(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = (o * lane + start + l) * inner;
                let dst = (o * len + l) * inner;
                out[dst..dst + inner].copy_from_slice(&x[src..src + inner]);
            }
        }
        drop(x);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for o in 0..outer {
                    for l in 0..len {
                        let dst = (o * lane + start + l) * inner;
                        let src = (o * len + l) * inner;
                        bufs[0][dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
            }),
        ))
    }

    /// Gathers one element per row of a rank-2 tensor: `out[i] = x[i, idx[i]]`.
    pub fn take_per_row(&self, idx: &[usize]) -> Result<Tensor, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::ShapeMismatch(format!(
                "take_per_row needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let (n, c) = (self.shape()[0], self.shape()[1]);
        if idx.len() != n {
            return Err(TensorError::ShapeMismatch(format!(
                "take_per_row got {} indices for {n} rows",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(TensorError::InvalidArgument(format!(
                "take_per_row index {bad} out of range for {c} columns"
            )));
        }
        let x = self.data();
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| x[i * c + j]).collect();
        drop(x);
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for (i, &j) in idx.iter().enumerate() {
                    bufs[0][i * c + j] = g[i];
                }
            }),
        ))
    }

    /// Inverted dropout: in training, zeroes each element with probability
    /// `rate` and rescales survivors by `1/(1-rate)`; outside training it is
    /// the identity (and draws nothing from `rng`).
    pub fn dropout(&self, rate: f64, train: bool, rng: &mut ChaCha8Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1), got {rate}");
        if !train || rate == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out: Vec<f64> = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        unary_with_deriv(self, out, mask)
    }

    /// Identity forward; multiplies the upstream gradient by `-lambda` on
    /// the way back. The adversarial building block for domain confusion.
    pub fn gradient_reversal(&self, lambda: f64) -> Tensor {
        assert!(lambda >= 0.0, "gradient reversal strength must be >= 0, got {lambda}");
        Tensor::from_op(
            self.shape().to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g, bufs| {
                for (b, gi) in bufs[0].iter_mut().zip(g) {
                    *b = -lambda * gi;
                }
            }),
        )
    }
}

/// Numerically stable scalar `1 / (1 + e^-v)`.
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else if v < -30.0 {
        v.exp()
    } else {
        (1.0 + v.exp()).ln()
    }
}

/// `out += A[n,k] . B[k,m]`, row-major.
pub(crate) fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use crate::rng;

    #[test]
    fn broadcast_add_reduces_grads_to_parent_shapes() {
        // [2,3] + [3] broadcasts the bias; its grad must sum over rows.
        let x = Tensor::leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::leaf(&[3], vec![10.0, 20.0, 30.0]);
        let y = x.add(&b);
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn scalar_broadcasts_against_anything() {
        let x = Tensor::constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = Tensor::scalar(10.0);
        assert_eq!(x.mul(&s).to_vec(), vec![10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_equal_logits_are_uniform() {
        let x = Tensor::constant(&[2, 4], vec![3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]);
        let s = x.softmax(1).unwrap();
        let d = s.to_vec();
        for r in 0..2 {
            let sum: f64 = d[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for v in &d[..4] {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_survives_huge_logits() {
        let x = Tensor::constant(&[1, 3], vec![1000.0, 1000.0, 1000.0]);
        let y = x.log_softmax(1).unwrap();
        for v in y.to_vec() {
            assert!((v - (1f64 / 3.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_stays_finite() {
        let x = Tensor::leaf(&[1, 4], vec![5.0; 4]);
        let y = x.layer_norm(1e-5);
        assert!(y.to_vec().iter().all(|v| *v == 0.0));
        y.sum().backward().unwrap();
        assert!(x.grad().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::leaf(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
        c.sum().backward().unwrap();
        // dA = 1 . B^T : row sums of B.
        assert_eq!(a.grad().unwrap(), vec![15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let a = Tensor::leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::leaf(&[2, 1], vec![5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = c.narrow(1, 2, 1).unwrap();
        assert_eq!(back.to_vec(), vec![5.0, 6.0]);
        back.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
        assert!(a.grad().is_none() || a.grad().unwrap() == vec![0.0; 4]);
    }

    #[test]
    fn permute_backward_returns_to_source_layout() {
        let x = Tensor::leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = x.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        // Weighted sum so the gradient is position-dependent.
        let w = Tensor::constant(&[3, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0]);
        t.mul(&w).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_preserves_expectation() {
        let x = Tensor::leaf(&[1000], vec![1.0; 1000]);
        let mut r = rng::stream(1, "dropout-test", &[]);
        let eval = x.dropout(0.5, false, &mut r);
        assert_eq!(eval.id(), x.id());
        let train = x.dropout(0.5, true, &mut r);
        let mean: f64 = train.to_vec().iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15, "inverted dropout should keep the mean, got {mean}");
    }

    #[test]
    fn gradient_reversal_flips_and_scales() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0]);
        let y = x.gradient_reversal(0.5);
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-0.5, -0.5]);
    }

    #[test]
    fn take_per_row_gathers_and_scatters() {
        let x = Tensor::leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let picked = x.take_per_row(&[2, 0]).unwrap();
        assert_eq!(picked.to_vec(), vec![3.0, 4.0]);
        picked.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_rows_have_unit_norm() {
        let x = Tensor::constant(&[2, 2], vec![3.0, 4.0, 0.6, 0.8]);
        let y = x.l2_normalize(0.0);
        let d = y.to_vec();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
        assert!((d[2] - 0.6).abs() < 1e-12 && (d[3] - 0.8).abs() < 1e-12);
    }
}

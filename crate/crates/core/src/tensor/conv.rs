//! 1-D cross-correlation ("conv1d" in deep-learning convention) with zero
//! padding, plus its gradients w.r.t. input, weight, and bias.

use super::{Tensor, TensorError};

/// `input [B, C_in, T]`, `weight [C_out, C_in, k]`, `bias [C_out]`.
/// Output length is `(T + 2*padding - k) / stride + 1`.
pub fn conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    if input.rank() != 3 || weight.rank() != 3 || bias.rank() != 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "conv1d expects input rank 3, weight rank 3, bias rank 1; got {:?}, {:?}, {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let (b, c_in, t) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, wc_in, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
    if wc_in != c_in {
        return Err(TensorError::ShapeMismatch(format!(
            "conv1d channel mismatch: input has {c_in}, weight expects {wc_in}"
        )));
    }
    if bias.shape()[0] != c_out {
        return Err(TensorError::ShapeMismatch(format!(
            "conv1d bias has {} entries for {c_out} output channels",
            bias.shape()[0]
        )));
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument("conv1d stride must be >= 1".into()));
    }
    if k == 0 || k > t + 2 * padding {
        return Err(TensorError::ShapeMismatch(format!(
            "conv1d kernel {k} does not fit input of length {t} with padding {padding}"
        )));
    }
    let t_out = (t + 2 * padding - k) / stride + 1;

    let x = input.to_vec();
    let w = weight.to_vec();
    let bs = bias.to_vec();

    // Valid output range for kernel tap `kk`: the `to` values whose input
    // index `to*stride + kk - padding` lands inside [0, t). Hoisting the
    // boundary test out of the inner loops leaves them branch-free.
    let tap_range = move |kk: usize| -> (usize, usize) {
        if kk > t - 1 + padding {
            return (0, 0);
        }
        let lo = if padding > kk { (padding - kk).div_ceil(stride).min(t_out) } else { 0 };
        let hi = ((t - 1 + padding - kk) / stride + 1).min(t_out);
        (lo, hi.max(lo))
    };

    let mut out = vec![0.0; b * c_out * t_out];
    for bi in 0..b {
        for co in 0..c_out {
            let orow = &mut out[(bi * c_out + co) * t_out..][..t_out];
            orow.fill(bs[co]);
            for ci in 0..c_in {
                let xrow = &x[(bi * c_in + ci) * t..][..t];
                let wrow = &w[(co * c_in + ci) * k..][..k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let (lo, hi) = tap_range(kk);
                    if lo == hi {
                        continue;
                    }
                    let base = (lo * stride + kk) - padding;
                    if stride == 1 {
                        for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[base..]) {
                            *o += wv * xv;
                        }
                    } else {
                        for (i, o) in orow[lo..hi].iter_mut().enumerate() {
                            *o += wv * xrow[base + i * stride];
                        }
                    }
                }
            }
        }
    }

    Ok(Tensor::from_op(
        vec![b, c_out, t_out],
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, bufs| {
            let (dx, rest) = bufs.split_at_mut(1);
            let (dw, db) = rest.split_at_mut(1);
            let dx = &mut dx[0];
            let dw = &mut dw[0];
            let db = &mut db[0];
            for bi in 0..b {
                for co in 0..c_out {
                    let grow = &g[(bi * c_out + co) * t_out..][..t_out];
                    db[co] += grow.iter().sum::<f64>();
                    for ci in 0..c_in {
                        let xbase = (bi * c_in + ci) * t;
                        let wbase = (co * c_in + ci) * k;
                        for kk in 0..k {
                            let (lo, hi) = tap_range(kk);
                            if lo == hi {
                                continue;
                            }
                            let base = xbase + (lo * stride + kk) - padding;
                            let wv = w[wbase + kk];
                            if stride == 1 {
                                let n = hi - lo;
                                let mut acc = 0.0;
                                for (gv, (xv, dxv)) in grow[lo..hi]
                                    .iter()
                                    .zip(x[base..base + n].iter().zip(dx[base..base + n].iter_mut()))
                                {
                                    acc += gv * xv;
                                    *dxv += wv * gv;
                                }
                                dw[wbase + kk] += acc;
                            } else {
                                let mut acc = 0.0;
                                for (i, &gv) in grow[lo..hi].iter().enumerate() {
                                    acc += gv * x[base + i * stride];
                                    dx[base + i * stride] += wv * gv;
                                }
                                dw[wbase + kk] += acc;
                            }
                        }
                    }
                }
            }
        }),
    ))
}

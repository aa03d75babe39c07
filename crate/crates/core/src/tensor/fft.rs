//! Real FFT along the last axis, its inverse, and differentiable complex
//! helpers used by the spectral backbones.
//!
//! Conventions match NumPy's `rfft`/`irfft`: the forward transform is
//! unnormalised and keeps `F = floor(T/2) + 1` bins; the inverse rebuilds the
//! Hermitian spectrum and divides by `T`. Transform kernels are delegated to
//! `rustfft`; only the gradient bookkeeping lives here.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Tensor, TensorError};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place FFT over a buffer holding `buf.len() / len` back-to-back lanes.
fn fft_lanes(buf: &mut [Complex<f64>], len: usize, inverse: bool) {
    if len == 0 || buf.is_empty() {
        return;
    }
    PLANNER.with(|p| {
        let fft = if inverse {
            p.borrow_mut().plan_fft_inverse(len)
        } else {
            p.borrow_mut().plan_fft_forward(len)
        };
        fft.process(buf);
    });
}

/// A pair of equally shaped real tensors viewed as one complex tensor.
/// Gradients flow through both parts independently.
#[derive(Clone, Debug)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Self {
        assert_eq!(re.shape(), im.shape(), "complex parts must share a shape");
        ComplexTensor { re, im }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    fn last_dim(&self) -> usize {
        *self.shape().last().expect("complex tensor must have rank >= 1")
    }

    /// Multiplies every lane by a real window over the last axis.
    pub fn scale_last_axis(&self, window: &[f64]) -> ComplexTensor {
        assert_eq!(window.len(), self.last_dim(), "window length must match last axis");
        let w = Tensor::constant(&[window.len()], window.to_vec());
        ComplexTensor::new(self.re.mul(&w), self.im.mul(&w))
    }

    /// Keeps the first `len` entries of the last axis (low modes).
    pub fn narrow_last(&self, len: usize) -> Result<ComplexTensor, TensorError> {
        let axis = self.re.rank() - 1;
        Ok(ComplexTensor::new(
            self.re.narrow(axis, 0, len)?,
            self.im.narrow(axis, 0, len)?,
        ))
    }

    /// Element-wise complex multiplication with another complex tensor
    /// (broadcasting as in the underlying real ops).
    pub fn mul_elementwise(&self, other: &ComplexTensor) -> ComplexTensor {
        let re = self.re.mul(&other.re).sub(&self.im.mul(&other.im));
        let im = self.re.mul(&other.im).add(&self.im.mul(&other.re));
        ComplexTensor::new(re, im)
    }

    /// Magnitude/phase decomposition. Near the origin (`r < 1e-8`) the phase
    /// is defined as zero and receives zero gradient, so the non-smooth
    /// branch of `atan2` never contaminates training.
    pub fn to_polar(&self) -> (Tensor, Tensor) {
        const PHASE_EPS: f64 = 1e-8;
        let re = self.re.to_vec();
        let im = self.im.to_vec();
        let n = re.len();
        let mut r = Vec::with_capacity(n);
        let mut theta = Vec::with_capacity(n);
        for i in 0..n {
            let ri = re[i].hypot(im[i]);
            r.push(ri);
            theta.push(if ri < PHASE_EPS { 0.0 } else { im[i].atan2(re[i]) });
        }
        let shape = self.shape().to_vec();
        let parents = vec![self.re.clone(), self.im.clone()];
        let (re_r, im_r, r_vals) = (re.clone(), im.clone(), r.clone());
        let r_node = Tensor::from_op(
            shape.clone(),
            r,
            parents.clone(),
            Box::new(move |g, bufs| {
                for i in 0..g.len() {
                    if r_vals[i] > 0.0 {
                        bufs[0][i] = g[i] * re_r[i] / r_vals[i];
                        bufs[1][i] = g[i] * im_r[i] / r_vals[i];
                    }
                }
            }),
        );
        let theta_node = Tensor::from_op(
            shape,
            theta,
            parents,
            Box::new(move |g, bufs| {
                for i in 0..g.len() {
                    let r2 = re[i] * re[i] + im[i] * im[i];
                    if r2.sqrt() >= PHASE_EPS {
                        bufs[0][i] = -g[i] * im[i] / r2;
                        bufs[1][i] = g[i] * re[i] / r2;
                    }
                }
            }),
        );
        (r_node, theta_node)
    }

    /// Per-mode complex channel mixing: input `[B, D, M]` with weights
    /// `[M, D, O]` yields `[B, O, M]`, mode `m` using its own `D x O` matrix.
    pub fn mode_mix(&self, w_re: &Tensor, w_im: &Tensor) -> ComplexTensor {
        assert_eq!(self.re.rank(), 3, "mode_mix input must be [B, D, M]");
        assert_eq!(w_re.shape(), w_im.shape(), "mixing weight parts must agree");
        assert_eq!(w_re.rank(), 3, "mode_mix weights must be [M, D, O]");
        let (b, d, m) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert_eq!(w_re.shape()[0], m, "weight mode count must match input");
        assert_eq!(w_re.shape()[1], d, "weight channel count must match input");
        let o = w_re.shape()[2];

        let xr = self.re.to_vec();
        let xi = self.im.to_vec();
        let wr = w_re.to_vec();
        let wi = w_im.to_vec();

        let idx_x = move |bi: usize, di: usize, mi: usize| (bi * d + di) * m + mi;
        let idx_w = move |mi: usize, di: usize, oi: usize| (mi * d + di) * o + oi;
        let idx_y = move |bi: usize, oi: usize, mi: usize| (bi * o + oi) * m + mi;

        let mut yr = vec![0.0; b * o * m];
        let mut yi = vec![0.0; b * o * m];
        for bi in 0..b {
            for mi in 0..m {
                for di in 0..d {
                    let (a, c) = (xr[idx_x(bi, di, mi)], xi[idx_x(bi, di, mi)]);
                    for oi in 0..o {
                        let (u, v) = (wr[idx_w(mi, di, oi)], wi[idx_w(mi, di, oi)]);
                        yr[idx_y(bi, oi, mi)] += a * u - c * v;
                        yi[idx_y(bi, oi, mi)] += a * v + c * u;
                    }
                }
            }
        }

        let parents = vec![self.re.clone(), self.im.clone(), w_re.clone(), w_im.clone()];
        // Real part: y_r = x_r*w_r - x_i*w_i summed over channels.
        let (xr1, xi1, wr1, wi1) = (xr.clone(), xi.clone(), wr.clone(), wi.clone());
        let re_node = Tensor::from_op(
            vec![b, o, m],
            yr,
            parents.clone(),
            Box::new(move |g, bufs| {
                for bi in 0..b {
                    for mi in 0..m {
                        for oi in 0..o {
                            let gv = g[idx_y(bi, oi, mi)];
                            if gv == 0.0 {
                                continue;
                            }
                            for di in 0..d {
                                bufs[0][idx_x(bi, di, mi)] += gv * wr1[idx_w(mi, di, oi)];
                                bufs[1][idx_x(bi, di, mi)] -= gv * wi1[idx_w(mi, di, oi)];
                                bufs[2][idx_w(mi, di, oi)] += gv * xr1[idx_x(bi, di, mi)];
                                bufs[3][idx_w(mi, di, oi)] -= gv * xi1[idx_x(bi, di, mi)];
                            }
                        }
                    }
                }
            }),
        );
        // Imaginary part: y_i = x_r*w_i + x_i*w_r summed over channels.
        let im_node = Tensor::from_op(
            vec![b, o, m],
            yi,
            parents,
            Box::new(move |g, bufs| {
                for bi in 0..b {
                    for mi in 0..m {
                        for oi in 0..o {
                            let gv = g[idx_y(bi, oi, mi)];
                            if gv == 0.0 {
                                continue;
                            }
                            for di in 0..d {
                                bufs[0][idx_x(bi, di, mi)] += gv * wi[idx_w(mi, di, oi)];
                                bufs[1][idx_x(bi, di, mi)] += gv * wr[idx_w(mi, di, oi)];
                                bufs[2][idx_w(mi, di, oi)] += gv * xi[idx_x(bi, di, mi)];
                                bufs[3][idx_w(mi, di, oi)] += gv * xr[idx_x(bi, di, mi)];
                            }
                        }
                    }
                }
            }),
        );
        ComplexTensor::new(re_node, im_node)
    }
}

/// Unnormalised real FFT along the last axis; output keeps `floor(T/2)+1`
/// non-negative-frequency bins.
pub fn rfft(x: &Tensor) -> ComplexTensor {
    assert!(x.rank() >= 1, "rfft needs at least rank 1");
    let t = *x.shape().last().unwrap();
    assert!(t >= 1, "rfft needs a non-empty last axis");
    let f = t / 2 + 1;
    let lanes = x.len() / t;

    let data = x.data();
    let mut buf: Vec<Complex<f64>> =
        data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    drop(data);
    fft_lanes(&mut buf, t, false);

    let mut re = vec![0.0; lanes * f];
    let mut im = vec![0.0; lanes * f];
    for lane in 0..lanes {
        for k in 0..f {
            let c = buf[lane * t + k];
            re[lane * f + k] = c.re;
            im[lane * f + k] = c.im;
        }
    }

    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = f;

    // d re_k / d x_t = cos(2pi k t / T): packing the upstream grad into the
    // first F bins and running an unnormalised inverse FFT evaluates exactly
    // that sum; the imaginary-part node packs i*g instead.
    let re_node = Tensor::from_op(
        shape.clone(),
        re,
        vec![x.clone()],
        Box::new(move |g, bufs| {
            let mut h = vec![Complex::new(0.0, 0.0); lanes * t];
            for lane in 0..lanes {
                for k in 0..f {
                    h[lane * t + k] = Complex::new(g[lane * f + k], 0.0);
                }
            }
            fft_lanes(&mut h, t, true);
            for (b, c) in bufs[0].iter_mut().zip(&h) {
                *b = c.re;
            }
        }),
    );
    let im_node = Tensor::from_op(
        shape,
        im,
        vec![x.clone()],
        Box::new(move |g, bufs| {
            let mut h = vec![Complex::new(0.0, 0.0); lanes * t];
            for lane in 0..lanes {
                for k in 0..f {
                    h[lane * t + k] = Complex::new(0.0, g[lane * f + k]);
                }
            }
            fft_lanes(&mut h, t, true);
            for (b, c) in bufs[0].iter_mut().zip(&h) {
                *b = c.re;
            }
        }),
    );
    ComplexTensor::new(re_node, im_node)
}

/// Inverse of [`rfft`]: rebuilds the Hermitian spectrum, applies the
/// unnormalised inverse transform, and scales by `1/T`. The imaginary parts
/// of the DC (and, for even `T`, Nyquist) bins cannot influence a real
/// signal and therefore receive zero gradient.
pub fn irfft(c: &ComplexTensor, t_len: usize) -> Result<Tensor, TensorError> {
    let f = c.last_dim();
    if t_len == 0 || t_len / 2 + 1 != f {
        return Err(TensorError::ShapeMismatch(format!(
            "irfft output length {t_len} expects {} bins, got {f}",
            t_len / 2 + 1
        )));
    }
    let t = t_len;
    let lanes = c.re.len() / f;
    let re = c.re.to_vec();
    let im = c.im.to_vec();

    let mut buf = vec![Complex::new(0.0, 0.0); lanes * t];
    for lane in 0..lanes {
        for k in 0..f {
            buf[lane * t + k] = Complex::new(re[lane * f + k], im[lane * f + k]);
        }
        // Mirror interior bins; the Nyquist bin (even T) is its own mirror.
        for k in 1..f {
            let m = t - k;
            if m >= f {
                buf[lane * t + m] = Complex::new(re[lane * f + k], -im[lane * f + k]);
            }
        }
    }
    fft_lanes(&mut buf, t, true);
    let out: Vec<f64> = buf.iter().map(|v| v.re / t as f64).collect();

    let mut shape = c.re.shape().to_vec();
    *shape.last_mut().unwrap() = t;

    Ok(Tensor::from_op(
        shape,
        out,
        vec![c.re.clone(), c.im.clone()],
        Box::new(move |g, bufs| {
            // Forward-transform the upstream gradient once per lane; interior
            // bins pick up a factor 2 from their conjugate mirror.
            let mut h: Vec<Complex<f64>> =
                g.iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft_lanes(&mut h, t, false);
            for lane in 0..lanes {
                for k in 0..f {
                    let mirrored = k != 0 && !(t % 2 == 0 && k == t / 2);
                    let mult = if mirrored { 2.0 } else { 1.0 } / t as f64;
                    let y = h[lane * t + k];
                    bufs[0][lane * f + k] = mult * y.re;
                    bufs[1][lane * f + k] = if mirrored { mult * y.im } else { 0.0 };
                }
            }
        }),
    ))
}

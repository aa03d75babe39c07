//! Straight-through operators: hard, non-differentiable decisions in the
//! forward pass (a segment permutation, a binary frequency gate) paired with
//! smooth surrogate gradients for the parameters that drive the decision.

use super::{ops::sigmoid_scalar, Tensor, TensorError};

/// Reorders equal-length segments of the time axis by descending learned
/// priority. `x` is `[B, C, T]`, `priority` one score per segment; ties keep
/// their original order. Output slot `i` receives segment `argsort_i`.
///
/// Gradients w.r.t. `x` follow the hard permutation exactly. Gradients
/// w.r.t. `priority` use a soft permutation surrogate: row `i` is a softmax
/// over `-|q_i - p_j| / temperature` with `q` the sorted priorities, so a
/// segment's score feels pressure proportional to how its similarity to each
/// output slot would change.
pub fn s3_shuffle(x: &Tensor, priority: &Tensor, temperature: f64) -> Result<Tensor, TensorError> {
    if x.rank() != 3 {
        return Err(TensorError::ShapeMismatch(format!(
            "s3_shuffle input must be [B, C, T], got {:?}",
            x.shape()
        )));
    }
    if priority.rank() != 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "s3_shuffle priority must be rank 1, got {:?}",
            priority.shape()
        )));
    }
    if temperature <= 0.0 {
        return Err(TensorError::InvalidArgument(
            "s3_shuffle temperature must be positive".into(),
        ));
    }
    let (b, c, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = priority.shape()[0];
    if n == 0 || t % n != 0 {
        return Err(TensorError::ShapeMismatch(format!(
            "segment count {n} must divide sequence length {t}"
        )));
    }
    let seg = t / n;

    let p = priority.to_vec();
    if p.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::InvalidArgument(
            "s3_shuffle priorities must be finite".into(),
        ));
    }
    // Stable descending argsort: equal priorities keep their index order.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by(|&a, &bq| p[bq].partial_cmp(&p[a]).expect("finite priorities"));

    let xd = x.to_vec();
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * t;
            for (slot, &src) in perm.iter().enumerate() {
                out[base + slot * seg..base + (slot + 1) * seg]
                    .copy_from_slice(&xd[base + src * seg..base + src * seg + seg]);
            }
        }
    }

    let perm_b = perm.clone();
    let tau = temperature;
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone(), priority.clone()],
        Box::new(move |g, bufs| {
            // Hard inverse scatter for the data gradient.
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * t;
                    for (slot, &src) in perm_b.iter().enumerate() {
                        let (dst, from) = (base + src * seg, base + slot * seg);
                        for l in 0..seg {
                            bufs[0][dst + l] += g[from + l];
                        }
                    }
                }
            }
            // Soft-permutation surrogate for the priority gradient.
            // G[i][j] aggregates how much output slot i "wants" segment j.
            let mut gmat = vec![0.0; n * n];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * t;
                    for i in 0..n {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for l in 0..seg {
                                acc += g[base + i * seg + l] * xd[base + j * seg + l];
                            }
                            gmat[i * n + j] += acc;
                        }
                    }
                }
            }
            let q: Vec<f64> = perm_b.iter().map(|&i| p[i]).collect();
            for i in 0..n {
                // Softmax row over logits l_ij = -|q_i - p_j| / tau.
                let logits: Vec<f64> = (0..n).map(|j| -(q[i] - p[j]).abs() / tau).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let soft: Vec<f64> = exps.iter().map(|e| e / z).collect();
                // dl_ij/dp_k = c_ij * ([pi_i == k] - [j == k]),
                // c_ij = -sign(q_i - p_j) / tau.
                let cij: Vec<f64> = (0..n)
                    .map(|j| {
                        let d = q[i] - p[j];
                        if d > 0.0 {
                            -1.0 / tau
                        } else if d < 0.0 {
                            1.0 / tau
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let a: Vec<f64> = (0..n).map(|j| gmat[i * n + j] * soft[j]).collect();
                let a_total: f64 = a.iter().sum();
                let s_a: f64 = a.iter().zip(&cij).map(|(av, cv)| av * cv).sum();
                let s_p: f64 = soft.iter().zip(&cij).map(|(sv, cv)| sv * cv).sum();
                for k in 0..n {
                    let mut d = -a[k] * cij[k] + a_total * soft[k] * cij[k];
                    if perm_b[i] == k {
                        d += s_a - a_total * s_p;
                    }
                    bufs[1][k] += d;
                }
            }
        }),
    ))
}

/// Hard frequency gate with a straight-through threshold gradient.
///
/// Keeps bin `f` of the complex spectrum iff `power[f] >= sigmoid(tau)`;
/// `power` must be normalised to `[0, 1]` by the caller (batch statistics in
/// training, running statistics in evaluation). The spectrum gradient passes
/// through kept bins unchanged; the threshold parameter `tau` is trained
/// through a sigmoid relaxation of the gate with the given `sharpness`.
pub fn spectral_gate(
    re: &Tensor,
    im: &Tensor,
    tau: &Tensor,
    power: &[f64],
    sharpness: f64,
) -> Result<(Tensor, Tensor), TensorError> {
    if re.shape() != im.shape() {
        return Err(TensorError::ShapeMismatch(
            "spectral_gate complex parts must share a shape".into(),
        ));
    }
    if tau.len() != 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "spectral_gate threshold must be a scalar, got {:?}",
            tau.shape()
        )));
    }
    let f = *re.shape().last().ok_or_else(|| {
        TensorError::ShapeMismatch("spectral_gate input must have rank >= 1".into())
    })?;
    if power.len() != f {
        return Err(TensorError::ShapeMismatch(format!(
            "spectral_gate got {} power entries for {f} bins",
            power.len()
        )));
    }

    let t = sigmoid_scalar(tau.item());
    let mask: Vec<f64> = power.iter().map(|&pw| if pw >= t { 1.0 } else { 0.0 }).collect();
    // d soft_mask / d tau, shared by every lane.
    let dsoft: Vec<f64> = power
        .iter()
        .map(|&pw| {
            let s = sigmoid_scalar(sharpness * (pw - t));
            -sharpness * s * (1.0 - s) * t * (1.0 - t)
        })
        .collect();

    let gate_one = |part: &Tensor| -> Tensor {
        let xd = part.to_vec();
        let out: Vec<f64> = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v * mask[i % f])
            .collect();
        let (mask, dsoft, xd) = (mask.clone(), dsoft.clone(), xd);
        Tensor::from_op(
            part.shape().to_vec(),
            out,
            vec![part.clone(), tau.clone()],
            Box::new(move |g, bufs| {
                let mut dtau = 0.0;
                for (i, &gv) in g.iter().enumerate() {
                    bufs[0][i] = gv * mask[i % f];
                    dtau += gv * xd[i] * dsoft[i % f];
                }
                bufs[1][0] += dtau;
            }),
        )
    };
    Ok((gate_one(re), gate_one(im)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_segment_is_identity() {
        let x = Tensor::constant(&[1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = Tensor::constant(&[1], vec![0.3]);
        let y = s3_shuffle(&x, &p, 0.1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn segments_order_by_descending_priority() {
        let x = Tensor::constant(&[1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = Tensor::constant(&[3], vec![0.1, 0.9, 0.5]);
        let y = s3_shuffle(&x, &p, 0.1).unwrap();
        // Priorities 0.9 (seg 1), 0.5 (seg 2), 0.1 (seg 0).
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn equal_priorities_keep_original_order() {
        let x = Tensor::constant(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let p = Tensor::constant(&[2], vec![0.5, 0.5]);
        let y = s3_shuffle(&x, &p, 0.1).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn data_gradient_follows_hard_permutation() {
        let x = Tensor::leaf(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let p = Tensor::constant(&[2], vec![0.1, 0.9]);
        let y = s3_shuffle(&x, &p, 0.1).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 1.0, 2.0]);
        let w = Tensor::constant(&[1, 1, 4], vec![10.0, 20.0, 30.0, 40.0]);
        y.mul(&w).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![30.0, 40.0, 10.0, 20.0]);
    }

    #[test]
    fn priority_gradient_is_nonzero_through_straight_through() {
        let x = Tensor::constant(&[1, 1, 4], vec![1.0, -2.0, 3.0, 4.0]);
        let p = Tensor::leaf(&[2], vec![0.2, 0.7]);
        let y = s3_shuffle(&x, &p, 0.1).unwrap();
        let w = Tensor::constant(&[1, 1, 4], vec![1.0, 2.0, -1.0, 0.5]);
        y.mul(&w).sum().backward().unwrap();
        let g = p.grad().unwrap();
        assert!(g.iter().any(|v| *v != 0.0), "surrogate must reach priorities, got {g:?}");
    }

    #[test]
    fn nondividing_segment_count_is_an_error() {
        let x = Tensor::constant(&[1, 1, 5], vec![0.0; 5]);
        let p = Tensor::constant(&[2], vec![0.0, 1.0]);
        assert!(s3_shuffle(&x, &p, 0.1).is_err());
    }

    #[test]
    fn gate_masks_bins_below_threshold_and_reaches_tau() {
        let re = Tensor::leaf(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let im = Tensor::leaf(&[1, 4], vec![0.5, 0.5, 0.5, 0.5]);
        let tau = Tensor::leaf(&[], vec![0.0]); // sigmoid(0) = 0.5
        let power = vec![0.9, 0.2, 0.5, 0.1];
        let (gr, gi) = spectral_gate(&re, &im, &tau, &power, 10.0).unwrap();
        // Bins with power >= 0.5 survive (boundary kept).
        assert_eq!(gr.to_vec(), vec![1.0, 0.0, 3.0, 0.0]);
        assert_eq!(gi.to_vec(), vec![0.5, 0.0, 0.5, 0.0]);
        gr.sum().add(&gi.sum()).backward().unwrap();
        assert_eq!(re.grad().unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
        assert!(tau.grad().unwrap()[0] != 0.0, "threshold must receive a surrogate gradient");
    }
}

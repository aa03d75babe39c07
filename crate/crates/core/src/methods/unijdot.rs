//! Joint feature/label transport with an automatic rejection threshold.
//!
//! The transport cost couples geometry and semantics:
//! `C_ij = alpha * ||f_i^s - f_j^t||^2 + beta * CE(y_i^s, classifier(f_j^t))`,
//! so mass flows toward target samples that are both close in feature space
//! and predicted as the matching class. The balanced entropic plan is frozen
//! and `<plan, C>` minimized, which trains both the backbone (through the
//! distances) and the classifier on target samples (through the transported
//! cross-entropy).
//!
//! Detection scores each sample by top softmax probability minus a penalty
//! `gamma * d_norm` for sitting far from every source prototype, then splits
//! the score histogram with Otsu's threshold; degenerate histograms reject
//! nothing. The prototype distance is taken between L2-normalized vectors so
//! the penalty is comparable across backbones with very different feature
//! norms (the training cost keeps raw squared distances).

use rand_chacha::ChaCha8Rng;

use super::{
    argmax, cross_entropy, pairwise_sq_dists, softmax_rows, LossBreakdown, MethodConfig,
    MethodError, Model, PredictionBatch, PrototypeTracker, Trainer,
};
use crate::ot::sinkhorn;
use crate::tensor::Tensor;

pub struct UnijdotState {
    pub protos: PrototypeTracker,
}

impl UnijdotState {
    pub fn new(n_classes: usize, feature_dim: usize, momentum: f64) -> UnijdotState {
        UnijdotState { protos: PrototypeTracker::new(n_classes, feature_dim, momentum) }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn loss_unijdot(
    model: &Model,
    state: &UnijdotState,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossBreakdown), MethodError> {
    let (fs, ls) = model.forward(src_x, true, rng)?;
    let (ft, lt) = model.forward(tgt_x, true, rng)?;
    let cls = cross_entropy(&ls, src_y)?;
    let bs = src_x.shape()[0];
    let bt = tgt_x.shape()[0];
    let k = model.n_classes;
    if let Some(&bad) = src_y.iter().find(|&&y| y >= k) {
        return Err(MethodError::Batch(format!("label {bad} outside 0..{k}")));
    }

    state.protos.update(&fs.data(), src_y);

    // Joint cost: feature distance plus the cross-entropy a source label
    // assigns to each target prediction, via one-hot x (-log softmax)^T.
    let dist = pairwise_sq_dists(&fs, &ft)?;
    let mut onehot = vec![0.0; bs * k];
    for (i, &y) in src_y.iter().enumerate() {
        onehot[i * k + y] = 1.0;
    }
    let label_cost =
        Tensor::constant(&[bs, k], onehot).matmul(&lt.log_softmax(1)?.neg().permute(&[1, 0])?);
    let cost = dist.scale(cfg.alpha).add(&label_cost.scale(cfg.beta));

    let plan = sinkhorn(
        &cost.data(),
        bs,
        bt,
        &vec![1.0 / bs as f64; bs],
        &vec![1.0 / bt as f64; bt],
        cfg.ot_epsilon,
        cfg.ot_max_iter,
        cfg.ot_tol,
    )?;
    let align = Tensor::constant(&[bs, bt], plan.matrix.clone()).mul(&cost).sum();

    let total = cls.add(&align.scale(cfg.lambda_align));
    let bd = LossBreakdown {
        total: total.item(),
        classification: cls.item(),
        alignment: align.item(),
        auxiliary: 0.0,
    };
    Ok((total, bd))
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_unijdot(
    model: &Model,
    state: &UnijdotState,
    trainer: &mut Trainer,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, MethodError> {
    let (total, bd) = loss_unijdot(model, state, src_x, src_y, tgt_x, cfg, rng)?;
    trainer.step(&total)?;
    Ok(bd)
}

/// Otsu's threshold over `bins` histogram bins: the bin edge maximizing
/// between-class variance. Returns `None` when the histogram cannot be split
/// (fewer than two distinct values, or all mass in one bin) — callers treat
/// that as "reject nothing".
pub fn otsu_threshold(scores: &[f64], bins: usize) -> Option<f64> {
    if scores.len() < 2 || bins < 2 {
        return None;
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_finite() || max - min <= 0.0 {
        return None;
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut sums = vec![0.0; bins];
    for &s in scores {
        let b = (((s - min) / width) as usize).min(bins - 1);
        counts[b] += 1;
        sums[b] += s;
    }
    let total_n = scores.len() as f64;
    let total_sum: f64 = scores.iter().sum();

    let mut best: Option<(f64, usize)> = None;
    let mut n0 = 0.0;
    let mut sum0 = 0.0;
    for t in 1..bins {
        n0 += counts[t - 1] as f64;
        sum0 += sums[t - 1];
        let n1 = total_n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / n0;
        let mu1 = (total_sum - sum0) / n1;
        let var = n0 * n1 * (mu0 - mu1) * (mu0 - mu1);
        if best.map_or(true, |(v, _)| var > v) {
            best = Some((var, t));
        }
    }
    best.map(|(_, t)| min + width * t as f64)
}

pub const OTSU_BINS: usize = 64;

/// Detection over the full target evaluation set so the adaptive threshold
/// sees one stable histogram.
pub fn detect_unijdot(
    model: &Model,
    state: &UnijdotState,
    cfg: &MethodConfig,
    x_all_target: &Tensor,
) -> Result<PredictionBatch, MethodError> {
    let mut r = crate::rng::stream(0, "eval.unused", &[]);
    let (feats, logits) = model.forward(x_all_target, false, &mut r)?;
    let k = model.n_classes;
    let probs = softmax_rows(&logits.data(), k);

    // Distance of each sample to its nearest prototype on the unit sphere,
    // min-max normalized over the batch.
    let d2 = pairwise_sq_dists(
        &state.protos.as_tensor().l2_normalize(1e-12),
        &feats.l2_normalize(1e-12),
    )?;
    let d2d = d2.data();
    let m = x_all_target.shape()[0];
    let mut d: Vec<f64> = (0..m)
        .map(|j| {
            (0..k)
                .map(|i| d2d[i * m + j].max(0.0).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let dmax = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if dmax - dmin > 0.0 {
        for v in d.iter_mut() {
            *v = (*v - dmin) / (dmax - dmin);
        }
    } else {
        d.iter_mut().for_each(|v| *v = 0.0);
    }

    let scores: Vec<f64> = probs
        .chunks(k)
        .zip(&d)
        .map(|(row, &dn)| row[argmax(row)] - cfg.gamma * dn)
        .collect();

    let threshold = otsu_threshold(&scores, OTSU_BINS);
    let labels = probs
        .chunks(k)
        .zip(&scores)
        .map(|(row, &s)| match threshold {
            Some(t) if s < t => PredictionBatch::UNKNOWN,
            _ => argmax(row) as i64,
        })
        .collect();
    Ok(PredictionBatch { labels, scores })
}

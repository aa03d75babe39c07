//! Balanced transport alignment with mass-based rejection.
//!
//! Training solves a balanced entropic transport between source class
//! prototypes and the target batch under uniform marginals and minimizes
//! `<plan, cost>` with the plan frozen. Detection re-solves a *partial*
//! transport over the whole evaluation set: a column (target sample) that
//! attracts transported mass close to its uniform share looks like a common
//! class, one starved of mass does not. Scores are column masses scaled by
//! the sample count, so a uniformly served column scores 1 regardless of set
//! size; samples below `mass_threshold` are rejected.
//!
//! Features and prototypes are L2-normalized before the cost matrix, so
//! distances live on the unit sphere (range [0, 4]) and one entropic scale
//! works across backbones whose raw feature norms differ by orders of
//! magnitude.

use rand_chacha::ChaCha8Rng;

use super::{
    argmax, cross_entropy, pairwise_sq_dists, softmax_rows, LossBreakdown, MethodConfig,
    MethodError, Model, PredictionBatch, PrototypeTracker, Trainer,
};
use crate::ot::{partial_sinkhorn, sinkhorn, transported_mass_per_target};
use crate::tensor::Tensor;

pub struct UniotState {
    pub protos: PrototypeTracker,
}

impl UniotState {
    pub fn new(n_classes: usize, feature_dim: usize, momentum: f64) -> UniotState {
        UniotState { protos: PrototypeTracker::new(n_classes, feature_dim, momentum) }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn loss_uniot(
    model: &Model,
    state: &UniotState,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossBreakdown), MethodError> {
    let (fs, ls) = model.forward(src_x, true, rng)?;
    let (ft, _) = model.forward(tgt_x, true, rng)?;
    let cls = cross_entropy(&ls, src_y)?;

    state.protos.update(&fs.data(), src_y);
    let protos = state.protos.as_tensor().l2_normalize(1e-12);
    let cost = pairwise_sq_dists(&protos, &ft.l2_normalize(1e-12))?;
    let c = model.n_classes;
    let bt = tgt_x.shape()[0];
    let plan = sinkhorn(
        &cost.data(),
        c,
        bt,
        &vec![1.0 / c as f64; c],
        &vec![1.0 / bt as f64; bt],
        cfg.ot_epsilon,
        cfg.ot_max_iter,
        cfg.ot_tol,
    )?;
    let align = Tensor::constant(&[c, bt], plan.matrix.clone()).mul(&cost).sum();

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
pub fn train_step_uniot(
    model: &Model,
    state: &UniotState,
    trainer: &mut Trainer,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, MethodError> {
    let (total, bd) = loss_uniot(model, state, src_x, src_y, tgt_x, cfg, rng)?;
    trainer.step(&total)?;
    Ok(bd)
}

/// Detection over the full target evaluation set in one plan, avoiding
/// batch-composition variance in the scores.
pub fn detect_uniot(
    model: &Model,
    state: &UniotState,
    cfg: &MethodConfig,
    x_all_target: &Tensor,
) -> Result<PredictionBatch, MethodError> {
    let mut r = crate::rng::stream(0, "eval.unused", &[]);
    let (feats, logits) = model.forward(x_all_target, false, &mut r)?;
    let k = model.n_classes;
    let m = x_all_target.shape()[0];
    let protos = state.protos.as_tensor().l2_normalize(1e-12);
    let cost = pairwise_sq_dists(&protos, &feats.l2_normalize(1e-12))?;
    let plan = partial_sinkhorn(
        &cost.data(),
        k,
        m,
        &vec![1.0 / k as f64; k],
        &vec![1.0 / m as f64; m],
        cfg.fill_mass,
        cfg.ot_epsilon,
        cfg.ot_max_iter,
        cfg.ot_tol,
    )?;
    let scores: Vec<f64> =
        transported_mass_per_target(&plan).iter().map(|&s| s * m as f64).collect();

    let labels = softmax_rows(&logits.data(), k)
        .chunks(k)
        .zip(&scores)
        .map(|(row, &s)| {
            if s < cfg.mass_threshold {
                PredictionBatch::UNKNOWN
            } else {
                argmax(row) as i64
            }
        })
        .collect();
    Ok(PredictionBatch { labels, scores })
}

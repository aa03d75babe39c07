//! Prototype-to-target partial transport alignment.
//!
//! Source class prototypes are running means of source features. Each step
//! solves a partial entropic transport between the prototypes (rows) and the
//! target batch features (columns) under uniform marginals, moving only a
//! `mass` fraction so target-private samples can stay unmatched. The plan is
//! then frozen and `<plan, cost>` is minimized, pulling matched target
//! features toward their prototypes. Detection keeps a sample when the
//! classifier's top softmax probability reaches `delta`.

use rand_chacha::ChaCha8Rng;

use super::{
    argmax, cross_entropy, pairwise_sq_dists, softmax_rows, LossBreakdown, MethodConfig,
    MethodError, Model, PredictionBatch, PrototypeTracker, Trainer,
};
use crate::ot::partial_sinkhorn;
use crate::tensor::Tensor;

pub struct PpotState {
    pub protos: PrototypeTracker,
}

impl PpotState {
    pub fn new(n_classes: usize, feature_dim: usize, momentum: f64) -> PpotState {
        PpotState { protos: PrototypeTracker::new(n_classes, feature_dim, momentum) }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn loss_ppot(
    model: &Model,
    state: &PpotState,
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
    let protos = state.protos.as_tensor(); // constant [C, K]
    let cost = pairwise_sq_dists(&protos, &ft)?; // grads reach ft only
    let c = model.n_classes;
    let bt = tgt_x.shape()[0];
    let plan = partial_sinkhorn(
        &cost.data(),
        c,
        bt,
        &vec![1.0 / c as f64; c],
        &vec![1.0 / bt as f64; bt],
        cfg.ot_mass,
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
pub fn train_step_ppot(
    model: &Model,
    state: &PpotState,
    trainer: &mut Trainer,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, MethodError> {
    let (total, bd) = loss_ppot(model, state, src_x, src_y, tgt_x, cfg, rng)?;
    trainer.step(&total)?;
    Ok(bd)
}

pub fn detect_ppot(
    model: &Model,
    cfg: &MethodConfig,
    x: &Tensor,
) -> Result<PredictionBatch, MethodError> {
    let logits = model.eval_logits(x)?;
    let k = model.n_classes;
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for row in softmax_rows(&logits.data(), k).chunks(k) {
        let c = argmax(row);
        scores.push(row[c]);
        labels.push(if row[c] < cfg.delta { PredictionBatch::UNKNOWN } else { c as i64 });
    }
    Ok(PredictionBatch { labels, scores })
}

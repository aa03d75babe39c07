//! One-vs-all open-set classification.
//!
//! Beside the closed-set classifier, every class gets a binary head (one
//! logit; positive side means "this class"). On source batches each head is
//! trained positively on its own class and negatively on the hardest other
//! class (the highest-scoring wrong head), which tightens the decision
//! boundaries without sweeping over all negatives. On target batches the
//! binary entropy of every head is minimized so target samples commit to
//! either side. A sample is rejected when the head of its predicted class
//! votes negative by strict majority.

use rand_chacha::ChaCha8Rng;

use super::{
    argmax, cross_entropy, softmax_rows, LossBreakdown, MethodConfig, MethodError, Model,
    PredictionBatch, Trainer,
};
use crate::nn::Linear;
use crate::tensor::{Parameter, Tensor};

pub struct OvanetHeads {
    /// One positive-side logit per class: `[K] -> [|Y^s|]`.
    ova: Linear,
}

impl OvanetHeads {
    pub fn new(feature_dim: usize, n_classes: usize, init_seed: u64) -> OvanetHeads {
        OvanetHeads { ova: Linear::new(init_seed, "ovanet.ova", feature_dim, n_classes) }
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.ova.params()
    }
}

/// For each sample, the wrong class whose OVA logit is largest.
fn hard_negatives(logits: &[f64], labels: &[usize], k: usize) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits[i * k..(i + 1) * k];
            let mut best = usize::MAX;
            for (c, &v) in row.iter().enumerate() {
                if c != y && (best == usize::MAX || v > row[best]) {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn loss_ovanet(
    model: &Model,
    heads: &OvanetHeads,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossBreakdown), MethodError> {
    let (fs, ls) = model.forward(src_x, true, rng)?;
    let (ft, _) = model.forward(tgt_x, true, rng)?;
    let cls = cross_entropy(&ls, src_y)?;
    let k = model.n_classes;
    if let Some(&bad) = src_y.iter().find(|&&y| y >= k) {
        return Err(MethodError::Batch(format!("label {bad} outside 0..{k}")));
    }

    // Source OVA: -ln sigmoid(z_y) + -ln(1 - sigmoid(z_hard)), via softplus.
    let zs = heads.ova.forward(&fs);
    let pos = zs.take_per_row(src_y)?.neg().softplus().mean();
    let ova = if k > 1 {
        let hard = hard_negatives(&zs.data(), src_y, k);
        pos.add(&zs.take_per_row(&hard)?.softplus().mean())
    } else {
        pos
    };

    // Target: binary entropy of each head,
    // H(sigmoid(z)) = sigmoid(z) softplus(-z) + sigmoid(-z) softplus(z).
    let zt = heads.ova.forward(&ft);
    let znt = zt.neg();
    let ent = zt.sigmoid().mul(&znt.softplus()).add(&znt.sigmoid().mul(&zt.softplus())).mean();

    let total = cls.add(&ova.scale(cfg.lambda_aux)).add(&ent.scale(cfg.lambda_align));
    let bd = LossBreakdown {
        total: total.item(),
        classification: cls.item(),
        alignment: ent.item(),
        auxiliary: ova.item(),
    };
    Ok((total, bd))
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_ovanet(
    model: &Model,
    heads: &OvanetHeads,
    trainer: &mut Trainer,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, MethodError> {
    let (total, bd) = loss_ovanet(model, heads, src_x, src_y, tgt_x, cfg, rng)?;
    trainer.step(&total)?;
    Ok(bd)
}

pub fn detect_ovanet(
    model: &Model,
    heads: &OvanetHeads,
    x: &Tensor,
) -> Result<PredictionBatch, MethodError> {
    let mut r = crate::rng::stream(0, "eval.unused", &[]);
    let (feats, logits) = model.forward(x, false, &mut r)?;
    let k = model.n_classes;
    let probs = softmax_rows(&logits.data(), k);
    let z = heads.ova.forward(&feats);
    let zd = z.data();

    let mut labels = Vec::with_capacity(probs.len() / k);
    let mut scores = Vec::with_capacity(labels.capacity());
    for (i, row) in probs.chunks(k).enumerate() {
        let c = argmax(row);
        let p_pos = crate::tensor::sigmoid_scalar(zd[i * k + c]);
        scores.push(p_pos);
        // Reject only on a strict negative majority; exactly 0.5 keeps c.
        labels.push(if 1.0 - p_pos > 0.5 { PredictionBatch::UNKNOWN } else { c as i64 });
    }
    Ok(PredictionBatch { labels, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneConfig, BackboneKind};
    use crate::rng;

    fn tiny(n_classes: usize) -> (Model, OvanetHeads, MethodConfig) {
        let bcfg = BackboneConfig {
            kind: BackboneKind::Cnn,
            in_channels: 1,
            seq_len: 8,
            feature_dim: 4,
            cnn_channels: (3, 3),
            cnn_kernels: (3, 3, 3),
            dropout: 0.0,
            ..BackboneConfig::default()
        };
        let model = Model::new(&bcfg, n_classes, 3).unwrap();
        let heads = OvanetHeads::new(4, n_classes, 3);
        (model, heads, MethodConfig::default())
    }

    #[test]
    fn hard_negative_skips_the_true_class() {
        let logits = vec![5.0, 1.0, 3.0, /* row 2 */ 0.0, 2.0, 9.0];
        assert_eq!(hard_negatives(&logits, &[0, 2], 3), vec![2, 1]);
    }

    #[test]
    fn single_class_loss_is_finite() {
        let (model, heads, cfg) = tiny(1);
        let mut r = rng::stream(0, "ova-single", &[]);
        let sx = Tensor::constant(&[3, 1, 8], (0..24).map(|i| (i as f64 * 0.4).sin()).collect());
        let tx = Tensor::constant(&[2, 1, 8], (0..16).map(|i| (i as f64 * 0.9).cos()).collect());
        let (total, bd) = loss_ovanet(&model, &heads, &sx, &[0, 0, 0], &tx, &cfg, &mut r).unwrap();
        assert!(total.item().is_finite());
        assert!(bd.auxiliary.is_finite());
    }

    #[test]
    fn breakdown_identity_holds() {
        let (model, heads, mut cfg) = tiny(3);
        cfg.lambda_align = 0.3;
        cfg.lambda_aux = 0.7;
        let mut r = rng::stream(2, "ova-id", &[]);
        let sx = Tensor::constant(&[4, 1, 8], (0..32).map(|i| (i as f64 * 0.13).sin()).collect());
        let tx = Tensor::constant(&[4, 1, 8], (0..32).map(|i| (i as f64 * 0.31).cos()).collect());
        let (_, bd) = loss_ovanet(&model, &heads, &sx, &[0, 1, 2, 1], &tx, &cfg, &mut r).unwrap();
        let expect = bd.classification + 0.3 * bd.alignment + 0.7 * bd.auxiliary;
        assert!((bd.total - expect).abs() < 1e-9);
    }

    #[test]
    fn rejection_follows_the_predicted_classes_head() {
        // Build a head state by hand: make class-0 OVA strongly negative.
        let (model, heads, _) = tiny(2);
        let x = Tensor::constant(&[2, 1, 8], (0..16).map(|i| (i as f64 * 0.7).sin()).collect());
        let pred = detect_ovanet(&model, &heads, &x).unwrap();
        for (&l, &s) in pred.labels.iter().zip(&pred.scores) {
            if 1.0 - s > 0.5 {
                assert_eq!(l, PredictionBatch::UNKNOWN);
            } else {
                assert!(l >= 0);
            }
        }
    }
}

//! Neighborhood clustering with entropy separation.
//!
//! Each target feature is compared (cosine similarity over temperature) to a
//! memory bank holding the latest feature of every other target sample plus
//! the classifier's class weight vectors as source prototypes. Minimizing
//! the entropy of that similarity distribution pulls each sample toward its
//! nearest neighborhood, whichever domain it came from. A second term pushes
//! the per-sample classifier entropy away from a margin `rho`, so samples
//! commit to being confidently known (entropy below) or confidently unknown
//! (entropy above). Detection thresholds the same entropy at `rho`.

use rand_chacha::ChaCha8Rng;

use super::{
    argmax, cross_entropy, softmax_rows, LossBreakdown, MemoryBank, MethodConfig, MethodError,
    Model, PredictionBatch, Trainer,
};
use crate::tensor::Tensor;

/// Additive logit mask for excluded similarity columns.
const MASKED: f64 = -1e9;

pub struct DanceState {
    pub bank: MemoryBank,
}

impl DanceState {
    /// `n_target` is the number of distinct target samples the bank indexes.
    pub fn new(n_target: usize, feature_dim: usize) -> DanceState {
        DanceState { bank: MemoryBank::new(n_target, feature_dim) }
    }
}

/// Margin between "known" and "unknown" classifier entropy.
fn rho(cfg: &MethodConfig, n_classes: usize) -> f64 {
    cfg.rho_margin * (n_classes as f64).ln()
}

/// Classifier weight columns as L2-normalized prototype rows `[C, K]`,
/// detached from the graph.
fn class_prototypes(model: &Model) -> (Vec<f64>, usize) {
    let w = model.classifier.weight.data(); // [K, C]
    let k = model.classifier.weight.shape()[0];
    let c = model.classifier.weight.shape()[1];
    let mut protos = vec![0.0; c * k];
    for j in 0..c {
        let mut norm = 0.0;
        for i in 0..k {
            norm += w[i * c + j] * w[i * c + j];
        }
        let norm = norm.sqrt().max(1e-12);
        for i in 0..k {
            protos[j * k + i] = w[i * c + j] / norm;
        }
    }
    (protos, c)
}

#[allow(clippy::too_many_arguments)]
pub fn loss_dance(
    model: &Model,
    state: &DanceState,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    tgt_idx: &[usize],
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossBreakdown), MethodError> {
    let (_, ls) = model.forward(src_x, true, rng)?;
    let (ft_raw, lt) = model.forward(tgt_x, true, rng)?;
    let cls = cross_entropy(&ls, src_y)?;

    let bt = tgt_x.shape()[0];
    if tgt_idx.len() != bt {
        return Err(MethodError::Batch(format!(
            "{} bank indices for a target batch of {bt}",
            tgt_idx.len()
        )));
    }
    let n = state.bank.len();
    if let Some(&bad) = tgt_idx.iter().find(|&&i| i >= n) {
        return Err(MethodError::Batch(format!("bank index {bad} out of {n}")));
    }

    // Similarities to [bank rows | class prototypes], own slot and unfilled
    // slots masked out.
    let feature_dim = ft_raw.shape()[1];
    let ft = ft_raw.l2_normalize(1e-12);
    let (bank_rows, filled) = state.bank.snapshot();
    let (proto_rows, c) = class_prototypes(model);
    let cols = n + c;
    let mut mem_t = vec![0.0; feature_dim * cols];
    let bank_data = bank_rows.data();
    for row in 0..n {
        for d in 0..feature_dim {
            mem_t[d * cols + row] = bank_data[row * feature_dim + d];
        }
    }
    for row in 0..c {
        for d in 0..feature_dim {
            mem_t[d * cols + n + row] = proto_rows[row * feature_dim + d];
        }
    }
    let mut mask = vec![0.0; bt * cols];
    for (i, row) in mask.chunks_mut(cols).enumerate() {
        for (j, &full) in filled.iter().enumerate() {
            if !full {
                row[j] = MASKED;
            }
        }
        row[tgt_idx[i]] = MASKED;
    }
    let sims = ft
        .matmul(&Tensor::constant(&[feature_dim, cols], mem_t))
        .scale(1.0 / cfg.temperature)
        .add(&Tensor::constant(&[bt, cols], mask));
    let p = sims.softmax(1)?;
    let logp = sims.log_softmax(1)?;
    let align = p.mul(&logp).sum_axis(1)?.neg().mean();

    // Entropy separation: push per-sample classifier entropy away from rho.
    let pt = lt.softmax(1)?;
    let logpt = lt.log_softmax(1)?;
    let h = pt.mul(&logpt).sum_axis(1)?.neg();
    let aux = h.add_scalar(-rho(cfg, model.n_classes)).abs().mean().neg();

    let total = cls.add(&align.scale(cfg.lambda_align)).add(&aux.scale(cfg.lambda_aux));
    let bd = LossBreakdown {
        total: total.item(),
        classification: cls.item(),
        alignment: align.item(),
        auxiliary: aux.item(),
    };

    // Refresh the bank with this batch's features (post-loss state).
    state.bank.store(tgt_idx, &ft_raw.data())?;
    Ok((total, bd))
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_dance(
    model: &Model,
    state: &DanceState,
    trainer: &mut Trainer,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    tgt_idx: &[usize],
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, MethodError> {
    let (total, bd) = loss_dance(model, state, src_x, src_y, tgt_x, tgt_idx, cfg, rng)?;
    trainer.step(&total)?;
    Ok(bd)
}

pub fn detect_dance(
    model: &Model,
    cfg: &MethodConfig,
    x: &Tensor,
) -> Result<PredictionBatch, MethodError> {
    let logits = model.eval_logits(x)?;
    let k = model.n_classes;
    let margin = rho(cfg, k);
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for row in softmax_rows(&logits.data(), k).chunks(k) {
        let h: f64 = row.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        scores.push(h);
        labels.push(if h > margin { PredictionBatch::UNKNOWN } else { argmax(row) as i64 });
    }
    Ok(PredictionBatch { labels, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::{BackboneConfig, BackboneKind};
    use crate::rng;

    fn tiny() -> (Model, DanceState, MethodConfig) {
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
        let model = Model::new(&bcfg, 4, 5).unwrap();
        let state = DanceState::new(6, 4);
        (model, state, MethodConfig::default())
    }

    #[test]
    fn lone_target_sample_clusters_against_prototypes_only() {
        let (model, state, cfg) = tiny();
        let mut r = rng::stream(0, "dance-lone", &[]);
        let sx = Tensor::constant(&[4, 1, 8], (0..32).map(|i| (i as f64 * 0.2).sin()).collect());
        let tx = Tensor::constant(&[1, 1, 8], (0..8).map(|i| (i as f64 * 0.5).cos()).collect());
        let (total, bd) =
            loss_dance(&model, &state, &sx, &[0, 1, 2, 3], &tx, &[2], &cfg, &mut r).unwrap();
        assert!(total.item().is_finite());
        // Only the 4 prototype columns are unmasked: entropy <= ln 4.
        assert!(bd.alignment <= 4.0_f64.ln() + 1e-9);
    }

    #[test]
    fn bank_row_matches_freshly_stored_feature() {
        let (model, state, cfg) = tiny();
        let mut r = rng::stream(1, "dance-bank", &[]);
        let sx = Tensor::constant(&[2, 1, 8], (0..16).map(|i| (i as f64 * 0.2).sin()).collect());
        let tx = Tensor::constant(&[2, 1, 8], (0..16).map(|i| (i as f64 * 0.4).cos()).collect());
        loss_dance(&model, &state, &sx, &[0, 1], &tx, &[1, 4], &cfg, &mut r).unwrap();
        let mut r2 = rng::stream(9, "dance-bank2", &[]);
        let (f, _) = model.forward(&tx, false, &mut r2).unwrap();
        let fd = f.data();
        let (rows, filled) = state.bank.snapshot();
        assert_eq!(filled, vec![false, true, false, false, true, false]);
        // Row 1 must equal the normalized feature of target sample 0.
        let norm = (0..4).map(|d| fd[d] * fd[d]).sum::<f64>().sqrt().max(1e-12);
        for d in 0..4 {
            assert!((rows.to_vec()[4 + d] - fd[d] / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_splits_on_the_entropy_margin() {
        let (model, _, cfg) = tiny();
        let x = Tensor::constant(&[3, 1, 8], (0..24).map(|i| (i as f64 * 0.3).sin()).collect());
        let pred = detect_dance(&model, &cfg, &x).unwrap();
        let margin = 0.5 * 4.0_f64.ln();
        for (&l, &s) in pred.labels.iter().zip(&pred.scores) {
            assert_eq!(l == PredictionBatch::UNKNOWN, s > margin);
        }
    }

    #[test]
    fn hand_entropy_case_is_rejected() {
        // p = (0.7, 0.1, 0.1, 0.1): H ~ 0.9404 > ln(4)/2 ~ 0.6931.
        let h: f64 = [0.7, 0.1, 0.1, 0.1].iter().map(|&p: &f64| -p * p.ln()).sum();
        assert!((h - 0.940_447).abs() < 1e-5);
        assert!(h > 0.5 * 4.0_f64.ln());
    }
}

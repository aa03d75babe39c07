//! Adversarial alignment with entropy-based rejection.
//!
//! Two binary domain heads sit on the backbone features: a discriminator
//! behind a gradient-reversal layer (the adversarial game that aligns the
//! domains) and a plain domain classifier trained on detached features.
//! Detection thresholds an entropy score from a configurable source: the
//! closed-set classifier's normalized entropy (default — it stays
//! informative whatever the domain heads do) or the non-adversarial domain
//! head's binary entropy, which collapses to ln 2 once feature alignment
//! succeeds and is kept for comparison.
//!
//! The alignment weight enters through the reversal coefficient
//! (`grl_lambda * lambda_align`) rather than by scaling the discriminator
//! loss, so at weight zero the backbone receives no alignment gradient while
//! the discriminator itself keeps training.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    argmax, cross_entropy, softmax_rows, LossBreakdown, MethodConfig, MethodError, Model,
    PredictionBatch, Trainer,
};
use crate::nn::Mlp;
use crate::tensor::{Parameter, Tensor};

/// Which entropy the detector thresholds: the binary domain head (the
/// literal reading) or the closed-set classifier (normalized to [0, 1]).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    DomainEntropy,
    TaskEntropy,
}

pub struct UanHeads {
    /// Adversarial discriminator (behind gradient reversal).
    disc: Mlp,
    /// Non-adversarial domain classifier (detached features).
    domain: Mlp,
}

impl UanHeads {
    pub fn new(feature_dim: usize, init_seed: u64) -> UanHeads {
        UanHeads {
            disc: Mlp::new(init_seed, "uan.disc", feature_dim, feature_dim, 1),
            domain: Mlp::new(init_seed, "uan.domain", feature_dim, feature_dim, 1),
        }
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut p = self.disc.params();
        p.extend(self.domain.params());
        p
    }

    /// Probability of "source" from the non-adversarial head, per sample.
    fn domain_probs(&self, feats: &Tensor) -> Vec<f64> {
        self.domain
            .forward(feats)
            .to_vec()
            .iter()
            .map(|&z| crate::tensor::sigmoid_scalar(z))
            .collect()
    }
}

/// Mean binary cross-entropy over both domains: source logits should say 1,
/// target logits 0. Uses `-ln sigmoid(z) = softplus(-z)`.
fn domain_bce(z_src: &Tensor, z_tgt: &Tensor) -> Result<Tensor, MethodError> {
    let n = (z_src.len() + z_tgt.len()) as f64;
    let s = z_src.neg().softplus().sum().add(&z_tgt.softplus().sum());
    Ok(s.scale(1.0 / n))
}

pub fn loss_uan(
    model: &Model,
    heads: &UanHeads,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LossBreakdown), MethodError> {
    let (fs, ls) = model.forward(src_x, true, rng)?;
    let (ft, _) = model.forward(tgt_x, true, rng)?;
    let cls = cross_entropy(&ls, src_y)?;

    let coef = cfg.grl_lambda * cfg.lambda_align;
    let align = domain_bce(
        &heads.disc.forward(&fs.gradient_reversal(coef)),
        &heads.disc.forward(&ft.gradient_reversal(coef)),
    )?;
    let aux = domain_bce(
        &heads.domain.forward(&fs.detach()),
        &heads.domain.forward(&ft.detach()),
    )?;

    let total = cls.add(&align).add(&aux.scale(cfg.lambda_aux));
    let bd = LossBreakdown {
        total: total.item(),
        classification: cls.item(),
        alignment: align.item(),
        auxiliary: aux.item(),
    };
    Ok((total, bd))
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_uan(
    model: &Model,
    heads: &UanHeads,
    trainer: &mut Trainer,
    src_x: &Tensor,
    src_y: &[usize],
    tgt_x: &Tensor,
    cfg: &MethodConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown, MethodError> {
    let (total, bd) = loss_uan(model, heads, src_x, src_y, tgt_x, cfg, rng)?;
    trainer.step(&total)?;
    Ok(bd)
}

/// Entropy of a Bernoulli(p), zero at the endpoints.
fn binary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    h
}

pub fn detect_uan(
    model: &Model,
    heads: &UanHeads,
    cfg: &MethodConfig,
    x: &Tensor,
) -> Result<PredictionBatch, MethodError> {
    let mut r = crate::rng::stream(0, "eval.unused", &[]);
    let (feats, logits) = model.forward(x, false, &mut r)?;
    let k = model.n_classes;
    let probs = softmax_rows(&logits.data(), k);

    let scores: Vec<f64> = match cfg.score_source {
        ScoreSource::DomainEntropy => {
            heads.domain_probs(&feats).iter().map(|&p| binary_entropy(p)).collect()
        }
        ScoreSource::TaskEntropy => probs
            .chunks(k)
            .map(|row| {
                if k < 2 {
                    return 0.0;
                }
                let h: f64 = row.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
                h / (k as f64).ln()
            })
            .collect(),
    };

    let labels = scores
        .iter()
        .zip(probs.chunks(k))
        .map(|(&s, row)| {
            if s > cfg.w0 {
                PredictionBatch::UNKNOWN
            } else {
                argmax(row) as i64
            }
        })
        .collect();
    Ok(PredictionBatch { labels, scores })
}

//! One benchmark trial: restrict the domain pair to the scenario's label
//! sets, train a method for a fixed number of epochs on labelled source
//! plus unlabelled target-train data, then score H on the held-out target
//! test split.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{h_score, split_target, DomainScenario, HScoreReport, ParamPoint, ProtocolError};
use crate::backbones::BackboneConfig;
use crate::data::{MultiDomainDataset, TimeSeriesDataset};
use crate::methods::{MethodConfig, MethodError, MethodKind, PredictionBatch, UnidaMethod};
use crate::ot::OtError;
use crate::rng;
use crate::tensor::Tensor;

/// Knobs of the training loop that are part of the protocol rather than the
/// method: every trial trains for the same number of epochs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrialSettings {
    pub epochs: usize,
    /// Fraction of the target domain used for training (rest is test).
    pub split_ratio: f64,
}

impl Default for TrialSettings {
    fn default() -> Self {
        TrialSettings { epochs: 20, split_ratio: 0.8 }
    }
}

/// Everything recorded about one trial; append-only once written.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub hyperparams: ParamPoint,
    pub seed: u64,
    pub scenario: DomainScenario,
    pub report: HScoreReport,
    /// Seconds spent training and evaluating (excluded from determinism
    /// guarantees).
    pub wall_time: f64,
    /// True when training diverged; such trials score 0 and stay in the
    /// record instead of being resampled.
    pub failed: bool,
}

fn batch_tensor(ds: &TimeSeriesDataset, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * ds.d * ds.t);
    for &i in idx {
        data.extend_from_slice(ds.sample(i));
    }
    Tensor::constant(&[idx.len(), ds.d, ds.t], data)
}

/// Divergence shows up either as a non-finite loss or as a transport solve
/// on costs that blew up; both mark the trial failed rather than aborting
/// the whole benchmark.
fn is_divergence(e: &MethodError) -> bool {
    matches!(e, MethodError::Diverged(_) | MethodError::Transport(OtError::Cost(_)))
}

/// Trains `kind` on the scenario's source/target pair and scores it on the
/// target test split. Deterministic per seed except for `wall_time`.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    dataset: &MultiDomainDataset,
    scenario: &DomainScenario,
    kind: MethodKind,
    bcfg: &BackboneConfig,
    mcfg: &MethodConfig,
    hyperparams: &ParamPoint,
    settings: &TrialSettings,
    seed: u64,
) -> Result<TrialRecord, ProtocolError> {
    let start = Instant::now();
    if settings.epochs == 0 {
        return Err(ProtocolError::Selection("trial needs at least one epoch".into()));
    }

    let src = dataset.domain(&scenario.source_id)?.filter_classes(&scenario.source_classes());
    let tgt = dataset.domain(&scenario.target_id)?.filter_classes(&scenario.target_classes());
    if src.n == 0 || tgt.n == 0 {
        return Err(ProtocolError::Scenario(format!(
            "scenario {} leaves an empty domain ({} source, {} target samples)",
            scenario.label(),
            src.n,
            tgt.n
        )));
    }

    // The classifier is indexed by position in the sorted source label set.
    let class_map = scenario.source_classes();
    let class_index: HashMap<i64, usize> =
        class_map.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let src_y: Vec<usize> = src
        .labels
        .iter()
        .map(|l| {
            class_index.get(l).copied().ok_or_else(|| {
                ProtocolError::Scenario(format!("source label {l} outside the scenario label set"))
            })
        })
        .collect::<Result<_, _>>()?;

    let (tr_idx, ts_idx) = split_target(&tgt, settings.split_ratio, seed)?;
    let n_tr = tr_idx.len();

    let mut method =
        UnidaMethod::new(kind, bcfg, mcfg.clone(), class_map.len(), n_tr, seed)?;
    let bs = mcfg.batch_size.min(src.n).min(n_tr).max(1);
    let steps = src.n.div_ceil(bs);
    let mut train_rng = rng::stream(seed, "trial.dropout", &[]);

    let mut failed = false;
    'training: for epoch in 0..settings.epochs {
        let mut src_order: Vec<usize> = (0..src.n).collect();
        src_order.shuffle(&mut rng::stream(seed, "trial.src", &[epoch as u64]));
        let mut tgt_order: Vec<usize> = (0..n_tr).collect();
        tgt_order.shuffle(&mut rng::stream(seed, "trial.tgt", &[epoch as u64]));

        let mut cursor = 0;
        for step in 0..steps {
            let sb = &src_order[step * bs..((step + 1) * bs).min(src.n)];
            let mut tb = Vec::with_capacity(sb.len());
            for _ in 0..sb.len() {
                tb.push(tgt_order[cursor % n_tr]);
                cursor += 1;
            }
            let sx = batch_tensor(&src, sb);
            let sy: Vec<usize> = sb.iter().map(|&i| src_y[i]).collect();
            let tx_idx: Vec<usize> = tb.iter().map(|&p| tr_idx[p]).collect();
            let tx = batch_tensor(&tgt, &tx_idx);
            match method.train_step(&sx, &sy, &tx, &tb, &mut train_rng) {
                Ok(_) => {}
                Err(e) if is_divergence(&e) => {
                    failed = true;
                    break 'training;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    let record = |report: HScoreReport, failed: bool| TrialRecord {
        hyperparams: hyperparams.clone(),
        seed,
        scenario: scenario.clone(),
        report,
        wall_time: start.elapsed().as_secs_f64(),
        failed,
    };
    let zero = HScoreReport { a_common: 0.0, a_unknown: 0.0, h_score: 0.0 };
    if failed {
        return Ok(record(zero, true));
    }

    let test_x = batch_tensor(&tgt, &ts_idx);
    let pred = match method.predict(&test_x) {
        Ok(p) => p,
        Err(e) if is_divergence(&e) => return Ok(record(zero, true)),
        Err(e) => return Err(e.into()),
    };
    if pred.scores.iter().any(|s| !s.is_finite()) {
        return Ok(record(zero, true));
    }
    let mut mapped = Vec::with_capacity(pred.labels.len());
    for &l in &pred.labels {
        if l == PredictionBatch::UNKNOWN {
            mapped.push(PredictionBatch::UNKNOWN);
        } else {
            let c = class_map.get(l as usize).copied().ok_or_else(|| {
                ProtocolError::Score(format!("predicted class index {l} out of range"))
            })?;
            mapped.push(c);
        }
    }
    let truth: Vec<i64> = ts_idx.iter().map(|&i| tgt.labels[i]).collect();
    let report = h_score(&mapped, &truth, scenario)?;
    Ok(record(report, false))
}

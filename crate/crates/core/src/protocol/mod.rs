//! Evaluation protocol: scenario construction, the H-score metric,
//! stratified target splits, single-trial training, Bayesian hyperparameter
//! search, and the model-selection loop that ties them together.
//!
//! A *scenario* is an ordered domain pair with one class removed from the
//! source and a different one removed from the target, so that the label
//! sets partially overlap: the class missing from the target is
//! source-private, the class missing from the source appears in the target
//! as "unknown". Methods are scored by the harmonic mean of their accuracy
//! on common-class samples and their rejection accuracy on target-private
//! samples (the H-score).

mod bayes;
mod selection;
mod trial;

pub use bayes::{apply_params, bayes_suggest, ParamDomain, ParamPoint, ParamValue, SearchSpace};
pub use selection::{
    model_selection, sample_scenarios, ScenarioSummary, SelectionConfig, SelectionOutcome,
};
pub use trial::{run_trial, TrialRecord, TrialSettings};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, TimeSeriesDataset};
use crate::methods::MethodError;
use crate::rng;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("scoring error: {0}")]
    Score(String),
    #[error("search error: {0}")]
    Search(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error(transparent)]
    Method(#[from] MethodError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// One adaptation task: adapt from `source_id` to `target_id` with one class
/// removed from each side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainScenario {
    pub source_id: String,
    pub target_id: String,
    pub removed_source_class: i64,
    pub removed_target_class: i64,
    /// Classes present on both sides.
    pub common_set: Vec<i64>,
    /// Present in the source only (never seen in the target).
    pub source_private_set: Vec<i64>,
    /// Present in the target only (must be rejected as unknown).
    pub target_private_set: Vec<i64>,
}

impl DomainScenario {
    /// Source label set (common plus source-private), sorted.
    pub fn source_classes(&self) -> Vec<i64> {
        let mut v = self.common_set.clone();
        v.extend(&self.source_private_set);
        v.sort_unstable();
        v
    }

    /// Target label set (common plus target-private), sorted.
    pub fn target_classes(&self) -> Vec<i64> {
        let mut v = self.common_set.clone();
        v.extend(&self.target_private_set);
        v.sort_unstable();
        v
    }

    /// Short human-readable tag, e.g. `a->b -3/-0`.
    pub fn label(&self) -> String {
        format!(
            "{}->{} -{}/-{}",
            self.source_id, self.target_id, self.removed_source_class, self.removed_target_class
        )
    }
}

/// Builds a scenario over the label set `0..n_classes` by removing
/// `removed_source_class` from the source and `removed_target_class` from
/// the target.
pub fn build_scenario(
    n_classes: usize,
    source_id: &str,
    target_id: &str,
    removed_source_class: i64,
    removed_target_class: i64,
) -> Result<DomainScenario, ProtocolError> {
    if source_id == target_id {
        return Err(ProtocolError::Scenario(format!(
            "source and target must differ, both are {source_id:?}"
        )));
    }
    for (what, c) in [("source", removed_source_class), ("target", removed_target_class)] {
        if c < 0 || c as usize >= n_classes {
            return Err(ProtocolError::Scenario(format!(
                "removed {what} class {c} outside [0, {n_classes})"
            )));
        }
    }
    if removed_source_class == removed_target_class {
        return Err(ProtocolError::Scenario(format!(
            "removing class {removed_source_class} from both sides leaves no private classes"
        )));
    }
    let common: Vec<i64> = (0..n_classes as i64)
        .filter(|&c| c != removed_source_class && c != removed_target_class)
        .collect();
    Ok(DomainScenario {
        source_id: source_id.to_string(),
        target_id: target_id.to_string(),
        removed_source_class,
        removed_target_class,
        common_set: common,
        // The class absent from the target stays in the source, and vice
        // versa.
        source_private_set: vec![removed_target_class],
        target_private_set: vec![removed_source_class],
    })
}

/// Accuracy on common classes, rejection accuracy on target-private
/// samples, and their harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HScoreReport {
    pub a_common: f64,
    pub a_unknown: f64,
    pub h_score: f64,
}

/// Harmonic mean `2ab / (a + b)`, defined as 0 when both terms are 0.
pub fn h_score_value(a_common: f64, a_unknown: f64) -> f64 {
    if a_common + a_unknown == 0.0 {
        0.0
    } else {
        2.0 * a_common * a_unknown / (a_common + a_unknown)
    }
}

/// Scores predictions (`-1` = unknown) against true target labels.
/// Every true label must be in the scenario's common or target-private set,
/// and both subsets must be represented.
pub fn h_score(
    predictions: &[i64],
    true_labels: &[i64],
    scenario: &DomainScenario,
) -> Result<HScoreReport, ProtocolError> {
    if predictions.len() != true_labels.len() {
        return Err(ProtocolError::Score(format!(
            "{} predictions for {} labels",
            predictions.len(),
            true_labels.len()
        )));
    }
    let (mut n_c, mut ok_c, mut n_u, mut ok_u) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(true_labels) {
        if scenario.common_set.contains(&t) {
            n_c += 1;
            if p == t {
                ok_c += 1;
            }
        } else if scenario.target_private_set.contains(&t) {
            n_u += 1;
            if p == -1 {
                ok_u += 1;
            }
        } else {
            return Err(ProtocolError::Score(format!(
                "true label {t} is neither common nor target-private in {}",
                scenario.label()
            )));
        }
    }
    if n_c == 0 || n_u == 0 {
        return Err(ProtocolError::Score(format!(
            "evaluation set must contain both common and target-private samples \
             (got {n_c} common, {n_u} private)"
        )));
    }
    let a_common = ok_c as f64 / n_c as f64;
    let a_unknown = ok_u as f64 / n_u as f64;
    Ok(HScoreReport { a_common, a_unknown, h_score: h_score_value(a_common, a_unknown) })
}

/// Stratified split of a target domain into train/test index sets.
/// Each class is shuffled by a seed-derived stream and cut at
/// `round(ratio * n_class)`, keeping at least one sample on each side.
pub fn split_target(
    ds: &TimeSeriesDataset,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), ProtocolError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ProtocolError::Split(format!("ratio must be in (0, 1), got {ratio}")));
    }
    let mut by_class: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(ProtocolError::Split(format!(
                "class {class} has {} sample(s); stratified split needs at least 2",
                idx.len()
            )));
        }
        let mut r = rng::stream(seed, "protocol.split", &[class as u64]);
        idx.shuffle(&mut r);
        let n_tr = ((ratio * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_tr]);
        test.extend_from_slice(&idx[n_tr..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Uniform-guess oracle: predicts uniformly over the source classes plus
/// "unknown" for uniformly drawn target-class samples, and reports the
/// resulting empirical H-score. Expected accuracies are `1/(|Y^s|+1)`.
pub fn random_baseline(
    scenario: &DomainScenario,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<HScoreReport, ProtocolError> {
    let source = scenario.source_classes();
    let target = scenario.target_classes();
    if source.is_empty() || target.is_empty() {
        return Err(ProtocolError::Scenario("scenario has an empty label set".into()));
    }
    let mut preds = Vec::with_capacity(n_samples);
    let mut truth = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        truth.push(target[rng.random_range(0..target.len())]);
        let p = rng.random_range(0..=source.len());
        preds.push(if p == source.len() { -1 } else { source[p] });
    }
    h_score(&preds, &truth, scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn six_class_scenario() -> DomainScenario {
        build_scenario(6, "a", "b", 5, 0).unwrap()
    }

    #[test]
    fn scenario_set_arithmetic() {
        let s = six_class_scenario();
        assert_eq!(s.common_set, vec![1, 2, 3, 4]);
        assert_eq!(s.source_private_set, vec![0]);
        assert_eq!(s.target_private_set, vec![5]);
        assert_eq!(s.source_classes(), vec![0, 1, 2, 3, 4]);
        assert_eq!(s.target_classes(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn five_stage_scenario() {
        let s = build_scenario(5, "p1", "p2", 4, 0).unwrap();
        assert_eq!(s.common_set, vec![1, 2, 3]);
    }

    #[test]
    fn scenario_rejects_equal_removals_and_bad_ids() {
        assert!(build_scenario(5, "a", "b", 2, 2).is_err());
        assert!(build_scenario(5, "a", "a", 0, 1).is_err());
        assert!(build_scenario(5, "a", "b", 7, 1).is_err());
    }

    #[test]
    fn h_score_hand_values() {
        assert_eq!(h_score_value(1.0, 1.0), 1.0);
        assert_eq!(h_score_value(0.0, 0.9), 0.0);
        assert_eq!(h_score_value(0.0, 0.0), 0.0);
        assert!((h_score_value(0.8, 0.6) - 0.685_714_285).abs() < 1e-8);
    }

    #[test]
    fn h_score_counts_unknowns_and_errors_on_foreign_labels() {
        let s = six_class_scenario();
        // Two common samples (one right), two private (one rejected).
        let preds = vec![1, 3, -1, 2];
        let truth = vec![1, 2, 5, 5];
        let r = h_score(&preds, &truth, &s).unwrap();
        assert_eq!(r.a_common, 0.5);
        assert_eq!(r.a_unknown, 0.5);
        assert_eq!(r.h_score, 0.5);
        // Label 0 is source-private; it cannot appear in the target.
        assert!(h_score(&[1], &[0], &s).is_err());
        // Missing private subset.
        assert!(h_score(&[1, 2], &[1, 2], &s).is_err());
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let n = 100;
        let labels: Vec<i64> = (0..n).map(|i| (i % 5) as i64).collect();
        let ds = TimeSeriesDataset::new("t", n, 1, 2, vec![0.0; n * 2], labels, 5).unwrap();
        let (tr, ts) = split_target(&ds, 0.8, 7).unwrap();
        assert_eq!(tr.len(), 80);
        assert_eq!(ts.len(), 20);
        for class in 0..5i64 {
            let c = ts.iter().filter(|&&i| ds.labels[i] == class).count();
            assert_eq!(c, 4, "class {class} should have 4 test samples");
        }
        assert!(tr.iter().all(|i| !ts.contains(i)));
        let mut union: Vec<usize> = tr.iter().chain(&ts).cloned().collect();
        union.sort_unstable();
        assert_eq!(union, (0..n).collect::<Vec<_>>());
        let again = split_target(&ds, 0.8, 7).unwrap();
        assert_eq!(again, (tr, ts));
        assert_ne!(split_target(&ds, 0.8, 8).unwrap(), again);
    }

    #[test]
    fn split_rejects_singleton_classes() {
        let ds =
            TimeSeriesDataset::new("t", 3, 1, 2, vec![0.0; 6], vec![0, 0, 1], 2).unwrap();
        assert!(split_target(&ds, 0.5, 0).is_err());
    }

    #[test]
    fn random_baseline_converges_to_uniform_expectation() {
        let s = six_class_scenario(); // |Y^s| = 5 -> expected h = 1/6
        let mut r = crate::rng::stream(123, "baseline-test", &[]);
        let rep = random_baseline(&s, 10_000, &mut r).unwrap();
        assert!((rep.h_score - 1.0 / 6.0).abs() < 0.02, "h = {}", rep.h_score);
    }
}

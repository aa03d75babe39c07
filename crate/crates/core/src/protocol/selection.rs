//! Model selection: sample disjoint validation/evaluation scenario sets,
//! score hyperparameter configurations by mean validation H-score, then
//! evaluate the winner over many seeds per evaluation scenario.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bayes::{apply_params, bayes_suggest, ParamPoint, SearchSpace};
use super::trial::{run_trial, TrialRecord, TrialSettings};
use super::{build_scenario, DomainScenario, ProtocolError};
use crate::backbones::BackboneConfig;
use crate::data::{DatasetMeta, MultiDomainDataset};
use crate::methods::{MethodConfig, MethodKind};
use crate::rng;

/// Sizes and seeds of the whole selection procedure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Number of hyperparameter configurations to try (N_r).
    pub n_runs: usize,
    /// Validation scenarios used to score configurations.
    pub n_val: usize,
    /// Held-out scenarios for the final report.
    pub n_eval: usize,
    /// Seeds per evaluation scenario in the final report.
    pub final_seeds: usize,
    pub master_seed: u64,
    pub settings: TrialSettings,
    /// Explicit (validation, evaluation) scenario lists; when absent both
    /// are sampled from the dataset's domain pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<(Vec<DomainScenario>, Vec<DomainScenario>)>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            n_runs: 10,
            n_val: 2,
            n_eval: 2,
            final_seeds: 10,
            master_seed: 0,
            settings: TrialSettings::default(),
            scenarios: None,
        }
    }
}

/// One row of the final report: statistics over the seeds of one scenario.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub label: String,
    pub mean_h: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub std_h: f64,
    pub mean_a_common: f64,
    pub mean_a_unknown: f64,
    pub seeds: usize,
    pub failures: usize,
}

/// Everything the selection procedure produced, sufficient to replay the
/// argmax decision and rebuild the report tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub best_run: usize,
    pub best_params: ParamPoint,
    /// Configuration tried by each run, in order.
    pub run_params: Vec<ParamPoint>,
    /// Mean validation H-score of each run, in order.
    pub validation_scores: Vec<f64>,
    pub val_scenarios: Vec<DomainScenario>,
    pub eval_scenarios: Vec<DomainScenario>,
    pub val_trials: Vec<TrialRecord>,
    pub eval_trials: Vec<TrialRecord>,
    /// One row per evaluation scenario.
    pub eval_rows: Vec<ScenarioSummary>,
    /// Column-wise arithmetic mean of `eval_rows` (counts are summed).
    pub mean_row: ScenarioSummary,
}

/// Draws disjoint validation and evaluation scenario sets: ordered domain
/// pairs are shuffled without replacement, and each selected pair gets a
/// uniformly drawn (distinct) removed class per side.
pub fn sample_scenarios(
    meta: &DatasetMeta,
    n_val: usize,
    n_eval: usize,
    seed: u64,
) -> Result<(Vec<DomainScenario>, Vec<DomainScenario>), ProtocolError> {
    if meta.domains.len() < 2 {
        return Err(ProtocolError::Selection(format!(
            "need at least 2 domains, dataset has {}",
            meta.domains.len()
        )));
    }
    if meta.n_classes < 2 {
        return Err(ProtocolError::Selection("need at least 2 classes".into()));
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    for s in &meta.domains {
        for t in &meta.domains {
            if s != t {
                pairs.push((s.clone(), t.clone()));
            }
        }
    }
    let need = n_val + n_eval;
    if need == 0 {
        return Err(ProtocolError::Selection("need at least one scenario".into()));
    }
    if pairs.len() < need {
        return Err(ProtocolError::Selection(format!(
            "{need} scenarios requested but only {} ordered domain pairs exist",
            pairs.len()
        )));
    }
    pairs.shuffle(&mut rng::stream(seed, "protocol.pairs", &[]));
    let mut scenarios = Vec::with_capacity(need);
    for (i, (s, t)) in pairs.into_iter().take(need).enumerate() {
        let mut r = rng::stream(seed, "protocol.removed", &[i as u64]);
        let rs = r.random_range(0..meta.n_classes) as i64;
        let rt = loop {
            let c = r.random_range(0..meta.n_classes) as i64;
            if c != rs {
                break c;
            }
        };
        scenarios.push(build_scenario(meta.n_classes, &s, &t, rs, rt)?);
    }
    let eval = scenarios.split_off(n_val);
    Ok((scenarios, eval))
}

/// First index of the maximum value; ties go to the earlier entry.
fn argmax_earliest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn trial_seed(master: u64, name: &str, a: usize, b: usize) -> u64 {
    rng::derive_seed(master, name, &[a as u64, b as u64])
}

fn summarize(label: String, trials: &[&TrialRecord]) -> ScenarioSummary {
    let n = trials.len();
    let hs: Vec<f64> = trials.iter().map(|t| t.report.h_score).collect();
    let mean = hs.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (hs.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    ScenarioSummary {
        label,
        mean_h: mean,
        std_h: std,
        mean_a_common: trials.iter().map(|t| t.report.a_common).sum::<f64>() / n as f64,
        mean_a_unknown: trials.iter().map(|t| t.report.a_unknown).sum::<f64>() / n as f64,
        seeds: n,
        failures: trials.iter().filter(|t| t.failed).count(),
    }
}

fn mean_of_rows(rows: &[ScenarioSummary]) -> ScenarioSummary {
    let n = rows.len() as f64;
    ScenarioSummary {
        label: "Mean".to_string(),
        mean_h: rows.iter().map(|r| r.mean_h).sum::<f64>() / n,
        std_h: rows.iter().map(|r| r.std_h).sum::<f64>() / n,
        mean_a_common: rows.iter().map(|r| r.mean_a_common).sum::<f64>() / n,
        mean_a_unknown: rows.iter().map(|r| r.mean_a_unknown).sum::<f64>() / n,
        seeds: rows.iter().map(|r| r.seeds).sum(),
        failures: rows.iter().map(|r| r.failures).sum(),
    }
}

/// Runs the full selection loop for one method/backbone pair.
///
/// Each of `n_runs` configurations (suggested sequentially from the search
/// history) is scored by its mean H over the validation scenarios; the
/// argmax configuration (earliest on ties) is then evaluated with
/// `final_seeds` seeds per evaluation scenario. Trials within a run and
/// within the final evaluation execute in parallel; every trial's RNG
/// derives from named streams of `master_seed`, so results do not depend
/// on the thread schedule.
pub fn model_selection(
    dataset: &MultiDomainDataset,
    kind: MethodKind,
    bcfg: &BackboneConfig,
    base_cfg: &MethodConfig,
    space: &SearchSpace,
    scfg: &SelectionConfig,
) -> Result<SelectionOutcome, ProtocolError> {
    if scfg.n_runs == 0 || scfg.final_seeds == 0 {
        return Err(ProtocolError::Selection(
            "n_runs and final_seeds must be at least 1".into(),
        ));
    }
    let (val, eval) = match &scfg.scenarios {
        Some((v, e)) => (v.clone(), e.clone()),
        None => sample_scenarios(&dataset.meta, scfg.n_val, scfg.n_eval, scfg.master_seed)?,
    };
    if val.is_empty() || eval.is_empty() {
        return Err(ProtocolError::Selection(
            "validation and evaluation scenario sets must be non-empty".into(),
        ));
    }
    for v in &val {
        if eval.contains(v) {
            return Err(ProtocolError::Selection(format!(
                "scenario {} appears in both validation and evaluation sets",
                v.label()
            )));
        }
    }

    let mut history: Vec<(ParamPoint, f64)> = Vec::new();
    let mut validation_scores = Vec::with_capacity(scfg.n_runs);
    let mut run_params = Vec::with_capacity(scfg.n_runs);
    let mut val_trials = Vec::new();
    for run in 0..scfg.n_runs {
        let point = bayes_suggest(&history, space, scfg.master_seed)?;
        let cfg = apply_params(base_cfg, &point)?;
        let trials: Vec<TrialRecord> = val
            .par_iter()
            .enumerate()
            .map(|(i, scenario)| {
                let seed = trial_seed(scfg.master_seed, "protocol.val_seed", run, i);
                run_trial(dataset, scenario, kind, bcfg, &cfg, &point, &scfg.settings, seed)
            })
            .collect::<Result<_, _>>()?;
        let mean_h =
            trials.iter().map(|t| t.report.h_score).sum::<f64>() / trials.len() as f64;
        history.push((point.clone(), mean_h));
        validation_scores.push(mean_h);
        run_params.push(point);
        val_trials.extend(trials);
    }

    let best_run = argmax_earliest(&validation_scores);
    let best_params = run_params[best_run].clone();
    let best_cfg = apply_params(base_cfg, &best_params)?;

    let jobs: Vec<(usize, usize)> = (0..eval.len())
        .flat_map(|s| (0..scfg.final_seeds).map(move |k| (s, k)))
        .collect();
    let eval_trials: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(s, k)| {
            let seed = trial_seed(scfg.master_seed, "protocol.eval_seed", s, k);
            run_trial(dataset, &eval[s], kind, bcfg, &best_cfg, &best_params, &scfg.settings, seed)
        })
        .collect::<Result<_, _>>()?;

    let eval_rows: Vec<ScenarioSummary> = eval
        .iter()
        .enumerate()
        .map(|(s, scenario)| {
            let of_scenario: Vec<&TrialRecord> = eval_trials
                .iter()
                .zip(&jobs)
                .filter(|(_, &(js, _))| js == s)
                .map(|(t, _)| t)
                .collect();
            summarize(scenario.label(), &of_scenario)
        })
        .collect();
    let mean_row = mean_of_rows(&eval_rows);

    Ok(SelectionOutcome {
        best_run,
        best_params,
        run_params,
        validation_scores,
        val_scenarios: val,
        eval_scenarios: eval,
        val_trials,
        eval_trials,
        eval_rows,
        mean_row,
    })
}

//! Command execution: the logged model-selection loop behind `run`, the
//! grid evaluator behind `matrix`, and table emission shared with `report`.
//!
//! Both commands append to `trials.jsonl` batch by batch (one selection run
//! or one grid cell at a time), so an interrupted experiment keeps every
//! finished trial and `report` can still tabulate it. Final tables are
//! always rebuilt *from the log*, never from in-memory state — the `run`
//! and `report` outputs are byte-identical by construction.

use std::path::Path;

use anyhow::{bail, Context as _, Result};
use rayon::prelude::*;
use serde::Serialize;
use unida_core::backbones::BackboneConfig;
use unida_core::methods::MethodKind;
use unida_core::protocol::{
    apply_params, bayes_suggest, model_selection, run_trial, ParamPoint, SelectionConfig,
    TrialRecord,
};
use unida_core::rng;

use crate::config::Experiment;
use crate::logs::{read_log_dir, LogLine, LogWriter, MetaLine, TrialContext, TrialLine};
use crate::tables::{build_tables, write_tables};

/// First index of the maximum; earlier run wins ties.
fn argmax_earliest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn trial_line(
    exp: &Experiment,
    context: TrialContext,
    method: MethodKind,
    backbone: &BackboneConfig,
    run: usize,
    scenario_idx: usize,
    seed_idx: usize,
    trial: TrialRecord,
) -> LogLine {
    LogLine::Trial(Box::new(TrialLine {
        run_id: exp.run_id.clone(),
        context,
        method: method.to_string(),
        backbone: backbone.kind.to_string(),
        run,
        scenario_idx,
        seed_idx,
        trial,
    }))
}

/// Everything `run` decided, kept alongside the tables for replaying the
/// argmax by hand.
#[derive(Serialize)]
struct SelectionSummary<'a> {
    run_id: &'a str,
    method: String,
    backbone: String,
    best_run: usize,
    best_params: &'a ParamPoint,
    validation_scores: &'a [f64],
    run_params: &'a [ParamPoint],
}

/// Runs Bayesian model selection for the configured method/backbone pair,
/// logging every trial, then writes the scenario table.
pub fn cmd_run(exp: &Experiment, out: &Path) -> Result<()> {
    let mut writer = LogWriter::open(out)?;
    writer.write(&LogLine::Meta(MetaLine {
        run_id: exp.run_id.clone(),
        command: "run".to_string(),
        master_seed: exp.cfg.master_seed,
    }))?;
    writer.flush()?;

    let method = exp.cfg.method.kind;
    let base_cfg = &exp.cfg.method.config;
    let n_runs = exp.cfg.selection.n_runs;
    let mut history: Vec<(ParamPoint, f64)> = Vec::new();
    let mut validation_scores = Vec::with_capacity(n_runs);
    let mut run_params = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let point = bayes_suggest(&history, &exp.space, exp.cfg.master_seed)?;
        let cfg = apply_params(base_cfg, &point)?;
        let records: Vec<TrialRecord> = exp
            .val_scenarios
            .par_iter()
            .enumerate()
            .map(|(i, scenario)| {
                let seed =
                    rng::derive_seed(exp.cfg.master_seed, "protocol.val_seed", &[run as u64, i as u64]);
                run_trial(&exp.dataset, scenario, method, &exp.backbone, &cfg, &point, &exp.settings, seed)
            })
            .collect::<Result<_, _>>()?;
        let mean_h =
            records.iter().map(|t| t.report.h_score).sum::<f64>() / records.len() as f64;
        for (i, trial) in records.into_iter().enumerate() {
            writer.write(&trial_line(exp, TrialContext::Val, method, &exp.backbone, run, i, 0, trial))?;
        }
        writer.flush()?;
        eprintln!("run {:>3}/{n_runs}: mean validation H = {mean_h:.4}", run + 1);
        history.push((point.clone(), mean_h));
        validation_scores.push(mean_h);
        run_params.push(point);
    }

    let best_run = argmax_earliest(&validation_scores);
    let best_params = run_params[best_run].clone();
    let best_cfg = apply_params(base_cfg, &best_params)?;
    eprintln!("selected run {best_run} (mean validation H = {:.4})", validation_scores[best_run]);

    let final_seeds = exp.cfg.selection.final_seeds;
    let jobs: Vec<(usize, usize)> = (0..exp.eval_scenarios.len())
        .flat_map(|s| (0..final_seeds).map(move |k| (s, k)))
        .collect();
    let eval_records: Vec<TrialRecord> = jobs
        .par_iter()
        .map(|&(s, k)| {
            let seed = rng::derive_seed(exp.cfg.master_seed, "protocol.eval_seed", &[s as u64, k as u64]);
            run_trial(
                &exp.dataset,
                &exp.eval_scenarios[s],
                method,
                &exp.backbone,
                &best_cfg,
                &best_params,
                &exp.settings,
                seed,
            )
        })
        .collect::<Result<_, _>>()?;
    for (&(s, k), trial) in jobs.iter().zip(eval_records) {
        writer.write(&trial_line(exp, TrialContext::Eval, method, &exp.backbone, 0, s, k, trial))?;
    }
    writer.flush()?;

    let summary = SelectionSummary {
        run_id: &exp.run_id,
        method: method.to_string(),
        backbone: exp.backbone.kind.to_string(),
        best_run,
        best_params: &best_params,
        validation_scores: &validation_scores,
        run_params: &run_params,
    };
    let path = out.join(format!("{}.selection.json", exp.run_id));
    std::fs::write(&path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("cannot write {}", path.display()))?;

    emit_tables(out, Some(&exp.run_id))
}

/// Evaluates every configured method x backbone cell on the evaluation
/// scenarios, then writes the grid table.
pub fn cmd_matrix(exp: &Experiment, out: &Path) -> Result<()> {
    let mut writer = LogWriter::open(out)?;
    writer.write(&LogLine::Meta(MetaLine {
        run_id: exp.run_id.clone(),
        command: "matrix".to_string(),
        master_seed: exp.cfg.master_seed,
    }))?;
    writer.flush()?;

    let grid = &exp.cfg.matrix;
    let base_cfg = &exp.cfg.method.config;
    for (mi, &method) in grid.methods.iter().enumerate() {
        for (bi, &kind) in grid.backbones.iter().enumerate() {
            let backbone = BackboneConfig { kind, ..exp.backbone.clone() };
            if grid.search {
                let cell_seed =
                    rng::derive_seed(exp.cfg.master_seed, "matrix.cell", &[mi as u64, bi as u64]);
                let scfg = SelectionConfig {
                    n_runs: exp.cfg.selection.n_runs,
                    n_val: exp.val_scenarios.len(),
                    n_eval: exp.eval_scenarios.len(),
                    final_seeds: exp.cfg.selection.final_seeds,
                    master_seed: cell_seed,
                    settings: exp.settings,
                    scenarios: Some((exp.val_scenarios.clone(), exp.eval_scenarios.clone())),
                };
                let outcome =
                    model_selection(&exp.dataset, method, &backbone, base_cfg, &exp.space, &scfg)?;
                let n_val = exp.val_scenarios.len();
                for (i, trial) in outcome.val_trials.into_iter().enumerate() {
                    writer.write(&trial_line(
                        exp, TrialContext::Val, method, &backbone, i / n_val, i % n_val, 0, trial,
                    ))?;
                }
                let fs = exp.cfg.selection.final_seeds;
                for (i, trial) in outcome.eval_trials.into_iter().enumerate() {
                    writer.write(&trial_line(
                        exp, TrialContext::Matrix, method, &backbone, 0, i / fs, i % fs, trial,
                    ))?;
                }
            } else {
                let jobs: Vec<(usize, usize)> = (0..exp.eval_scenarios.len())
                    .flat_map(|s| (0..grid.seeds.len()).map(move |k| (s, k)))
                    .collect();
                let records: Vec<TrialRecord> = jobs
                    .par_iter()
                    .map(|&(s, k)| {
                        run_trial(
                            &exp.dataset,
                            &exp.eval_scenarios[s],
                            method,
                            &backbone,
                            base_cfg,
                            &ParamPoint::new(),
                            &exp.settings,
                            grid.seeds[k],
                        )
                    })
                    .collect::<Result<_, _>>()?;
                for (&(s, k), trial) in jobs.iter().zip(records) {
                    writer.write(&trial_line(exp, TrialContext::Matrix, method, &backbone, 0, s, k, trial))?;
                }
            }
            writer.flush()?;
            eprintln!("cell {method}/{kind} done");
        }
    }

    emit_tables(out, Some(&exp.run_id))
}

/// Rebuilds and writes tables from the logs in `out`. With `only` set, just
/// that run's tables are (re)written; otherwise all logged runs are.
pub fn emit_tables(out: &Path, only: Option<&str>) -> Result<()> {
    let lines = read_log_dir(out)?;
    render_tables(out, &lines, only)
}

/// Table emission for already-read log lines.
pub fn render_tables(out: &Path, lines: &[LogLine], only: Option<&str>) -> Result<()> {
    let tables = build_tables(lines);
    let selected: Vec<_> =
        tables.iter().filter(|t| only.is_none_or(|id| t.run_id == id)).collect();
    if selected.is_empty() {
        bail!("no trial records found for the requested run");
    }
    for rt in selected {
        let written = write_tables(out, rt)?;
        for path in &written {
            eprintln!("wrote {}", path.display());
        }
        for (name, table) in
            [("scenarios", &rt.scenario), ("matrix", &rt.matrix)]
        {
            if let Some(t) = table {
                println!("# {} ({name})\n{}", rt.run_id, t.to_text());
            }
        }
    }
    Ok(())
}

//! Result tables: rebuilt from trial-log lines alone, rendered as CSV
//! (locale-independent, fixed 4 decimals) and as aligned text.
//!
//! Two shapes exist: the per-scenario table of a single selection run
//! (scenario rows, H-score statistics, closing "Mean" row) and the grid
//! table (method rows, one column group per backbone, with failure flags
//! and per-row ranks).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};

use crate::logs::{LogLine, TrialContext, TrialLine};

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Text(String),
    Num(f64),
    Int(i64),
    Flag(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Num(v) => format!("{v:.4}"),
            Cell::Int(v) => v.to_string(),
            Cell::Flag(b) => if *b { "1" } else { "0" }.to_string(),
        }
    }

    fn right_aligned(&self) -> bool {
        !matches!(self, Cell::Text(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(Cell::render).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let rendered: Vec<Vec<String>> =
            self.rows.iter().map(|r| r.iter().map(Cell::render).collect()).collect();
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(c, name)| {
                rendered.iter().map(|r| r[c].len()).chain([name.len()]).max().unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for (c, name) in self.columns.iter().enumerate() {
            if c > 0 {
                out.push_str("  ");
            }
            let _ = write!(out, "{:<w$}", name, w = widths[c]);
        }
        out.push('\n');
        let _ = writeln!(out, "{}", "-".repeat(out.len() - 1));
        for (row, cells) in rendered.iter().zip(&self.rows) {
            for (c, val) in row.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                if cells[c].right_aligned() {
                    let _ = write!(out, "{:>w$}", val, w = widths[c]);
                } else {
                    let _ = write!(out, "{:<w$}", val, w = widths[c]);
                }
            }
            out.push('\n');
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64], m: f64) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    }
}

/// Builds the per-scenario table (plus "Mean" row) from `eval`-context
/// trials of one run. Input order does not matter: rows are keyed by
/// scenario index and seeds sorted before reduction.
pub fn scenario_table(trials: &[&TrialLine]) -> Table {
    let mut by_scenario: Vec<(usize, Vec<&TrialLine>)> = Vec::new();
    let mut sorted: Vec<&TrialLine> = trials.to_vec();
    sorted.sort_by_key(|t| (t.scenario_idx, t.seed_idx));
    for t in sorted {
        match by_scenario.iter_mut().find(|(s, _)| *s == t.scenario_idx) {
            Some((_, v)) => v.push(t),
            None => by_scenario.push((t.scenario_idx, vec![t])),
        }
    }
    let columns = ["scenario", "mean_h", "std_h", "a_common", "a_unknown", "seeds", "failures"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    let mut col_means = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let (mut total_seeds, mut total_failures) = (0i64, 0i64);
    for (_, group) in &by_scenario {
        let hs: Vec<f64> = group.iter().map(|t| t.trial.report.h_score).collect();
        let m = mean(&hs);
        let sd = sample_std(&hs, m);
        let ac = mean(&group.iter().map(|t| t.trial.report.a_common).collect::<Vec<_>>());
        let au = mean(&group.iter().map(|t| t.trial.report.a_unknown).collect::<Vec<_>>());
        let fails = group.iter().filter(|t| t.trial.failed).count() as i64;
        for (acc, v) in col_means.iter_mut().zip([m, sd, ac, au]) {
            acc.push(v);
        }
        total_seeds += group.len() as i64;
        total_failures += fails;
        rows.push(vec![
            Cell::Text(group[0].trial.scenario.label()),
            Cell::Num(m),
            Cell::Num(sd),
            Cell::Num(ac),
            Cell::Num(au),
            Cell::Int(group.len() as i64),
            Cell::Int(fails),
        ]);
    }
    rows.push(vec![
        Cell::Text("Mean".to_string()),
        Cell::Num(mean(&col_means[0])),
        Cell::Num(mean(&col_means[1])),
        Cell::Num(mean(&col_means[2])),
        Cell::Num(mean(&col_means[3])),
        Cell::Int(total_seeds),
        Cell::Int(total_failures),
    ]);
    Table { columns, rows }
}

/// Builds the method x backbone grid from `matrix`-context trials. Rows and
/// column groups appear in first-seen log order; each cell is the mean (and
/// std) H-score over its scenario/seed trials, a flag set when any trial in
/// the cell failed, and the within-row rank (1 = best, ties to the earlier
/// column).
pub fn matrix_table(trials: &[&TrialLine]) -> Table {
    let mut methods: Vec<&str> = Vec::new();
    let mut backbones: Vec<&str> = Vec::new();
    for t in trials {
        if !methods.contains(&t.method.as_str()) {
            methods.push(&t.method);
        }
        if !backbones.contains(&t.backbone.as_str()) {
            backbones.push(&t.backbone);
        }
    }
    let mut columns = vec!["method".to_string()];
    for b in &backbones {
        columns.push(format!("{b}_mean"));
        columns.push(format!("{b}_std"));
        columns.push(format!("{b}_fail"));
        columns.push(format!("{b}_rank"));
    }
    let mut rows = Vec::new();
    for m in &methods {
        let mut means = Vec::with_capacity(backbones.len());
        let mut stds = Vec::with_capacity(backbones.len());
        let mut fails = Vec::with_capacity(backbones.len());
        for b in &backbones {
            let mut cell: Vec<&TrialLine> = trials
                .iter()
                .filter(|t| t.method == *m && t.backbone == *b)
                .copied()
                .collect();
            cell.sort_by_key(|t| (t.scenario_idx, t.seed_idx));
            if cell.is_empty() {
                means.push(0.0);
                stds.push(0.0);
                fails.push(true);
            } else {
                let hs: Vec<f64> = cell.iter().map(|t| t.trial.report.h_score).collect();
                let mu = mean(&hs);
                means.push(mu);
                stds.push(sample_std(&hs, mu));
                fails.push(cell.iter().any(|t| t.trial.failed));
            }
        }
        // Rank 1 = best mean in the row; an earlier column wins ties.
        let ranks: Vec<i64> = (0..means.len())
            .map(|j| {
                1 + means
                    .iter()
                    .enumerate()
                    .filter(|&(k, &v)| v > means[j] || (v == means[j] && k < j))
                    .count() as i64
            })
            .collect();
        let mut row = vec![Cell::Text(m.to_string())];
        for j in 0..backbones.len() {
            row.push(Cell::Num(means[j]));
            row.push(Cell::Num(stds[j]));
            row.push(Cell::Flag(fails[j]));
            row.push(Cell::Int(ranks[j]));
        }
        rows.push(row);
    }
    Table { columns, rows }
}

/// All tables of one logged run.
pub struct RunTables {
    pub run_id: String,
    pub scenario: Option<Table>,
    pub matrix: Option<Table>,
}

/// Groups log lines by run id (first-seen order), drops duplicated trial
/// records, and rebuilds every table. Pure function of the log contents.
pub fn build_tables(lines: &[LogLine]) -> Vec<RunTables> {
    let mut order: Vec<String> = Vec::new();
    let mut by_run: HashMap<String, Vec<&TrialLine>> = HashMap::new();
    let mut seen = HashSet::new();
    for line in lines {
        let run_id = match line {
            LogLine::Meta(m) => &m.run_id,
            LogLine::Trial(t) => &t.run_id,
        };
        if !order.contains(run_id) {
            order.push(run_id.clone());
        }
        if let LogLine::Trial(t) = line {
            if seen.insert(t.key()) {
                by_run.entry(t.run_id.clone()).or_default().push(t);
            }
        }
    }
    order
        .into_iter()
        .map(|run_id| {
            let trials = by_run.get(&run_id).map(Vec::as_slice).unwrap_or(&[]);
            let eval: Vec<&TrialLine> =
                trials.iter().filter(|t| t.context == TrialContext::Eval).copied().collect();
            let matrix: Vec<&TrialLine> =
                trials.iter().filter(|t| t.context == TrialContext::Matrix).copied().collect();
            RunTables {
                run_id,
                scenario: (!eval.is_empty()).then(|| scenario_table(&eval)),
                matrix: (!matrix.is_empty()).then(|| matrix_table(&matrix)),
            }
        })
        .collect()
}

/// Writes every table of a run into `dir` as CSV and aligned text; returns
/// the paths written.
pub fn write_tables(dir: &Path, rt: &RunTables) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, table: &Table| -> Result<()> {
        for (ext, body) in [("csv", table.to_csv()), ("txt", table.to_text())] {
            let path = dir.join(format!("{}.{name}.{ext}", rt.run_id));
            std::fs::write(&path, body)
                .with_context(|| format!("cannot write {}", path.display()))?;
            written.push(path);
        }
        Ok(())
    };
    if let Some(t) = &rt.scenario {
        emit("scenarios", t)?;
    }
    if let Some(t) = &rt.matrix {
        emit("matrix", t)?;
    }
    Ok(written)
}

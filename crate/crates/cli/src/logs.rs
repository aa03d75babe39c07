//! Append-only trial log: one JSON object per line, so a crashed run keeps
//! everything it finished and `report` can rebuild tables from the log
//! alone.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use unida_core::protocol::TrialRecord;

pub const LOG_FILE: &str = "trials.jsonl";

/// Which stage of a command produced a trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialContext {
    /// Scores one hyperparameter configuration during selection.
    Val,
    /// Final multi-seed evaluation of the selected configuration.
    Eval,
    /// Cell evaluation of the method x backbone grid.
    Matrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaLine {
    pub run_id: String,
    pub command: String,
    pub master_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialLine {
    pub run_id: String,
    pub context: TrialContext,
    pub method: String,
    pub backbone: String,
    /// Selection run index for `val` trials; 0 otherwise.
    pub run: usize,
    pub scenario_idx: usize,
    pub seed_idx: usize,
    pub trial: TrialRecord,
}

impl TrialLine {
    /// Identity of a trial for de-duplication when logs get concatenated or
    /// a run is repeated; everything except the record payload.
    pub fn key(&self) -> (String, TrialContext, String, String, usize, usize, usize) {
        (
            self.run_id.clone(),
            self.context,
            self.method.clone(),
            self.backbone.clone(),
            self.run,
            self.scenario_idx,
            self.seed_idx,
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogLine {
    Meta(MetaLine),
    Trial(Box<TrialLine>),
}

/// Serialized writer over the shared log file; lines are flushed eagerly so
/// partial runs stay on disk.
pub struct LogWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LogWriter {
    pub fn open(dir: &Path) -> Result<LogWriter> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output dir {}", dir.display()))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("cannot open log {}", path.display()))?;
        Ok(LogWriter { out: BufWriter::new(file), path })
    }

    pub fn write(&mut self, line: &LogLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out
            .flush()
            .with_context(|| format!("cannot flush log {}", self.path.display()))
    }
}

/// Reads every `*.jsonl` file in `dir` (sorted by name) and returns the
/// parsed lines in file order.
pub fn read_log_dir(dir: &Path) -> Result<Vec<LogLine>> {
    if !dir.is_dir() {
        bail!("log directory {} does not exist", dir.display());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .jsonl trial logs in {}", dir.display());
    }
    let mut lines = Vec::new();
    for path in files {
        let file =
            File::open(&path).with_context(|| format!("cannot open {}", path.display()))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.with_context(|| format!("cannot read {}", path.display()))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line)
                .with_context(|| format!("bad record at {}:{}", path.display(), i + 1))?;
            lines.push(parsed);
        }
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use unida_core::protocol::{build_scenario, HScoreReport, ParamPoint};

    fn sample_trial() -> TrialLine {
        TrialLine {
            run_id: "abc".into(),
            context: TrialContext::Eval,
            method: "dance".into(),
            backbone: "cnn".into(),
            run: 0,
            scenario_idx: 1,
            seed_idx: 2,
            trial: TrialRecord {
                hyperparams: ParamPoint::new(),
                seed: 7,
                scenario: build_scenario(3, "a", "b", 0, 1).unwrap(),
                report: HScoreReport { a_common: 0.5, a_unknown: 0.25, h_score: 1.0 / 3.0 },
                wall_time: 0.1,
                failed: false,
            },
        }
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = LogWriter::open(dir.path()).unwrap();
        w.write(&LogLine::Meta(MetaLine {
            run_id: "abc".into(),
            command: "run".into(),
            master_seed: 5,
        }))
        .unwrap();
        w.write(&LogLine::Trial(Box::new(sample_trial()))).unwrap();
        w.flush().unwrap();
        // Appending must not clobber earlier lines.
        let mut w2 = LogWriter::open(dir.path()).unwrap();
        w2.write(&LogLine::Trial(Box::new(sample_trial()))).unwrap();
        w2.flush().unwrap();

        let lines = read_log_dir(dir.path()).unwrap();
        assert_eq!(lines.len(), 3);
        match &lines[1] {
            LogLine::Trial(t) => {
                assert_eq!(t.trial.seed, 7);
                assert_eq!(t.context, TrialContext::Eval);
            }
            other => panic!("expected trial line, got {other:?}"),
        }
    }

    #[test]
    fn empty_or_missing_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_log_dir(dir.path()).is_err());
        assert!(read_log_dir(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn corrupt_line_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("trials.jsonl"), "{not json\n").unwrap();
        let err = read_log_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("trials.jsonl:1"), "unhelpful error: {err}");
    }
}

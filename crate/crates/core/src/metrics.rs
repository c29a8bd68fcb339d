//! CSV artifacts: per-iteration training log, wall-clock log, test results
//! and bound reports.
//!
//! Every file starts with a `# <name> v<version>` line so readers can check
//! the schema before parsing the header row.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::BoundReport;
use crate::error::{Error, Result};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const TIMING_LOG: &str = "timing.csv";
pub const TEST_RESULTS: &str = "test_results.csv";
pub const BOUND_REPORT: &str = "bound_report.csv";
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

pub const TRAIN_LOG_VERSION: u32 = 1;
pub const TIMING_LOG_VERSION: u32 = 1;
pub const TEST_RESULTS_VERSION: u32 = 1;
pub const BOUND_REPORT_VERSION: u32 = 1;

/// One meta-training iteration. Deterministic given seed and config, so the
/// log is byte-identical across runs; wall-clock lives in [`TimingRow`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub run_id: String,
    pub iteration: usize,
    pub task_id: u64,
    pub m0: f64,
    pub m1: f64,
    /// Real transitions collected so far.
    pub env_steps: usize,
    /// Normalized return of this iteration's exploration episode.
    pub explore_return: f64,
    /// Offline evaluation on the held-out tasks, normalized by horizon.
    pub avg_return_normalized: f64,
    pub elbo_loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub policy_objective: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
    pub policy_updates: usize,
    pub skipped_updates: usize,
    /// `ok`, or `aborted: <reason>` when a non-finite value stopped the
    /// iteration.
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub run_id: String,
    pub iteration: usize,
    pub wall_clock_s: f64,
}

/// Per-task meta-test result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRow {
    pub run_id: String,
    pub mode: String,
    pub task_id: u64,
    pub m0: f64,
    pub m1: f64,
    pub mean_return: f64,
    pub std_return: f64,
    pub one_step_mse: f64,
    pub adaptation_steps: usize,
    /// Whether fine-tuning collapsed and the original policy was evaluated.
    pub fallback: bool,
    pub wall_clock_s: f64,
}

/// Flat CSV form of [`BoundReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub pair_id: usize,
    pub eps: f64,
    pub sup_tv: f64,
    pub max_gap: f64,
    pub lemma_bound: f64,
    pub regret: f64,
    pub theorem_bound: f64,
    pub violations: usize,
}

impl From<&BoundReport> for BoundRow {
    fn from(r: &BoundReport) -> Self {
        Self {
            pair_id: r.pair_id,
            eps: r.eps,
            sup_tv: r.sup_tv,
            max_gap: r.max_gap,
            lemma_bound: r.lemma_bound,
            regret: r.regret,
            theorem_bound: r.theorem_bound,
            violations: r.violations,
        }
    }
}

fn version_line(name: &str, version: u32) -> String {
    format!("# {name} v{version}\n")
}

/// Write `rows` to `path` with the versioned preamble and a header row.
pub fn write_csv<T: Serialize>(path: &Path, name: &str, version: u32, rows: &[T]) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(version_line(name, version).as_bytes())
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Appends rows one at a time, writing the preamble when the file is
/// created.
pub struct CsvAppender {
    writer: csv::Writer<File>,
    path: std::path::PathBuf,
}

impl CsvAppender {
    pub fn create(path: &Path, name: &str, version: u32) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(version_line(name, version).as_bytes())
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: csv::Writer::from_writer(file),
            path: path.to_path_buf(),
        })
    }

    pub fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Read rows written by [`write_csv`] or [`CsvAppender`], checking the
/// preamble.
pub fn read_csv<T: for<'de> Deserialize<'de>>(
    path: &Path,
    name: &str,
    version: u32,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    if first != version_line(name, version) {
        return Err(Error::Invalid(format!(
            "{} starts with {:?}, expected {:?}",
            path.display(),
            first.trim_end(),
            version_line(name, version).trim_end()
        )));
    }
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

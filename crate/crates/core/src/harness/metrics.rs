//! Per-step metrics, written as JSON Lines (`metrics.jsonl`) and CSV
//! (`metrics.csv`) with an identical field set on every line. Wall-clock
//! durations go to a separate `timings.csv` so the metrics files are
//! byte-reproducible. The schema is documented in `docs/metrics-schema.md`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub base_mean_reward: f64,
    pub base_trajectories: usize,
    pub degenerate_groups: usize,
    pub correction_groups: usize,
    pub correction_trajectories: usize,
    pub correction_mean_shaped_reward: Option<f64>,
    /// Retention reward R_t.
    pub retention: Option<f64>,
    /// Replay ratio used for this step's selection.
    pub rho: f64,
    /// Replay ratio after the controller update.
    pub rho_next: f64,
    pub underperf_count: u32,
    pub replay_pos: usize,
    pub replay_neg: usize,
    pub medium_pool: usize,
    pub short_replay: bool,
    /// P(new correct | candidate wrong) in this step's correction stream.
    pub wrong_to_correct: Option<f64>,
    /// P(new wrong | candidate correct) in this step's correction stream.
    pub correct_to_wrong: Option<f64>,
    /// Mean KL to the reference over the step's contexts, before the update.
    pub kl_to_reference: f64,
    #[serde(skip)]
    pub wall_clock_ms: f64,
}

/// Column order of `metrics.csv`; also the key set of each JSON line.
pub const METRIC_FIELDS: [&str; 18] = [
    "step",
    "base_mean_reward",
    "base_trajectories",
    "degenerate_groups",
    "correction_groups",
    "correction_trajectories",
    "correction_mean_shaped_reward",
    "retention",
    "rho",
    "rho_next",
    "underperf_count",
    "replay_pos",
    "replay_neg",
    "medium_pool",
    "short_replay",
    "wrong_to_correct",
    "correct_to_wrong",
    "kl_to_reference",
];

/// Single-writer, append-only sink for the three per-step files.
pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    timings: BufWriter<File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        let jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        let csv = csv::Writer::from_path(dir.join("metrics.csv"))?;
        let mut timings = BufWriter::new(File::create(dir.join("timings.csv"))?);
        writeln!(timings, "step,wall_clock_ms")?;
        Ok(MetricsWriter {
            jsonl,
            csv,
            timings,
            last_step: None,
        })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        debug_assert!(self.last_step.is_none_or(|s| m.step > s), "step indices must increase");
        self.last_step = Some(m.step);
        serde_json::to_writer(&mut self.jsonl, m)?;
        self.jsonl.write_all(b"\n")?;
        self.csv.serialize(m)?;
        writeln!(self.timings, "{},{:.3}", m.step, m.wall_clock_ms)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.jsonl.flush()?;
        self.csv.flush()?;
        self.timings.flush()?;
        Ok(())
    }
}

/// Reads back a `metrics.jsonl` file.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

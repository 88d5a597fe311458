//! Run and sweep drivers.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `config.toml` | resolved configuration |
//! | `bank.txt` | prompt bank |
//! | `metrics.jsonl`, `metrics.csv` | one record per step |
//! | `timings.csv` | wall-clock per step |
//! | `replay.jsonl` | replay selection per step (correction presets) |
//! | `params.txt` | final policy checkpoint |
//! | `eval.json` | final evaluation report |
//! | `summary.csv` | one-row run summary |
//! | `divergence.json` | only when a run aborts on divergence |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cipo::{cipo_train_step, ReplayCandidate, ReplaySelection};
use crate::envs::{generate_bank, PromptBank};
use crate::error::{LabError, Result};
use crate::exec::Execution;
use crate::grpo::{grpo_train_step, TrainState};
use crate::harness::eval::{evaluate, EvalReport};
use crate::harness::metrics::{MetricsWriter, StepMetrics};
use crate::policy::PolicyParams;
use crate::types::{validate_config, ExperimentConfig, Preset, ReplayControllerState};

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics_jsonl: PathBuf,
    pub metrics_csv: PathBuf,
    pub params: PathBuf,
    pub eval: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<StepMetrics>,
    pub eval: EvalReport,
    pub params: PolicyParams,
    pub controller: ReplayControllerState,
    pub artifacts: Option<RunArtifacts>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReplayLogLine {
    step: usize,
    #[serde(flatten)]
    selection: ReplaySelection,
}

#[derive(Debug, Serialize)]
struct DivergenceRecord<'a> {
    step: usize,
    detail: &'a str,
    last_metrics: Option<&'a StepMetrics>,
}

/// Builds the bank a config describes.
pub fn bank_for(config: &ExperimentConfig) -> Result<PromptBank> {
    generate_bank(
        config.prompts,
        config.answers,
        &config.difficulty_profile,
        config.bank_seed,
    )
}

/// Trains `config.preset` for `config.steps` steps on the config's bank,
/// then evaluates the final policy. With `out_dir`, every artifact listed in
/// the module docs is written there.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<RunOutput> {
    let bank = bank_for(config)?;
    run_on_bank(config, &bank, out_dir, exec)
}

pub fn run_on_bank(
    config: &ExperimentConfig,
    bank: &PromptBank,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<RunOutput> {
    let violations = validate_config(config);
    if !violations.is_empty() {
        return Err(LabError::Config(violations));
    }
    if bank.prompts() != config.prompts || bank.answers() != config.answers {
        return Err(LabError::InvalidArgument(format!(
            "bank is {}x{}, config expects {}x{}",
            bank.prompts(),
            bank.answers(),
            config.prompts,
            config.answers
        )));
    }

    let mut sinks = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), config.to_toml_string())?;
            bank.save(&dir.join("bank.txt"))?;
            Some((
                MetricsWriter::create(dir)?,
                BufWriter::new(File::create(dir.join("replay.jsonl"))?),
            ))
        }
        None => None,
    };

    let mut state = TrainState::new(bank, config);
    let mut metrics = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let result = if config.preset == Preset::Grpo {
            grpo_train_step(state.clone(), config, bank, exec).map(|(s, m)| (s, m, None))
        } else {
            cipo_train_step(state.clone(), config, bank, exec).map(|o| (o.state, o.metrics, o.selection))
        };
        let (next, step_metrics, selection) = match result {
            Ok(r) => r,
            Err(LabError::Divergence { step, detail }) => {
                if let Some(dir) = out_dir {
                    let record = DivergenceRecord {
                        step,
                        detail: &detail,
                        last_metrics: metrics.last(),
                    };
                    std::fs::write(
                        dir.join("divergence.json"),
                        serde_json::to_string_pretty(&record)?,
                    )?;
                }
                return Err(LabError::Divergence { step, detail });
            }
            Err(e) => return Err(e),
        };
        if let Some((writer, replay)) = sinks.as_mut() {
            writer.append(&step_metrics)?;
            if let Some(selection) = selection {
                let line = ReplayLogLine {
                    step: step_metrics.step,
                    selection,
                };
                serde_json::to_writer(&mut *replay, &line)?;
                replay.write_all(b"\n")?;
            }
        }
        metrics.push(step_metrics);
        state = next;
    }

    let eval = evaluate(
        &state.params,
        bank,
        config.eval_samples,
        &config.eval_k,
        config.seed,
        exec,
    )?;

    let artifacts = match (out_dir, sinks) {
        (Some(dir), Some((writer, mut replay))) => {
            writer.finish()?;
            replay.flush()?;
            state.params.save(&dir.join("params.txt"))?;
            std::fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&eval)?)?;
            write_summary(&dir.join("summary.csv"), &RunSummary::new(config, &eval, &state.controller))?;
            Some(RunArtifacts {
                dir: dir.to_path_buf(),
                metrics_jsonl: dir.join("metrics.jsonl"),
                metrics_csv: dir.join("metrics.csv"),
                params: dir.join("params.txt"),
                eval: dir.join("eval.json"),
            })
        }
        _ => None,
    };

    Ok(RunOutput {
        metrics,
        eval,
        params: state.params,
        controller: state.controller,
        artifacts,
    })
}

/// Replay candidates logged for `step` in a run directory.
pub fn read_replay_step(run_dir: &Path, step: usize) -> Result<Vec<ReplayCandidate>> {
    let path = run_dir.join("replay.jsonl");
    let text = std::fs::read_to_string(&path)?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let entry: ReplayLogLine = serde_json::from_str(line)?;
        if entry.step == step {
            return Ok(entry.selection.candidates);
        }
    }
    Err(LabError::InvalidArgument(format!(
        "no replay batch for step {step} in {}",
        path.display()
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: Preset,
    pub seed: u64,
    pub steps: usize,
    pub pass1: f64,
    pub pass_at_k: Vec<(usize, f64)>,
    pub wrong_to_correct: Option<f64>,
    pub correct_to_wrong: Option<f64>,
    pub final_rho: f64,
}

impl RunSummary {
    pub fn new(config: &ExperimentConfig, eval: &EvalReport, controller: &ReplayControllerState) -> Self {
        RunSummary {
            preset: config.preset,
            seed: config.seed,
            steps: config.steps,
            pass1: eval.pass1,
            pass_at_k: eval.pass_at_k.iter().map(|p| (p.k, p.value)).collect(),
            wrong_to_correct: eval.wrong_to_correct,
            correct_to_wrong: eval.correct_to_wrong,
            final_rho: controller.rho(),
        }
    }

    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_summary(path: &Path, s: &RunSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["preset".to_string(), "seed".into(), "steps".into(), "pass1".into()];
    header.extend(s.pass_at_k.iter().map(|(k, _)| format!("pass_at_{k}")));
    header.extend(["wrong_to_correct", "correct_to_wrong", "final_rho"].map(String::from));
    w.write_record(&header)?;
    let mut row = vec![
        s.preset.to_string(),
        s.seed.to_string(),
        s.steps.to_string(),
        s.pass1.to_string(),
    ];
    row.extend(s.pass_at_k.iter().map(|(_, v)| v.to_string()));
    row.extend([opt(s.wrong_to_correct), opt(s.correct_to_wrong), s.final_rho.to_string()]);
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

/// Median of the present values; `None` when all are absent.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Per-preset medians across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub preset: Preset,
    pub seeds: usize,
    pub pass1: f64,
    pub pass_at_k: Vec<(usize, f64)>,
    pub wrong_to_correct: Option<f64>,
    pub correct_to_wrong: Option<f64>,
    pub final_rho: f64,
}

impl SweepRow {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub runs: Vec<RunSummary>,
    pub rows: Vec<SweepRow>,
}

impl SweepOutput {
    pub fn row(&self, preset: Preset) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.preset == preset)
    }

    /// Markdown comparison table plus the ablation orderings.
    pub fn report(&self) -> String {
        let ks: Vec<usize> = self
            .rows
            .first()
            .map(|r| r.pass_at_k.iter().map(|(k, _)| *k).collect())
            .unwrap_or_default();
        let mut out = String::new();
        let mut header = "| preset | seeds | pass@1 |".to_string();
        let mut rule = "|---|---|---|".to_string();
        for k in &ks {
            header.push_str(&format!(" pass@{k} (est.) |"));
            rule.push_str("---|");
        }
        header.push_str(" wrong→correct | correct→wrong | final ρ |");
        rule.push_str("---|---|---|");
        out.push_str(&header);
        out.push('\n');
        out.push_str(&rule);
        out.push('\n');
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        for r in &self.rows {
            let mut line = format!("| {} | {} | {:.4} |", r.preset, r.seeds, r.pass1);
            for k in &ks {
                line.push_str(&format!(" {} |", fmt(r.pass_at(*k))));
            }
            line.push_str(&format!(
                " {} | {} | {:.4} |\n",
                fmt(r.wrong_to_correct),
                fmt(r.correct_to_wrong),
                r.final_rho
            ));
            out.push_str(&line);
        }

        if let Some(full) = self.row(Preset::Cipo) {
            out.push_str("\nAblations relative to cipo (median pass@1):\n");
            for r in self.rows.iter().filter(|r| r.preset != Preset::Cipo) {
                let ord = if full.pass1 >= r.pass1 { ">=" } else { "<" };
                out.push_str(&format!(
                    "- cipo {:.4} {ord} {} {:.4}\n",
                    full.pass1, r.preset, r.pass1
                ));
            }
        }
        out
    }
}

/// Runs every preset for `seeds` consecutive seeds starting at
/// `config.seed` and aggregates medians. Run directories go to
/// `out_dir/<preset>/seed-<n>` when `out_dir` is given, alongside
/// `comparison.csv` and `comparison.md`.
pub fn run_sweep(
    config: &ExperimentConfig,
    presets: &[Preset],
    seeds: usize,
    out_dir: Option<&Path>,
    exec: Execution,
) -> Result<SweepOutput> {
    if seeds == 0 || presets.is_empty() {
        return Err(LabError::InvalidArgument("sweep needs at least one seed and one preset".into()));
    }
    let bank = bank_for(config)?;
    let jobs: Vec<(Preset, u64)> = presets
        .iter()
        .flat_map(|&p| (0..seeds as u64).map(move |i| (p, config.seed + i)))
        .collect();
    let runs = exec.try_map(&jobs, |_, &(preset, seed)| {
        let cfg = ExperimentConfig {
            preset,
            seed,
            ..config.clone()
        };
        let dir = out_dir.map(|d| d.join(preset.name()).join(format!("seed-{seed}")));
        let out = run_on_bank(&cfg, &bank, dir.as_deref(), exec)?;
        Ok::<_, LabError>(RunSummary::new(&cfg, &out.eval, &out.controller))
    })?;

    let rows: Vec<SweepRow> = presets
        .iter()
        .map(|&preset| {
            let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.preset == preset).collect();
            SweepRow {
                preset,
                seeds: mine.len(),
                pass1: median(mine.iter().map(|r| Some(r.pass1))).unwrap_or(0.0),
                pass_at_k: config
                    .eval_k
                    .iter()
                    .map(|&k| (k, median(mine.iter().map(|r| r.pass_at(k))).unwrap_or(0.0)))
                    .collect(),
                wrong_to_correct: median(mine.iter().map(|r| r.wrong_to_correct)),
                correct_to_wrong: median(mine.iter().map(|r| r.correct_to_wrong)),
                final_rho: median(mine.iter().map(|r| Some(r.final_rho))).unwrap_or(0.0),
            }
        })
        .collect();

    let output = SweepOutput { runs, rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
        let mut header = vec!["preset".to_string(), "seeds".into(), "pass1".into()];
        header.extend(config.eval_k.iter().map(|k| format!("pass_at_{k}")));
        header.extend(["wrong_to_correct", "correct_to_wrong", "final_rho"].map(String::from));
        w.write_record(&header)?;
        for r in &output.rows {
            let mut row = vec![r.preset.to_string(), r.seeds.to_string(), r.pass1.to_string()];
            row.extend(r.pass_at_k.iter().map(|(_, v)| v.to_string()));
            row.extend([opt(r.wrong_to_correct), opt(r.correct_to_wrong), r.final_rho.to_string()]);
            w.write_record(&row)?;
        }
        w.flush()?;
        std::fs::write(dir.join("comparison.md"), output.report())?;
    }
    Ok(output)
}

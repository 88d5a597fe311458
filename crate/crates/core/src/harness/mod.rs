//! Experiment harness: metrics emission, evaluation, correction-dataset
//! export and the run/sweep drivers.

pub mod eval;
pub mod export;
pub mod metrics;
pub mod runner;

pub use eval::{evaluate, pass_at_k, EvalReport, PassAtK};
pub use export::{export_correction_dataset, render_correction_prompt, CorrectionRecord};
pub use metrics::{MetricsWriter, StepMetrics};
pub use runner::{run_experiment, run_sweep, RunArtifacts, RunOutput, SweepOutput};

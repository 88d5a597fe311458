//! Domain types shared by every module: prompts, answers, contexts,
//! trajectories, rollout groups, controller state and the experiment
//! configuration.
//!
//! All types are immutable once built; constructors enforce the invariants
//! and everything else is an accessor.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub usize);

impl PromptId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn checked(self, prompts: usize) -> Result<Self> {
        if self.0 < prompts {
            Ok(self)
        } else {
            Err(LabError::OutOfRange {
                what: "prompt",
                index: self.0,
                bound: prompts,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Answer(pub usize);

impl Answer {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn checked(self, answers: usize) -> Result<Self> {
        if self.0 < answers {
            Ok(self)
        } else {
            Err(LabError::OutOfRange {
                what: "answer",
                index: self.0,
                bound: answers,
            })
        }
    }
}

/// Binary verifier outcome. Serialized as `0` / `1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Verdict {
    Incorrect,
    Correct,
}

impl Verdict {
    pub fn from_bool(correct: bool) -> Self {
        if correct {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        }
    }

    pub fn is_correct(self) -> bool {
        self == Verdict::Correct
    }

    pub fn value(self) -> f64 {
        match self {
            Verdict::Correct => 1.0,
            Verdict::Incorrect => 0.0,
        }
    }
}

impl From<Verdict> for u8 {
    fn from(v: Verdict) -> u8 {
        v.is_correct() as u8
    }
}

impl TryFrom<u8> for Verdict {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Verdict::Incorrect),
            1 => Ok(Verdict::Correct),
            other => Err(format!("verdict must be 0 or 1, got {other}")),
        }
    }
}

/// What the policy conditions on: a prompt, plus a replayed candidate answer
/// for correction contexts. The candidate's verdict is never part of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Context {
    pub prompt: PromptId,
    pub candidate: Option<Answer>,
}

impl Context {
    pub fn base(prompt: PromptId) -> Self {
        Context {
            prompt,
            candidate: None,
        }
    }

    pub fn correction(prompt: PromptId, candidate: Answer) -> Self {
        Context {
            prompt,
            candidate: Some(candidate),
        }
    }

    pub fn is_correction(&self) -> bool {
        self.candidate.is_some()
    }
}

/// One sampled answer with its verdict. Correction trajectories also carry
/// the shaped reward and the verdict of the candidate they were conditioned
/// on; both live outside the [`Context`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    context: Context,
    answer: Answer,
    log_prob: f64,
    reward: Verdict,
    shaped_reward: Option<f64>,
    conditioning_verdict: Option<Verdict>,
}

impl Trajectory {
    pub fn base(context: Context, answer: Answer, log_prob: f64, reward: Verdict) -> Result<Self> {
        if context.is_correction() {
            return Err(LabError::InvalidArgument(
                "base trajectory built on a correction context".into(),
            ));
        }
        Ok(Trajectory {
            context,
            answer,
            log_prob,
            reward,
            shaped_reward: None,
            conditioning_verdict: None,
        })
    }

    pub fn correction(
        context: Context,
        answer: Answer,
        log_prob: f64,
        reward: Verdict,
        conditioning_verdict: Verdict,
        shaped_reward: f64,
    ) -> Result<Self> {
        if !context.is_correction() {
            return Err(LabError::InvalidArgument(
                "correction trajectory built on a base context".into(),
            ));
        }
        if !shaped_reward.is_finite() {
            return Err(LabError::NonFinite(format!("shaped reward {shaped_reward}")));
        }
        Ok(Trajectory {
            context,
            answer,
            log_prob,
            reward,
            shaped_reward: Some(shaped_reward),
            conditioning_verdict: Some(conditioning_verdict),
        })
    }

    pub fn context(&self) -> Context {
        self.context
    }

    pub fn answer(&self) -> Answer {
        self.answer
    }

    pub fn log_prob(&self) -> f64 {
        self.log_prob
    }

    pub fn reward(&self) -> Verdict {
        self.reward
    }

    pub fn shaped_reward(&self) -> Option<f64> {
        self.shaped_reward
    }

    pub fn conditioning_verdict(&self) -> Option<Verdict> {
        self.conditioning_verdict
    }

    /// Shaped reward when present, raw reward otherwise.
    pub fn training_reward(&self) -> f64 {
        self.shaped_reward.unwrap_or_else(|| self.reward.value())
    }
}

/// A group of trajectories sampled at one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    context: Context,
    trajectories: Vec<Trajectory>,
    advantages: Option<Vec<f64>>,
    degenerate: bool,
}

impl RolloutGroup {
    pub fn new(context: Context, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(LabError::InvalidArgument("empty rollout group".into()));
        }
        if trajectories.iter().any(|t| t.context != context) {
            return Err(LabError::InvalidArgument(
                "trajectory context differs from its group context".into(),
            ));
        }
        Ok(RolloutGroup {
            context,
            trajectories,
            advantages: None,
            degenerate: false,
        })
    }

    pub fn with_advantages(mut self, advantages: Vec<f64>, degenerate: bool) -> Result<Self> {
        if advantages.len() != self.trajectories.len() {
            return Err(LabError::DimensionMismatch {
                expected: self.trajectories.len(),
                actual: advantages.len(),
            });
        }
        if let Some(a) = advantages.iter().find(|a| !a.is_finite()) {
            return Err(LabError::NonFinite(format!("advantage {a}")));
        }
        self.advantages = Some(advantages);
        self.degenerate = degenerate;
        Ok(self)
    }

    pub fn context(&self) -> Context {
        self.context
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn advantages(&self) -> Option<&[f64]> {
        self.advantages.as_deref()
    }

    /// Zero reward variance; set together with the advantages.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn pass_count(&self) -> usize {
        self.trajectories
            .iter()
            .filter(|t| t.reward.is_correct())
            .count()
    }
}

/// Adaptive replay ratio state: current ratio, last retention reward and the
/// consecutive-underperformance counter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayControllerState {
    rho: f64,
    prev_retention: Option<f64>,
    underperf_count: u32,
}

impl ReplayControllerState {
    pub fn initial(config: &ExperimentConfig) -> Self {
        ReplayControllerState {
            rho: config.rho0,
            prev_retention: None,
            underperf_count: 0,
        }
    }

    pub fn from_parts(
        rho: f64,
        prev_retention: Option<f64>,
        underperf_count: u32,
        config: &ExperimentConfig,
    ) -> Result<Self> {
        if !(config.rho_min..=config.rho_max).contains(&rho) {
            return Err(LabError::InvalidArgument(format!(
                "rho {rho} outside [{}, {}]",
                config.rho_min, config.rho_max
            )));
        }
        Ok(ReplayControllerState {
            rho,
            prev_retention,
            underperf_count,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn prev_retention(&self) -> Option<f64> {
        self.prev_retention
    }

    pub fn underperf_count(&self) -> u32 {
        self.underperf_count
    }

    pub(crate) fn advance(rho: f64, retention: f64, underperf_count: u32) -> Self {
        ReplayControllerState {
            rho,
            prev_retention: Some(retention),
            underperf_count,
        }
    }
}

/// Training recipe. Every preset except `grpo` runs the correction stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Grpo,
    Cipo,
    CipoFixedRatio,
    CipoNoRisk,
    CipoNoDifficulty,
    CipoOfflineReplay,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Grpo,
        Preset::Cipo,
        Preset::CipoFixedRatio,
        Preset::CipoNoRisk,
        Preset::CipoNoDifficulty,
        Preset::CipoOfflineReplay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Grpo => "grpo",
            Preset::Cipo => "cipo",
            Preset::CipoFixedRatio => "cipo-fixed-ratio",
            Preset::CipoNoRisk => "cipo-no-risk",
            Preset::CipoNoDifficulty => "cipo-no-difficulty",
            Preset::CipoOfflineReplay => "cipo-offline-replay",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| LabError::InvalidArgument(format!("unknown preset `{s}`")))
    }
}

/// Where correction candidates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayMode {
    /// Previous step's base rollouts; step 1 has no correction stream.
    Lagged,
    /// Current step's base rollouts.
    Synchronous,
}

/// Statistics used to normalize correction-group advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrectionAdvantageStats {
    /// Mean and deviation of the shaped rewards, penalties included.
    Shaped,
    /// Mean and deviation of the raw rewards, applied to the shaped values.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlReference {
    /// Frozen initial policy.
    Initial,
    /// Policy at the start of the current step.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultyLevel {
    pub fraction: f64,
    pub strength: f64,
}

/// All hyperparameters of a run. Field names are the configuration-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Prompt-bank size P.
    pub prompts: usize,
    /// Answer-space size A.
    pub answers: usize,
    /// Base rollouts per prompt G.
    pub group_size: usize,
    /// Prompts per base batch B.
    pub batch_prompts: usize,
    /// Correction batch fraction; floor(gamma * B) candidates are replayed.
    pub gamma: f64,
    /// Correction rollouts per replayed candidate n.
    pub correction_rollouts: usize,
    pub rho0: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    /// Target retention reward.
    pub r_star: f64,
    pub lambda_risk: f64,
    pub delta_low: f64,
    pub delta_high: f64,
    /// Correction-stream weight in the joint objective.
    pub lambda: f64,
    pub learning_rate: f64,
    pub kl_coef: f64,
    pub kl_reference: KlReference,
    pub steps: usize,
    pub seed: u64,
    pub bank_seed: u64,
    pub difficulty_profile: Vec<DifficultyLevel>,
    pub replay_mode: ReplayMode,
    pub correction_advantage_stats: CorrectionAdvantageStats,
    pub eval_samples: usize,
    pub eval_k: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: Preset::Cipo,
            prompts: 200,
            answers: 10,
            group_size: 8,
            batch_prompts: 32,
            gamma: 1.0,
            correction_rollouts: 8,
            rho0: 0.3,
            rho_min: 0.2,
            rho_max: 0.8,
            w1: 0.8,
            w2: 0.3,
            w3: 0.05,
            r_star: 0.80,
            lambda_risk: 1.0,
            delta_low: 3.0 / 8.0,
            delta_high: 6.0 / 8.0,
            lambda: 1.0,
            learning_rate: 5e-2,
            kl_coef: 1e-4,
            kl_reference: KlReference::Initial,
            steps: 300,
            seed: 0,
            bank_seed: 1,
            difficulty_profile: vec![
                DifficultyLevel {
                    fraction: 0.3,
                    strength: 0.0,
                },
                DifficultyLevel {
                    fraction: 0.4,
                    strength: 2.0,
                },
                DifficultyLevel {
                    fraction: 0.3,
                    strength: 5.0,
                },
            ],
            replay_mode: ReplayMode::Lagged,
            correction_advantage_stats: CorrectionAdvantageStats::Shaped,
            eval_samples: 32,
            eval_k: vec![1, 8, 32],
        }
    }
}

impl ExperimentConfig {
    pub fn with_preset(preset: Preset) -> Self {
        ExperimentConfig {
            preset,
            ..Default::default()
        }
    }

    /// Number of replayed candidates per step, floor(gamma * B).
    pub fn replay_count(&self) -> usize {
        (self.gamma * self.batch_prompts as f64).floor() as usize
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::parse("<config>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| LabError::parse(path, e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Lists every broken invariant; an empty list means the config is usable.
pub fn validate_config(config: &ExperimentConfig) -> Vec<String> {
    let mut violations = Vec::new();
    let mut check = |ok: bool, msg: String| {
        if !ok {
            violations.push(msg);
        }
    };

    let c = config;
    let reals = [
        ("gamma", c.gamma),
        ("rho0", c.rho0),
        ("rho_min", c.rho_min),
        ("rho_max", c.rho_max),
        ("w1", c.w1),
        ("w2", c.w2),
        ("w3", c.w3),
        ("r_star", c.r_star),
        ("lambda_risk", c.lambda_risk),
        ("delta_low", c.delta_low),
        ("delta_high", c.delta_high),
        ("lambda", c.lambda),
        ("learning_rate", c.learning_rate),
        ("kl_coef", c.kl_coef),
    ];
    for (name, v) in reals {
        check(v.is_finite(), format!("{name} must be finite, got {v}"));
    }

    check(
        0.0 < c.rho_min,
        format!("rho_min must be > 0, got {}", c.rho_min),
    );
    check(
        c.rho_min <= c.rho_max,
        format!("rho_min {} exceeds rho_max {}", c.rho_min, c.rho_max),
    );
    check(
        c.rho_max < 1.0,
        format!("rho_max must be < 1, got {}", c.rho_max),
    );
    check(
        c.rho_min <= c.rho0 && c.rho0 <= c.rho_max,
        format!(
            "rho0 {} outside [rho_min, rho_max] = [{}, {}]",
            c.rho0, c.rho_min, c.rho_max
        ),
    );
    check(
        0.0 <= c.delta_low,
        format!("delta_low must be >= 0, got {}", c.delta_low),
    );
    check(
        c.delta_high <= 1.0,
        format!("delta_high must be <= 1, got {}", c.delta_high),
    );
    check(
        c.delta_low <= c.delta_high,
        format!(
            "difficulty window ordering: delta_low {} exceeds delta_high {}",
            c.delta_low, c.delta_high
        ),
    );
    check(
        c.group_size >= 2,
        format!("group_size must be >= 2, got {}", c.group_size),
    );
    check(c.lambda >= 0.0, format!("lambda must be >= 0, got {}", c.lambda));
    check(
        c.lambda_risk >= 0.0,
        format!("lambda_risk must be >= 0, got {}", c.lambda_risk),
    );

    check(c.prompts >= 1, "prompts must be >= 1".into());
    check(
        c.answers >= 2,
        format!("answers must be >= 2, got {}", c.answers),
    );
    check(
        1 <= c.batch_prompts && c.batch_prompts <= c.prompts,
        format!(
            "batch_prompts {} outside [1, prompts = {}]",
            c.batch_prompts, c.prompts
        ),
    );
    check(c.gamma >= 0.0, format!("gamma must be >= 0, got {}", c.gamma));
    check(
        c.replay_count() <= c.batch_prompts * c.group_size,
        format!(
            "replay count floor(gamma * B) = {} exceeds the base pool of {} trajectories",
            c.replay_count(),
            c.batch_prompts * c.group_size
        ),
    );
    check(
        c.correction_rollouts >= 2,
        format!(
            "correction_rollouts must be >= 2, got {}",
            c.correction_rollouts
        ),
    );
    check(
        c.learning_rate > 0.0,
        format!("learning_rate must be > 0, got {}", c.learning_rate),
    );
    check(
        c.kl_coef >= 0.0,
        format!("kl_coef must be >= 0, got {}", c.kl_coef),
    );
    check(c.steps >= 1, "steps must be >= 1".into());

    let fraction_sum: f64 = c.difficulty_profile.iter().map(|l| l.fraction).sum();
    check(
        !c.difficulty_profile.is_empty() && (fraction_sum - 1.0).abs() <= 1e-9,
        format!("difficulty_profile fractions sum to {fraction_sum}, expected 1"),
    );
    check(
        c.difficulty_profile
            .iter()
            .all(|l| l.fraction >= 0.0 && l.strength.is_finite() && l.strength >= 0.0),
        "difficulty_profile needs nonnegative fractions and finite nonnegative strengths".into(),
    );

    check(!c.eval_k.is_empty(), "eval_k must not be empty".into());
    check(
        c.eval_k.iter().all(|&k| k >= 1 && k <= c.eval_samples),
        format!(
            "every eval_k must lie in [1, eval_samples = {}], got {:?}",
            c.eval_samples, c.eval_k
        ),
    );

    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        assert!(validate_config(&ExperimentConfig::default()).is_empty());
    }

    #[test]
    fn default_controller_constants() {
        let c = ExperimentConfig::default();
        assert_eq!(c.rho0, 0.3);
        assert_eq!((c.rho_min, c.rho_max), (0.2, 0.8));
        assert_eq!((c.w1, c.w2, c.w3), (0.8, 0.3, 0.05));
        assert_eq!(c.r_star, 0.80);
        assert_eq!(c.lambda_risk, 1.0);
        assert_eq!((c.delta_low, c.delta_high), (0.375, 0.75));
        assert_eq!(c.correction_rollouts, 8);
        assert_eq!(c.lambda, 1.0);
    }

    #[test]
    fn rho0_above_max_names_rho0() {
        let c = ExperimentConfig {
            rho0: 0.9,
            ..Default::default()
        };
        let v = validate_config(&c);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("rho0"));
    }

    #[test]
    fn inverted_window_reports_ordering() {
        let c = ExperimentConfig {
            delta_low: 0.9,
            delta_high: 0.1,
            ..Default::default()
        };
        let v = validate_config(&c);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("window ordering"));
    }

    #[test]
    fn group_size_one_rejected() {
        let c = ExperimentConfig {
            group_size: 1,
            ..Default::default()
        };
        assert_eq!(validate_config(&c).len(), 1);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ExperimentConfig::with_preset(Preset::CipoNoRisk);
        let text = c.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);

        let partial = ExperimentConfig::from_toml_str("preset = \"grpo\"\nsteps = 5\n").unwrap();
        assert_eq!(partial.preset, Preset::Grpo);
        assert_eq!(partial.steps, 5);
        assert_eq!(partial.prompts, 200);

        let err = ExperimentConfig::from_toml_str("stepz = 5\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn trajectory_extras_travel_together() {
        let base = Trajectory::base(
            Context::base(PromptId(0)),
            Answer(1),
            -0.1,
            Verdict::Correct,
        )
        .unwrap();
        assert!(base.shaped_reward().is_none() && base.conditioning_verdict().is_none());

        let ctx = Context::correction(PromptId(0), Answer(2));
        let cor = Trajectory::correction(ctx, Answer(1), -0.1, Verdict::Incorrect, Verdict::Correct, -1.0)
            .unwrap();
        assert!(cor.shaped_reward().is_some() && cor.conditioning_verdict().is_some());

        assert!(Trajectory::base(ctx, Answer(1), 0.0, Verdict::Correct).is_err());
        assert!(Trajectory::correction(
            Context::base(PromptId(0)),
            Answer(1),
            0.0,
            Verdict::Correct,
            Verdict::Correct,
            1.0
        )
        .is_err());
    }

    #[test]
    fn context_serialization_has_no_verdict() {
        let ctx = Context::correction(PromptId(3), Answer(4));
        let json = serde_json::to_string(&ctx).unwrap();
        assert_eq!(json, r#"{"prompt":3,"candidate":4}"#);
        assert!(!json.contains("verdict") && !json.contains("correct"));
    }

    #[test]
    fn group_rejects_mixed_contexts() {
        let t0 = Trajectory::base(Context::base(PromptId(0)), Answer(0), 0.0, Verdict::Correct).unwrap();
        let t1 = Trajectory::base(Context::base(PromptId(1)), Answer(0), 0.0, Verdict::Correct).unwrap();
        assert!(RolloutGroup::new(Context::base(PromptId(0)), vec![t0.clone(), t1]).is_err());
        let g = RolloutGroup::new(Context::base(PromptId(0)), vec![t0.clone(), t0]).unwrap();
        assert!(g.clone().with_advantages(vec![0.0], false).is_err());
        assert!(g.with_advantages(vec![0.0, 0.0], true).unwrap().is_degenerate());
    }
}

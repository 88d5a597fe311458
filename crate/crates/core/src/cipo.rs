//! Correction-oriented policy optimization.
//!
//! Each step runs the ordinary base stream and a correction stream: replayed
//! base trajectories become correction contexts `(prompt, candidate)`, the
//! policy answers again at those contexts, and the new answers are rewarded
//! with a penalty for breaking a correct candidate. Replay prefers
//! medium-difficulty prompts, and the share of correct candidates is steered
//! by a feedback controller on the retention reward.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::PromptBank;
use crate::error::{LabError, Result};
use crate::exec::Execution;
use crate::grpo::{
    base_rollouts, mean_kl, normalize_against, policy_gradient_step, sample_answers, step_metrics,
    StepRecord, TrainState, UpdateBatch,
};
use crate::harness::metrics::StepMetrics;
use crate::policy::PolicyParams;
use crate::seeding::{substream, Stream};
use crate::types::{
    Answer, Context, CorrectionAdvantageStats, ExperimentConfig, Preset, PromptId,
    ReplayControllerState, ReplayMode, RolloutGroup, Trajectory, Verdict,
};

/// A replayed base trajectory: prompt, answer, its verdict and the pass rate
/// of its prompt in the pool it came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayCandidate {
    pub prompt: PromptId,
    pub answer: Answer,
    pub verdict: Verdict,
    pub source_pass_rate: f64,
}

impl ReplayCandidate {
    /// The verdict-blind context the policy sees.
    pub fn context(&self) -> Context {
        Context::correction(self.prompt, self.answer)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionGroup {
    pub candidate: ReplayCandidate,
    /// Trajectories carry shaped rewards; advantages are set.
    pub group: RolloutGroup,
}

/// Fraction of the group's trajectories that verified correct.
pub fn empirical_pass_rate(group: &RolloutGroup) -> Result<f64> {
    if group.is_empty() {
        return Err(LabError::InvalidArgument("empty group".into()));
    }
    Ok(group.pass_count() as f64 / group.len() as f64)
}

/// Closed-interval membership in the difficulty window.
pub fn medium_filter(pass_rate: f64, delta_low: f64, delta_high: f64) -> bool {
    delta_low <= pass_rate && pass_rate <= delta_high
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySelection {
    /// Successes first, then failures.
    pub candidates: Vec<ReplayCandidate>,
    /// Successes selected, after backfill.
    pub n_pos: usize,
    pub n_neg: usize,
    /// Successes selected before backfill, `min(floor(rho N), |B+|)`.
    pub n_pos_initial: usize,
    /// Trajectories whose prompt fell inside the window.
    pub medium_pool: usize,
    /// Fewer than the requested number of candidates were available.
    pub short: bool,
}

/// Difficulty-aware, ratio-controlled replay selection.
///
/// Trajectories of in-window prompts are shuffled and placed ahead of the
/// shuffled remainder; the ordered pool is split by verdict and
/// `min(floor(rho N), |B+|)` successes plus up to `N - N+` failures are
/// taken, any shortfall being backfilled with further successes.
pub fn rollout_replay<R: Rng + ?Sized>(
    base_groups: &[RolloutGroup],
    delta_low: f64,
    delta_high: f64,
    target: usize,
    rho: f64,
    rng: &mut R,
) -> ReplaySelection {
    // pass rate per prompt over every trajectory of that prompt in the pool
    let mut tallies: HashMap<PromptId, (usize, usize)> = HashMap::new();
    for g in base_groups {
        let e = tallies.entry(g.context().prompt).or_default();
        e.0 += g.pass_count();
        e.1 += g.len();
    }
    let pass_rate = |p: PromptId| {
        let (c, n) = tallies[&p];
        c as f64 / n as f64
    };

    let mut medium = Vec::new();
    let mut rest = Vec::new();
    for g in base_groups {
        let prompt = g.context().prompt;
        let rate = pass_rate(prompt);
        let bucket = if medium_filter(rate, delta_low, delta_high) {
            &mut medium
        } else {
            &mut rest
        };
        bucket.extend(g.trajectories().iter().map(|t: &Trajectory| ReplayCandidate {
            prompt,
            answer: t.answer(),
            verdict: t.reward(),
            source_pass_rate: rate,
        }));
    }
    let medium_pool = medium.len();
    medium.shuffle(rng);
    rest.shuffle(rng);

    let (positives, negatives): (Vec<_>, Vec<_>) = medium
        .into_iter()
        .chain(rest)
        .partition(|c| c.verdict.is_correct());

    let wanted_pos = (rho * target as f64).floor() as usize;
    let n_pos_initial = wanted_pos.min(positives.len());
    let n_neg = (target - n_pos_initial).min(negatives.len());
    let n_pos = (target - n_neg).min(positives.len());

    let mut candidates = Vec::with_capacity(n_pos + n_neg);
    candidates.extend_from_slice(&positives[..n_pos]);
    candidates.extend_from_slice(&negatives[..n_neg]);
    ReplaySelection {
        short: candidates.len() < target,
        candidates,
        n_pos,
        n_neg,
        n_pos_initial,
        medium_pool,
    }
}

/// New reward minus `lambda_risk` when a correct candidate led to an
/// incorrect answer.
pub fn shaped_reward(conditioning_verdict: Verdict, new_reward: Verdict, lambda_risk: f64) -> f64 {
    let regression = conditioning_verdict.is_correct() && !new_reward.is_correct();
    new_reward.value() - if regression { lambda_risk } else { 0.0 }
}

/// Feedback update of the replay ratio from the retention reward `R_t`:
///
/// `rho' = clip(rho * (1 + w1 (R* - R_t) + w2 max(0, R_prev - R_t) + w3 min(c, 3)), rho_min, rho_max)`
///
/// where `c` counts consecutive steps with `R_t < R*` (reset to 0 otherwise)
/// and the `w2` term is 0 when there is no previous retention.
pub fn update_ratio(
    state: ReplayControllerState,
    retention: f64,
    config: &ExperimentConfig,
) -> ReplayControllerState {
    let count = if retention < config.r_star {
        state.underperf_count().saturating_add(1)
    } else {
        0
    };
    let gap = config.r_star - retention;
    let decline = state
        .prev_retention()
        .map_or(0.0, |prev| (prev - retention).max(0.0));
    let persistence = f64::from(count.min(3));
    let factor = 1.0 + config.w1 * gap + config.w2 * decline + config.w3 * persistence;
    let rho = (state.rho() * factor).clamp(config.rho_min, config.rho_max);
    ReplayControllerState::advance(rho, retention, count)
}

/// Mean shaped reward over correction trajectories conditioned on correct
/// candidates; `None` when there are none.
pub fn retention_reward(correction_groups: &[CorrectionGroup]) -> Option<f64> {
    let shaped: Vec<f64> = correction_groups
        .iter()
        .flat_map(|cg| cg.group.trajectories())
        .filter(|t| t.conditioning_verdict() == Some(Verdict::Correct))
        .map(|t| t.training_reward())
        .collect();
    (!shaped.is_empty()).then(|| shaped.iter().sum::<f64>() / shaped.len() as f64)
}

/// Rolls out `count` answers at the candidate's correction context, shapes
/// their rewards and attaches per-group advantages.
pub fn rollout_correction_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    candidate: ReplayCandidate,
    count: usize,
    rng: &mut R,
    bank: &PromptBank,
    lambda_risk: f64,
    stats: CorrectionAdvantageStats,
) -> Result<CorrectionGroup> {
    if count < 2 {
        return Err(LabError::InvalidArgument(format!(
            "correction group size must be >= 2, got {count}"
        )));
    }
    let context = candidate.context();
    let trajectories = sample_answers(params, context, count, rng, bank)?
        .into_iter()
        .map(|(answer, log_prob, reward)| {
            let shaped = shaped_reward(candidate.verdict, reward, lambda_risk);
            Trajectory::correction(context, answer, log_prob, reward, candidate.verdict, shaped)
        })
        .collect::<Result<Vec<_>>>()?;

    let shaped: Vec<f64> = trajectories.iter().map(Trajectory::training_reward).collect();
    let adv = match stats {
        CorrectionAdvantageStats::Shaped => normalize_against(&shaped, &shaped)?,
        CorrectionAdvantageStats::Raw => {
            let raw: Vec<f64> = trajectories.iter().map(|t| t.reward().value()).collect();
            normalize_against(&shaped, &raw)?
        }
    };
    let group = RolloutGroup::new(context, trajectories)?.with_advantages(adv.values, adv.degenerate)?;
    Ok(CorrectionGroup { candidate, group })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReplaySource {
    Lagged,
    Synchronous,
    Offline,
}

/// Step behaviour implied by the preset on top of the raw config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub correction_stream: bool,
    pub adaptive_ratio: bool,
    pub lambda_risk: f64,
    pub delta_low: f64,
    pub delta_high: f64,
    source: ReplaySource,
}

impl TrainOptions {
    pub fn for_config(config: &ExperimentConfig) -> Self {
        let preset = config.preset;
        let (delta_low, delta_high) = if preset == Preset::CipoNoDifficulty {
            // every prompt is in-window, so the pool is one shuffled block
            (0.0, 1.0)
        } else {
            (config.delta_low, config.delta_high)
        };
        TrainOptions {
            correction_stream: preset != Preset::Grpo,
            adaptive_ratio: preset != Preset::CipoFixedRatio,
            lambda_risk: if preset == Preset::CipoNoRisk {
                0.0
            } else {
                config.lambda_risk
            },
            delta_low,
            delta_high,
            source: match (preset, config.replay_mode) {
                (Preset::CipoOfflineReplay, _) => ReplaySource::Offline,
                (_, ReplayMode::Lagged) => ReplaySource::Lagged,
                (_, ReplayMode::Synchronous) => ReplaySource::Synchronous,
            },
        }
    }
}

/// Output of one CIPO step beyond the metrics record.
#[derive(Debug, Clone)]
pub struct CipoStepOutput {
    pub state: TrainState,
    pub metrics: StepMetrics,
    pub selection: Option<ReplaySelection>,
}

/// One CIPO step: base rollouts, replay selection from the configured pool,
/// shaped correction rollouts, a joint update with the correction stream
/// weighted by `lambda`, then the ratio controller (skipped when there is
/// no retention signal).
pub fn cipo_train_step(
    state: TrainState,
    config: &ExperimentConfig,
    bank: &PromptBank,
    exec: Execution,
) -> Result<CipoStepOutput> {
    let started = Instant::now();
    let options = TrainOptions::for_config(config);
    let step = state.completed + 1;
    let base = base_rollouts(&state, config, bank, exec, step)?;

    let target = config.replay_count();
    let pool: Option<&[RolloutGroup]> = if !options.correction_stream || target == 0 {
        None
    } else {
        match options.source {
            ReplaySource::Lagged => state.previous_base.as_deref(),
            ReplaySource::Synchronous => Some(&base),
            ReplaySource::Offline => state.frozen_pool.as_deref(),
        }
    };

    let rho_used = state.controller.rho();
    let selection = pool.map(|pool| {
        let mut rng = substream(config.seed, Stream::ReplayShuffle, step as u64, 0);
        rollout_replay(pool, options.delta_low, options.delta_high, target, rho_used, &mut rng)
    });

    let corrections: Vec<CorrectionGroup> = match &selection {
        Some(sel) => exec.try_map(&sel.candidates, |slot, &candidate| {
            let mut rng = substream(config.seed, Stream::CorrectionRollout, step as u64, slot as u64);
            rollout_correction_group(
                &state.params,
                candidate,
                config.correction_rollouts,
                &mut rng,
                bank,
                options.lambda_risk,
                config.correction_advantage_stats,
            )
        })?,
        None => Vec::new(),
    };

    let mut batch = UpdateBatch {
        correction_weight: config.lambda,
        ..Default::default()
    };
    for g in &base {
        batch.push_group(g, bank)?;
    }
    for cg in &corrections {
        batch.push_correction_group(&cg.group, bank)?;
    }
    let reference = state.kl_reference(config);
    let kl_mean = mean_kl(&state.params, reference, &batch.kl_contexts)?;
    let params = policy_gradient_step(
        &state.params,
        reference,
        &batch,
        config.learning_rate,
        config.kl_coef,
    )
    .map_err(|e| LabError::Divergence {
        step,
        detail: e.to_string(),
    })?;

    let retention = retention_reward(&corrections);
    let controller = match retention {
        Some(r) if options.adaptive_ratio => update_ratio(state.controller, r, config),
        _ => state.controller,
    };

    let metrics = step_metrics(StepRecord {
        step,
        base: &base,
        corrections: &corrections,
        selection: selection.as_ref(),
        rho_used,
        retention,
        controller_after: controller,
        kl_mean,
        started,
    });

    let frozen_pool = match (state.frozen_pool, options.source) {
        (None, ReplaySource::Offline) => Some(base.clone()),
        (pool, _) => pool,
    };
    let next = TrainState {
        params,
        initial_params: state.initial_params,
        controller,
        completed: step,
        previous_base: Some(base),
        frozen_pool,
    };
    Ok(CipoStepOutput {
        state: next,
        metrics,
        selection,
    })
}

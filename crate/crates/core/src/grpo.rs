//! Group rollouts, group-relative advantages and the regularized
//! policy-gradient update shared by the GRPO baseline and CIPO.

use std::time::Instant;

use rand::seq::index;
use rand::Rng;

use crate::cipo::{CorrectionGroup, ReplaySelection};
use crate::envs::{initial_policy_params, verify, PromptBank};
use crate::error::{LabError, Result};
use crate::exec::Execution;
use crate::harness::metrics::StepMetrics;
use crate::policy::{
    action_distribution, featurize, kl_to_reference, sample_action, FeatureVector, Gradient,
    PolicyParams,
};
use crate::seeding::{substream, Stream};
use crate::types::{
    Answer, Context, ExperimentConfig, KlReference, PromptId, ReplayControllerState,
    RolloutGroup, Trajectory, Verdict,
};

/// Draws `count` independent answers at `context` and verifies each.
pub fn sample_answers<R: Rng + ?Sized>(
    params: &PolicyParams,
    context: Context,
    count: usize,
    rng: &mut R,
    bank: &PromptBank,
) -> Result<Vec<(Answer, f64, Verdict)>> {
    let features = featurize(context, bank.prompts(), bank.answers())?;
    let dist = action_distribution(params, &features)?;
    (0..count)
        .map(|_| {
            let (answer, log_prob) = sample_action(&dist, rng);
            Ok((answer, log_prob, verify(bank, context.prompt, answer)?))
        })
        .collect()
}

/// Samples a base-context group of `group_size` verified trajectories.
/// Advantages are left unset.
pub fn rollout_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    context: Context,
    group_size: usize,
    rng: &mut R,
    bank: &PromptBank,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(LabError::InvalidArgument(format!(
            "group size must be >= 2, got {group_size}"
        )));
    }
    let trajectories = sample_answers(params, context, group_size, rng, bank)?
        .into_iter()
        .map(|(answer, log_prob, reward)| Trajectory::base(context, answer, log_prob, reward))
        .collect::<Result<Vec<_>>>()?;
    RolloutGroup::new(context, trajectories)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAdvantages {
    pub values: Vec<f64>,
    /// Zero reward variance; all advantages are 0.
    pub degenerate: bool,
}

/// `(r_i - mean) / std` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<GroupAdvantages> {
    normalize_against(rewards, rewards)
}

/// Normalizes `values` with the mean and population deviation of
/// `statistics`. A zero-variance `statistics` yields all-zero advantages.
pub fn normalize_against(values: &[f64], statistics: &[f64]) -> Result<GroupAdvantages> {
    if statistics.len() < 2 || values.len() != statistics.len() {
        return Err(LabError::InvalidArgument(format!(
            "group advantages need >= 2 rewards, got {} (statistics over {})",
            values.len(),
            statistics.len()
        )));
    }
    let n = statistics.len() as f64;
    let mean = statistics.iter().sum::<f64>() / n;
    let var = statistics.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = statistics.iter().fold(1.0f64, |m, r| m.max(r.abs()));
    if std <= 1e-12 * scale {
        return Ok(GroupAdvantages {
            values: vec![0.0; values.len()],
            degenerate: true,
        });
    }
    Ok(GroupAdvantages {
        values: values.iter().map(|r| (r - mean) / std).collect(),
        degenerate: false,
    })
}

/// Attaches raw-reward group advantages to a base group.
pub fn with_group_advantages(group: RolloutGroup) -> Result<RolloutGroup> {
    let rewards: Vec<f64> = group
        .trajectories()
        .iter()
        .map(|t| t.reward().value())
        .collect();
    let adv = group_advantages(&rewards)?;
    group.with_advantages(adv.values, adv.degenerate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateItem {
    pub features: FeatureVector,
    pub answer: Answer,
    pub advantage: f64,
}

/// Summands of one update. Each stream contributes its mean gradient; the
/// correction stream is scaled by `correction_weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateBatch {
    pub items: Vec<UpdateItem>,
    pub correction_items: Vec<UpdateItem>,
    pub correction_weight: f64,
    pub kl_contexts: Vec<FeatureVector>,
}

impl UpdateBatch {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty() && self.correction_items.is_empty()
    }

    pub fn push_group(&mut self, group: &RolloutGroup, bank: &PromptBank) -> Result<()> {
        self.push_into(group, bank, false)
    }

    pub fn push_correction_group(&mut self, group: &RolloutGroup, bank: &PromptBank) -> Result<()> {
        self.push_into(group, bank, true)
    }

    fn push_into(&mut self, group: &RolloutGroup, bank: &PromptBank, correction: bool) -> Result<()> {
        let advantages = group
            .advantages()
            .ok_or_else(|| LabError::InvalidArgument("group has no advantages".into()))?;
        let features = featurize(group.context(), bank.prompts(), bank.answers())?;
        let target = if correction {
            &mut self.correction_items
        } else {
            &mut self.items
        };
        for (t, &advantage) in group.trajectories().iter().zip(advantages) {
            target.push(UpdateItem {
                features: features.clone(),
                answer: t.answer(),
                advantage,
            });
        }
        self.kl_contexts.push(features);
        Ok(())
    }
}

fn mean_policy_gradient(params: &PolicyParams, items: &[UpdateItem]) -> Result<Gradient> {
    let mut g = Gradient::zeros_like(params);
    let scale = 1.0 / items.len() as f64;
    for item in items {
        if !item.advantage.is_finite() {
            return Err(LabError::NonFinite(format!("advantage {}", item.advantage)));
        }
        if item.advantage != 0.0 {
            g.add_log_prob(params, &item.features, item.answer, item.advantage * scale)?;
        }
    }
    Ok(g)
}

/// One ascent step on the batch objective minus `kl_coef` times the mean
/// KL to `reference` over the batch's KL contexts. Items are accumulated in
/// batch order.
pub fn policy_gradient_step(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &UpdateBatch,
    learning_rate: f64,
    kl_coef: f64,
) -> Result<PolicyParams> {
    if batch.is_empty() {
        return Err(LabError::InvalidArgument("empty update batch".into()));
    }
    let mut grad = Gradient::zeros_like(params);
    if !batch.items.is_empty() {
        grad.add_scaled(&mean_policy_gradient(params, &batch.items)?, 1.0);
    }
    if !batch.correction_items.is_empty() {
        let g = mean_policy_gradient(params, &batch.correction_items)?;
        grad.add_scaled(&g, batch.correction_weight);
    }
    if kl_coef != 0.0 && !batch.kl_contexts.is_empty() {
        let scale = -kl_coef / batch.kl_contexts.len() as f64;
        for f in &batch.kl_contexts {
            grad.add_kl(params, reference, f, scale)?;
        }
    }
    if !grad.is_finite() {
        return Err(LabError::NonFinite("policy gradient".into()));
    }
    let mut next = params.clone();
    for (w, g) in next.as_mut_slice().iter_mut().zip(grad.as_slice()) {
        *w += learning_rate * g;
    }
    if !next.is_finite() {
        return Err(LabError::NonFinite("updated parameters".into()));
    }
    Ok(next)
}

/// Everything carried between training steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: PolicyParams,
    /// Frozen initial policy used as the KL reference.
    pub initial_params: PolicyParams,
    pub controller: ReplayControllerState,
    /// Completed steps; the next step is `completed + 1`.
    pub completed: usize,
    /// Previous step's base groups, for lagged replay.
    pub previous_base: Option<Vec<RolloutGroup>>,
    /// Step-1 base groups, for offline replay.
    pub frozen_pool: Option<Vec<RolloutGroup>>,
}

impl TrainState {
    pub fn new(bank: &PromptBank, config: &ExperimentConfig) -> Self {
        let params = initial_policy_params(bank);
        TrainState {
            initial_params: params.clone(),
            params,
            controller: ReplayControllerState::initial(config),
            completed: 0,
            previous_base: None,
            frozen_pool: None,
        }
    }

    pub(crate) fn kl_reference<'a>(&'a self, config: &ExperimentConfig) -> &'a PolicyParams {
        match config.kl_reference {
            KlReference::Initial => &self.initial_params,
            KlReference::Previous => &self.params,
        }
    }
}

/// Samples B distinct prompts and rolls out one base group per prompt slot,
/// each slot on its own substream.
pub(crate) fn base_rollouts(
    state: &TrainState,
    config: &ExperimentConfig,
    bank: &PromptBank,
    exec: Execution,
    step: usize,
) -> Result<Vec<RolloutGroup>> {
    let mut rng = substream(config.seed, Stream::PromptSampling, step as u64, 0);
    let prompts: Vec<PromptId> = index::sample(&mut rng, bank.prompts(), config.batch_prompts)
        .into_iter()
        .map(PromptId)
        .collect();
    exec.try_map(&prompts, |slot, &prompt| {
        let mut rng = substream(config.seed, Stream::BaseRollout, step as u64, slot as u64);
        let group = rollout_group(
            &state.params,
            Context::base(prompt),
            config.group_size,
            &mut rng,
            bank,
        )?;
        with_group_advantages(group)
    })
}

/// Parts of a finished step used to assemble its metrics record.
pub(crate) struct StepRecord<'a> {
    pub step: usize,
    pub base: &'a [RolloutGroup],
    pub corrections: &'a [CorrectionGroup],
    pub selection: Option<&'a ReplaySelection>,
    pub rho_used: f64,
    pub retention: Option<f64>,
    pub controller_after: ReplayControllerState,
    pub kl_mean: f64,
    pub started: Instant,
}

pub(crate) fn mean_kl(
    params: &PolicyParams,
    reference: &PolicyParams,
    contexts: &[FeatureVector],
) -> Result<f64> {
    if contexts.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for f in contexts {
        total += kl_to_reference(params, reference, f)?;
    }
    Ok(total / contexts.len() as f64)
}

pub(crate) fn step_metrics(record: StepRecord<'_>) -> StepMetrics {
    let base_trajectories: usize = record.base.iter().map(RolloutGroup::len).sum();
    let base_passes: usize = record.base.iter().map(RolloutGroup::pass_count).sum();
    let degenerate_groups = record.base.iter().filter(|g| g.is_degenerate()).count();

    let mut correction_trajectories = 0usize;
    let mut shaped_total = 0.0;
    let (mut from_wrong, mut wrong_fixed) = (0usize, 0usize);
    let (mut from_right, mut right_broken) = (0usize, 0usize);
    for cg in record.corrections {
        for t in cg.group.trajectories() {
            correction_trajectories += 1;
            shaped_total += t.training_reward();
            if cg.candidate.verdict.is_correct() {
                from_right += 1;
                right_broken += usize::from(!t.reward().is_correct());
            } else {
                from_wrong += 1;
                wrong_fixed += usize::from(t.reward().is_correct());
            }
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);

    StepMetrics {
        step: record.step,
        base_mean_reward: base_passes as f64 / base_trajectories.max(1) as f64,
        base_trajectories,
        degenerate_groups,
        correction_groups: record.corrections.len(),
        correction_trajectories,
        correction_mean_shaped_reward: (correction_trajectories > 0)
            .then(|| shaped_total / correction_trajectories as f64),
        retention: record.retention,
        rho: record.rho_used,
        rho_next: record.controller_after.rho(),
        underperf_count: record.controller_after.underperf_count(),
        replay_pos: record.selection.map_or(0, |s| s.n_pos),
        replay_neg: record.selection.map_or(0, |s| s.n_neg),
        medium_pool: record.selection.map_or(0, |s| s.medium_pool),
        short_replay: record.selection.is_some_and(|s| s.short),
        wrong_to_correct: ratio(wrong_fixed, from_wrong),
        correct_to_wrong: ratio(right_broken, from_right),
        kl_to_reference: record.kl_mean,
        wall_clock_ms: record.started.elapsed().as_secs_f64() * 1e3,
    }
}

/// One GRPO step: B base groups, raw-reward advantages, one update.
pub fn grpo_train_step(
    state: TrainState,
    config: &ExperimentConfig,
    bank: &PromptBank,
    exec: Execution,
) -> Result<(TrainState, StepMetrics)> {
    let started = Instant::now();
    let step = state.completed + 1;
    let base = base_rollouts(&state, config, bank, exec, step)?;

    let mut batch = UpdateBatch::default();
    for g in &base {
        batch.push_group(g, bank)?;
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

    let metrics = step_metrics(StepRecord {
        step,
        base: &base,
        corrections: &[],
        selection: None,
        rho_used: state.controller.rho(),
        retention: None,
        controller_after: state.controller,
        kl_mean,
        started,
    });
    let next = TrainState {
        params,
        completed: step,
        previous_base: Some(base),
        ..state
    };
    Ok((next, metrics))
}

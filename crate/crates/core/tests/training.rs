//! End-to-end behaviour of the training loops on small configurations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cipo_core::cipo::{cipo_train_step, rollout_correction_group, ReplayCandidate};
use cipo_core::envs::{generate_bank, initial_policy_params, PromptBank};
use cipo_core::grpo::{grpo_train_step, TrainState};
use cipo_core::harness::runner::bank_for;
use cipo_core::harness::metrics::read_metrics;
use cipo_core::harness::{evaluate, run_experiment, StepMetrics};
use cipo_core::types::{CorrectionAdvantageStats, DifficultyLevel, ReplayMode};
use cipo_core::{
    Answer, Execution, ExperimentConfig, LabError, Preset, PromptId, RolloutGroup, Verdict,
};

fn small(preset: Preset) -> ExperimentConfig {
    ExperimentConfig {
        preset,
        prompts: 40,
        batch_prompts: 8,
        steps: 20,
        seed: 3,
        ..ExperimentConfig::default()
    }
}

/// Serialized form, which leaves out the wall-clock field.
fn json(metrics: &[StepMetrics]) -> Vec<String> {
    metrics.iter().map(|m| serde_json::to_string(m).unwrap()).collect()
}

fn advantages(groups: &[RolloutGroup]) -> Vec<Vec<f64>> {
    groups.iter().map(|g| g.advantages().unwrap().to_vec()).collect()
}

#[test]
fn base_advantages_ignore_the_correction_stream() {
    // synchronous replay: the step-1 base groups feed that step's corrections,
    // so every variant below runs a different correction stream in the same step
    let base = ExperimentConfig {
        replay_mode: ReplayMode::Synchronous,
        ..small(Preset::Cipo)
    };
    let variants = [
        base.clone(),
        ExperimentConfig { lambda_risk: 0.0, ..base.clone() },
        ExperimentConfig { gamma: 0.25, ..base.clone() },
        ExperimentConfig { correction_rollouts: 3, ..base.clone() },
        ExperimentConfig { correction_advantage_stats: CorrectionAdvantageStats::Raw, ..base.clone() },
        ExperimentConfig { preset: Preset::Grpo, ..base.clone() },
    ];
    let bank = bank_for(&base).unwrap();
    let mut reference = None;
    for config in &variants {
        let state = TrainState::new(&bank, config);
        let next = if config.preset == Preset::Grpo {
            grpo_train_step(state, config, &bank, Execution::Sequential).unwrap().0
        } else {
            cipo_train_step(state, config, &bank, Execution::Sequential).unwrap().state
        };
        let adv = advantages(next.previous_base.as_ref().unwrap());
        match &reference {
            None => reference = Some(adv),
            Some(r) => assert_eq!(r, &adv, "base advantages changed for {config:?}"),
        }
    }
}

#[test]
fn correction_rollouts_are_verdict_blind() {
    let config = ExperimentConfig::default();
    let bank = bank_for(&config).unwrap();
    let params = initial_policy_params(&bank);
    for prompt in [0, 77, 150, 199] {
        for answer in 0..config.answers {
            let rollout = |verdict| {
                let candidate = ReplayCandidate {
                    prompt: PromptId(prompt),
                    answer: Answer(answer),
                    verdict,
                    source_pass_rate: 0.5,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(prompt as u64 * 31 + answer as u64);
                rollout_correction_group(&params, candidate, 8, &mut rng, &bank, 1.0, CorrectionAdvantageStats::Shaped)
                    .unwrap()
            };
            let right = rollout(Verdict::Correct);
            let wrong = rollout(Verdict::Incorrect);
            let draws = |g: &cipo_core::cipo::CorrectionGroup| {
                g.group
                    .trajectories()
                    .iter()
                    .map(|t| (t.answer(), t.log_prob().to_bits(), t.reward()))
                    .collect::<Vec<_>>()
            };
            assert_eq!(draws(&right), draws(&wrong));
        }
    }
}

#[test]
fn lagged_replay_starts_at_step_two() {
    let out = run_experiment(&small(Preset::Cipo), None, Execution::Parallel).unwrap();
    let first = &out.metrics[0];
    assert_eq!(first.correction_groups, 0);
    assert_eq!(first.retention, None);
    assert_eq!(first.rho_next, first.rho);
    assert!(out.metrics[1..].iter().all(|m| m.correction_groups > 0));
}

#[test]
fn synchronous_replay_corrects_from_step_one() {
    let config = ExperimentConfig {
        replay_mode: ReplayMode::Synchronous,
        ..small(Preset::Cipo)
    };
    let out = run_experiment(&config, None, Execution::Parallel).unwrap();
    assert!(out.metrics.iter().all(|m| m.correction_groups == config.replay_count()));
}

#[test]
fn ratio_trace_stays_clipped() {
    for preset in [Preset::Cipo, Preset::CipoNoRisk, Preset::CipoOfflineReplay] {
        let config = ExperimentConfig {
            steps: 120,
            ..small(preset)
        };
        let out = run_experiment(&config, None, Execution::Parallel).unwrap();
        for m in &out.metrics {
            assert!((0.2..=0.8).contains(&m.rho), "{preset} step {} rho {}", m.step, m.rho);
            assert!((0.2..=0.8).contains(&m.rho_next));
        }
    }
}

#[test]
fn fixed_ratio_never_moves() {
    let out = run_experiment(&small(Preset::CipoFixedRatio), None, Execution::Parallel).unwrap();
    assert!(out.metrics.iter().all(|m| m.rho == 0.3 && m.rho_next == 0.3));
    assert_eq!(out.controller.rho(), 0.3);
}

#[test]
fn offline_replay_draws_from_step_one() {
    let config = small(Preset::CipoOfflineReplay);
    let bank = bank_for(&config).unwrap();
    let mut state = TrainState::new(&bank, &config);
    let mut step_one = None;
    for _ in 0..4 {
        let out = cipo_train_step(state, &config, &bank, Execution::Sequential).unwrap();
        state = out.state;
        if step_one.is_none() {
            step_one = Some(state.previous_base.clone().unwrap());
        }
        if let Some(sel) = &out.selection {
            let pool = step_one.as_ref().unwrap();
            let prompts: Vec<PromptId> = pool.iter().map(|g| g.context().prompt).collect();
            assert!(sel.candidates.iter().all(|c| prompts.contains(&c.prompt)));
        }
    }
    assert_eq!(state.frozen_pool.as_ref().map(Vec::len), Some(config.batch_prompts));
}

#[test]
fn zero_weight_zero_replay_matches_grpo() {
    for seed in 0..3 {
        let grpo = ExperimentConfig { seed, ..small(Preset::Grpo) };
        let cipo = ExperimentConfig {
            seed,
            lambda: 0.0,
            gamma: 0.0,
            ..small(Preset::Cipo)
        };
        let a = run_experiment(&grpo, None, Execution::Parallel).unwrap();
        let b = run_experiment(&cipo, None, Execution::Parallel).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(json(&a.metrics), json(&b.metrics));
    }
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let config = small(Preset::Cipo);
    let a = run_experiment(&config, None, Execution::Parallel).unwrap();
    let b = run_experiment(&config, None, Execution::Sequential).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(json(&a.metrics), json(&b.metrics));
    assert_eq!(a.eval, b.eval);
}

/// `1 / (e^s + A - 1)` for a prompt whose distractor has strength `s`.
fn closed_form_pass(strength: f64, answers: usize) -> f64 {
    1.0 / (strength.exp() + answers as f64 - 1.0)
}

#[test]
fn initial_pass_rates_match_closed_form() {
    let config = ExperimentConfig::default();
    let bank = bank_for(&config).unwrap();
    let params = initial_policy_params(&bank);
    let samples = 400;
    let report = evaluate(&params, &bank, samples, &[1], 9, Execution::Parallel).unwrap();
    for level in &config.difficulty_profile {
        let ids: Vec<usize> = bank
            .prompt_ids()
            .filter(|&p| bank.distractor(p).strength == level.strength)
            .map(|p| p.index())
            .collect();
        let mean = ids.iter().map(|&i| report.per_prompt_pass1[i]).sum::<f64>() / ids.len() as f64;
        let p = closed_form_pass(level.strength, config.answers);
        let se = (p * (1.0 - p) / (ids.len() * samples) as f64).sqrt();
        assert!((mean - p).abs() < 4.0 * se, "strength {}: {mean} vs {p}", level.strength);
    }
}

#[test]
fn grpo_improves_on_an_easy_bank() {
    let profile = vec![DifficultyLevel { fraction: 1.0, strength: 0.0 }];
    let bank = generate_bank(200, 10, &profile, 1).unwrap();
    let mut gains = Vec::new();
    for seed in 0..5 {
        let config = ExperimentConfig {
            preset: Preset::Grpo,
            difficulty_profile: profile.clone(),
            seed,
            ..ExperimentConfig::default()
        };
        let out = cipo_core::harness::runner::run_on_bank(&config, &bank, None, Execution::Parallel).unwrap();
        let window = |ms: &[StepMetrics]| {
            ms.iter().map(|m| m.base_mean_reward).sum::<f64>() / ms.len() as f64
        };
        let n = out.metrics.len();
        gains.push(window(&out.metrics[n - 20..]) - window(&out.metrics[..20]));
    }
    gains.sort_by(f64::total_cmp);
    assert!(gains[2] >= 0.0, "median gain {} ({gains:?})", gains[2]);
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let config = ExperimentConfig {
        rho0: 0.9,
        ..ExperimentConfig::default()
    };
    match run_experiment(&config, None, Execution::Parallel) {
        Err(LabError::Config(v)) => assert_eq!(v.len(), 1, "{v:?}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    let config = ExperimentConfig {
        delta_low: 0.8,
        delta_high: 0.2,
        ..ExperimentConfig::default()
    };
    match run_experiment(&config, None, Execution::Parallel) {
        Err(LabError::Config(v)) => assert!(v[0].contains("difficulty window ordering")),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn config_files_reject_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "steps = 10\nlearning_rat = 0.1\n").unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err();
    assert!(err.is_config_error(), "{err}");
    assert!(err.to_string().contains("learning_rat"), "{err}");

    std::fs::write(&path, "preset = \"cipo-no-risk\"\nsteps = 10\n[[difficulty_profile]]\nfraction = 1.0\nstrength = 0.5\n").unwrap();
    let config = ExperimentConfig::load(&path).unwrap();
    assert_eq!(config.preset, Preset::CipoNoRisk);
    assert_eq!(config.steps, 10);
    assert_eq!(config.difficulty_profile.len(), 1);
    assert_eq!(config.learning_rate, ExperimentConfig::default().learning_rate);
}

#[test]
fn divergence_reports_the_step() {
    let config = ExperimentConfig {
        learning_rate: 1e308,
        ..small(Preset::Grpo)
    };
    let dir = tempfile::tempdir().unwrap();
    match run_experiment(&config, Some(dir.path()), Execution::Parallel) {
        Err(LabError::Divergence { step, .. }) => assert!(step >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(dir.path().join("divergence.json").exists());
}

#[test]
fn run_artifacts_reload() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(Preset::Cipo);
    let out = run_experiment(&config, Some(dir.path()), Execution::Parallel).unwrap();
    let art = out.artifacts.unwrap();
    let bank = PromptBank::load(&dir.path().join("bank.txt")).unwrap();
    assert_eq!(bank, bank_for(&config).unwrap());
    assert_eq!(cipo_core::policy::PolicyParams::load(&art.params).unwrap(), out.params);
    assert_eq!(json(&read_metrics(&art.metrics_jsonl).unwrap()), json(&out.metrics));
    let reloaded = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(reloaded, config);
    let timings = std::fs::read_to_string(dir.path().join("timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), config.steps + 1);
}

#[test]
fn shipped_configs_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = ExperimentConfig::load(&dir.join("default.toml")).unwrap();
    assert_eq!(default, ExperimentConfig::default());
    for name in ["smoke.toml", "grpo-easy.toml"] {
        let config = ExperimentConfig::load(&dir.join(name)).unwrap();
        assert!(cipo_core::validate_config(&config).is_empty(), "{name}");
    }
}

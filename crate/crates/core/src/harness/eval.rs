//! Sampling-based evaluation: pass@1, unbiased pass@k and correction
//! behaviour conditioned on wrong or correct candidates.

use serde::{Deserialize, Serialize};

use crate::envs::PromptBank;
use crate::error::{LabError, Result};
use crate::exec::Execution;
use crate::grpo::sample_answers;
use crate::policy::PolicyParams;
use crate::seeding::{substream, Stream};
use crate::types::{Answer, Context, PromptId};

/// Unbiased pass@k, `1 - C(n-c, k) / C(n, k)`, evaluated as
/// `1 - prod_{i=n-c+1}^{n} (1 - k/i)`.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(LabError::InvalidArgument(format!(
            "pass@k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassAtK {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples_per_prompt: usize,
    pub per_prompt_pass1: Vec<f64>,
    pub pass1: f64,
    pub pass_at_k: Vec<PassAtK>,
    /// P(correct | conditioned on a wrong candidate).
    pub wrong_to_correct: Option<f64>,
    /// P(wrong | conditioned on a correct candidate).
    pub correct_to_wrong: Option<f64>,
    pub wrong_candidates: usize,
    pub correct_candidates: usize,
}

impl EvalReport {
    pub fn pass_at(&self, k: usize) -> Option<f64> {
        self.pass_at_k.iter().find(|p| p.k == k).map(|p| p.value)
    }
}

struct PromptEval {
    correct: usize,
    pass_k: Vec<f64>,
    // new answer verdict after conditioning on the first wrong / first correct sample
    fixed_wrong: Option<bool>,
    kept_correct: Option<bool>,
}

/// Draws `samples` base answers per prompt. pass@1 is `c/n` per prompt,
/// pass@k uses [`pass_at_k`], and the correction rates come from a single
/// correction rollout at the first wrong and the first correct sample of
/// each prompt. Read-only with respect to `params`.
pub fn evaluate(
    params: &PolicyParams,
    bank: &PromptBank,
    samples: usize,
    k_list: &[usize],
    seed: u64,
    exec: Execution,
) -> Result<EvalReport> {
    let max_k = k_list.iter().copied().max().unwrap_or(1);
    if samples == 0 || max_k > samples || k_list.contains(&0) {
        return Err(LabError::InvalidArgument(format!(
            "evaluation needs 1 <= k <= samples ({samples}) for every k in {k_list:?}"
        )));
    }
    let prompts: Vec<PromptId> = bank.prompt_ids().collect();
    let evals = exec.try_map(&prompts, |_, &prompt| {
        let mut rng = substream(seed, Stream::Evaluation, 0, prompt.index() as u64);
        let draws = sample_answers(params, Context::base(prompt), samples, &mut rng, bank)?;
        let correct = draws.iter().filter(|d| d.2.is_correct()).count();
        let pass_k = k_list
            .iter()
            .map(|&k| pass_at_k(samples, correct, k))
            .collect::<Result<Vec<_>>>()?;

        let first = |want: bool| -> Option<Answer> {
            draws.iter().find(|d| d.2.is_correct() == want).map(|d| d.0)
        };
        let mut rng = substream(seed, Stream::EvalCorrection, 0, prompt.index() as u64);
        let mut correct_after = |candidate: Option<Answer>| -> Result<Option<bool>> {
            candidate
                .map(|c| {
                    let ctx = Context::correction(prompt, c);
                    Ok(sample_answers(params, ctx, 1, &mut rng, bank)?[0].2.is_correct())
                })
                .transpose()
        };
        let fixed_wrong = correct_after(first(false))?;
        let kept_correct = correct_after(first(true))?;
        Ok::<_, LabError>(PromptEval {
            correct,
            pass_k,
            fixed_wrong,
            kept_correct,
        })
    })?;

    let n_prompts = evals.len().max(1) as f64;
    let per_prompt_pass1: Vec<f64> = evals
        .iter()
        .map(|e| e.correct as f64 / samples as f64)
        .collect();
    let pass1 = per_prompt_pass1.iter().sum::<f64>() / n_prompts;
    let pass_at_k = k_list
        .iter()
        .enumerate()
        .map(|(i, &k)| PassAtK {
            k,
            value: evals.iter().map(|e| e.pass_k[i]).sum::<f64>() / n_prompts,
        })
        .collect();

    let fixed: Vec<bool> = evals.iter().filter_map(|e| e.fixed_wrong).collect();
    let kept: Vec<bool> = evals.iter().filter_map(|e| e.kept_correct).collect();
    let rate = |xs: &[bool], want: bool| {
        (!xs.is_empty()).then(|| xs.iter().filter(|&&x| x == want).count() as f64 / xs.len() as f64)
    };

    Ok(EvalReport {
        samples_per_prompt: samples,
        per_prompt_pass1,
        pass1,
        pass_at_k,
        wrong_to_correct: rate(&fixed, true),
        correct_to_wrong: rate(&kept, false),
        wrong_candidates: fixed.len(),
        correct_candidates: kept.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_bank, initial_policy_params};
    use crate::types::DifficultyLevel;

    /// `1 - C(n-c, k)/C(n, k)` with exact integer binomials.
    fn pass_at_k_binomial(n: u64, c: u64, k: u64) -> f64 {
        fn choose(n: u64, k: u64) -> u128 {
            if k > n {
                return 0;
            }
            (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
        }
        1.0 - choose(n - c, k) as f64 / choose(n, k) as f64
    }

    #[test]
    fn estimator_examples() {
        assert!((pass_at_k(8, 4, 2).unwrap() - 11.0 / 14.0).abs() < 1e-12);
        assert_eq!(pass_at_k(10, 0, 3).unwrap(), 0.0);
        assert_eq!(pass_at_k(10, 10, 3).unwrap(), 1.0);
        assert!(pass_at_k(4, 5, 1).is_err());
        assert!(pass_at_k(4, 1, 0).is_err());
        assert!(pass_at_k(4, 1, 5).is_err());
    }

    #[test]
    fn product_form_matches_binomials() {
        for n in 1..=20u64 {
            for c in 0..=n {
                for k in 1..=n {
                    let got = pass_at_k(n as usize, c as usize, k as usize).unwrap();
                    assert!((got - pass_at_k_binomial(n, c, k)).abs() < 1e-12, "n={n} c={c} k={k}");
                }
            }
        }
    }

    fn bank(strength: f64) -> PromptBank {
        generate_bank(50, 10, &[DifficultyLevel { fraction: 1.0, strength }], 2).unwrap()
    }

    #[test]
    fn point_mass_policy_is_perfect() {
        let bank = bank(0.0);
        let mut params = initial_policy_params(&bank);
        for p in bank.prompt_ids() {
            params.set(bank.correct(p).index(), p.index(), 100.0);
        }
        let r = evaluate(&params, &bank, 8, &[1, 4, 8], 0, Execution::Parallel).unwrap();
        assert_eq!(r.pass1, 1.0);
        assert!(r.pass_at_k.iter().all(|p| p.value == 1.0));
        assert_eq!(r.correct_to_wrong, Some(0.0));
        assert_eq!(r.wrong_to_correct, None);
    }

    #[test]
    fn uniform_policy_pass1() {
        let bank = bank(0.0);
        let params = initial_policy_params(&bank);
        let r = evaluate(&params, &bank, 32, &[1, 8, 32], 5, Execution::Parallel).unwrap();
        let se = (0.1f64 * 0.9 / (50.0 * 32.0)).sqrt();
        assert!((r.pass1 - 0.1).abs() < 3.0 * se, "{}", r.pass1);
        assert!((r.pass_at(1).unwrap() - r.pass1).abs() < 1e-12);
    }

    #[test]
    fn evaluation_is_read_only_and_deterministic() {
        let bank = bank(2.0);
        let params = initial_policy_params(&bank);
        let copy = params.clone();
        let a = evaluate(&params, &bank, 16, &[1, 8], 3, Execution::Parallel).unwrap();
        let b = evaluate(&params, &bank, 16, &[1, 8], 3, Execution::Sequential).unwrap();
        assert_eq!(params, copy);
        assert_eq!(a, b);
        assert!(evaluate(&params, &bank, 4, &[8], 3, Execution::Sequential).is_err());
    }
}

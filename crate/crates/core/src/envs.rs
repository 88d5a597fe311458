//! Synthetic verifiable-reward environment.
//!
//! Each prompt has one hidden correct answer and one distractor whose
//! initial logit bias sets the prompt's difficulty. The verifier is exact
//! and deterministic.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};

use crate::error::{LabError, Result};
use crate::policy::PolicyParams;
use crate::seeding::LabRng;
use crate::types::{Answer, DifficultyLevel, PromptId, Verdict};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distractor {
    pub answer: Answer,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    answers: usize,
    seed: u64,
    correct: Vec<Answer>,
    distractors: Vec<Distractor>,
}

impl PromptBank {
    /// Builds a bank from explicit tables, checking every invariant.
    pub fn from_parts(
        answers: usize,
        seed: u64,
        correct: Vec<Answer>,
        distractors: Vec<Distractor>,
    ) -> Result<Self> {
        if answers < 2 {
            return Err(LabError::InvalidArgument(format!(
                "answer space must have at least 2 answers, got {answers}"
            )));
        }
        if correct.len() != distractors.len() {
            return Err(LabError::DimensionMismatch {
                expected: correct.len(),
                actual: distractors.len(),
            });
        }
        for (i, (c, d)) in correct.iter().zip(&distractors).enumerate() {
            c.checked(answers)?;
            d.answer.checked(answers)?;
            if *c == d.answer {
                return Err(LabError::InvalidArgument(format!(
                    "prompt {i}: distractor equals the correct answer"
                )));
            }
            if !d.strength.is_finite() || d.strength < 0.0 {
                return Err(LabError::InvalidArgument(format!(
                    "prompt {i}: distractor strength {} must be finite and >= 0",
                    d.strength
                )));
            }
        }
        Ok(PromptBank {
            answers,
            seed,
            correct,
            distractors,
        })
    }

    pub fn prompts(&self) -> usize {
        self.correct.len()
    }

    pub fn answers(&self) -> usize {
        self.answers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn correct(&self, prompt: PromptId) -> Answer {
        self.correct[prompt.index()]
    }

    pub fn distractor(&self, prompt: PromptId) -> Distractor {
        self.distractors[prompt.index()]
    }

    pub fn prompt_ids(&self) -> impl Iterator<Item = PromptId> + '_ {
        (0..self.prompts()).map(PromptId)
    }

    /// Writes the line-oriented bank file: a `P A seed` header, then
    /// `id correct distractor strength` per prompt.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# prompt bank: P A seed / id correct distractor strength").unwrap();
        writeln!(out, "{} {} {}", self.prompts(), self.answers, self.seed).unwrap();
        for (i, (c, d)) in self.correct.iter().zip(&self.distractors).enumerate() {
            writeln!(out, "{i} {} {} {}", c.0, d.answer.0, d.strength).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<bank>"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| LabError::parse(path, "missing header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 3 {
            return Err(LabError::parse(path, format!("bad header `{header}`")));
        }
        let field = |s: &str, what: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| LabError::parse(path, format!("bad {what} `{s}`")))
        };
        let prompts = field(h[0], "P")? as usize;
        let answers = field(h[1], "A")? as usize;
        let seed = field(h[2], "seed")?;

        let mut correct = Vec::with_capacity(prompts);
        let mut distractors = Vec::with_capacity(prompts);
        for (expected_id, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(LabError::parse(path, format!("bad prompt line `{line}`")));
            }
            let id = field(cols[0], "id")? as usize;
            if id != expected_id {
                return Err(LabError::parse(
                    path,
                    format!("prompt ids must be consecutive; expected {expected_id}, got {id}"),
                ));
            }
            correct.push(Answer(field(cols[1], "correct")? as usize));
            let strength: f64 = cols[3]
                .parse()
                .map_err(|_| LabError::parse(path, format!("bad strength `{}`", cols[3])))?;
            distractors.push(Distractor {
                answer: Answer(field(cols[2], "distractor")? as usize),
                strength,
            });
        }
        if correct.len() != prompts {
            return Err(LabError::parse(
                path,
                format!("header says {prompts} prompts, found {}", correct.len()),
            ));
        }
        Self::from_parts(answers, seed, correct, distractors)
            .map_err(|e| LabError::parse(path, e.to_string()))
    }
}

/// Generates a bank whose prompts are split into contiguous blocks by the
/// difficulty profile. Block sizes come from rounding the cumulative
/// fractions, so they always sum to `prompts`.
///
/// For each prompt in id order the correct answer is drawn uniformly, then
/// the distractor is drawn uniformly and redrawn from the same stream until
/// it differs from the correct answer.
pub fn generate_bank(
    prompts: usize,
    answers: usize,
    profile: &[DifficultyLevel],
    seed: u64,
) -> Result<PromptBank> {
    if answers < 2 {
        return Err(LabError::InvalidArgument(format!(
            "answer space must have at least 2 answers, got {answers}"
        )));
    }
    let total: f64 = profile.iter().map(|l| l.fraction).sum();
    if profile.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(LabError::InvalidArgument(format!(
            "difficulty fractions sum to {total}, expected 1"
        )));
    }
    if let Some(l) = profile
        .iter()
        .find(|l| l.fraction < 0.0 || !l.strength.is_finite() || l.strength < 0.0)
    {
        return Err(LabError::InvalidArgument(format!(
            "bad difficulty level {l:?}"
        )));
    }

    let mut strengths = Vec::with_capacity(prompts);
    let mut cumulative = 0.0;
    let mut boundary = 0usize;
    for (i, level) in profile.iter().enumerate() {
        cumulative += level.fraction;
        let next = if i + 1 == profile.len() {
            prompts
        } else {
            ((cumulative * prompts as f64).round() as usize).min(prompts)
        };
        strengths.extend(std::iter::repeat_n(level.strength, next.saturating_sub(boundary)));
        boundary = boundary.max(next);
    }

    let mut rng = LabRng::seed_from_u64(seed);
    let mut correct = Vec::with_capacity(prompts);
    let mut distractors = Vec::with_capacity(prompts);
    for strength in strengths {
        let c = rng.gen_range(0..answers);
        let mut d = rng.gen_range(0..answers);
        while d == c {
            d = rng.gen_range(0..answers);
        }
        correct.push(Answer(c));
        distractors.push(Distractor {
            answer: Answer(d),
            strength,
        });
    }
    PromptBank::from_parts(answers, seed, correct, distractors)
}

/// The verifiable reward: correct iff `answer` is the prompt's hidden answer.
pub fn verify(bank: &PromptBank, prompt: PromptId, answer: Answer) -> Result<Verdict> {
    prompt.checked(bank.prompts())?;
    answer.checked(bank.answers())?;
    Ok(Verdict::from_bool(bank.correct(prompt) == answer))
}

/// Zero weights except the distractor's logit on each prompt column, which
/// is set to its strength. The base-context pass probability of a prompt
/// with strength `s` is then `1 / (A - 1 + e^s)`.
pub fn initial_policy_params(bank: &PromptBank) -> PolicyParams {
    let mut params = PolicyParams::zeros(bank.prompts(), bank.answers());
    for prompt in bank.prompt_ids() {
        let d = bank.distractor(prompt);
        params.set(d.answer.index(), prompt.index(), d.strength);
    }
    params
}

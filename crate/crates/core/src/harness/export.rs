//! Correction-dataset export.
//!
//! Each replayed candidate becomes one JSON line whose `prompt` is the
//! rendered correction prompt. The prompt text never states whether the
//! candidate is right; the verdict lives only in `metadata`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cipo::ReplayCandidate;
use crate::envs::PromptBank;
use crate::error::{LabError, Result};
use crate::types::{Answer, PromptId, Verdict};

/// Stable textual form of a synthetic prompt.
pub fn render_problem(prompt: PromptId, answers: usize) -> String {
    format!(
        "Problem #{}: select the hidden answer from options 0..{}.",
        prompt.index(),
        answers - 1
    )
}

fn render_candidate(answer: Answer) -> String {
    format!("The answer is {}.", answer.index())
}

pub fn render_correction_prompt(prompt: PromptId, candidate: Answer, answers: usize) -> String {
    format!(
        "{problem}\n\n\
         Below is a candidate solution from a large language model (correctness unknown):\n\n\
         <candidate_solution>\n\
         {solution}\n\
         </candidate_solution>\n\n\
         Please refer to this solution and provide your solution.",
        problem = render_problem(prompt, answers),
        solution = render_candidate(candidate),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub verdict: Verdict,
    pub source_pass_rate: f64,
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub prompt_id: PromptId,
    pub candidate: Answer,
    pub prompt: String,
    pub metadata: RecordMetadata,
}

impl CorrectionRecord {
    pub fn new(candidate: &ReplayCandidate, bank: &PromptBank, step: Option<usize>) -> Self {
        CorrectionRecord {
            prompt_id: candidate.prompt,
            candidate: candidate.answer,
            prompt: render_correction_prompt(candidate.prompt, candidate.answer, bank.answers()),
            metadata: RecordMetadata {
                verdict: candidate.verdict,
                source_pass_rate: candidate.source_pass_rate,
                step,
            },
        }
    }
}

/// Writes one record per candidate as JSON Lines.
pub fn export_correction_dataset(
    batch: &[ReplayCandidate],
    bank: &PromptBank,
    step: Option<usize>,
    path: &Path,
) -> Result<usize> {
    if batch.is_empty() {
        return Err(LabError::InvalidArgument("empty replay batch".into()));
    }
    for c in batch {
        c.prompt.checked(bank.prompts())?;
        c.answer.checked(bank.answers())?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    for c in batch {
        serde_json::to_writer(&mut out, &CorrectionRecord::new(c, bank, step))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(batch.len())
}

//! Linear-softmax policy over `[prompt one-hot | candidate one-hot | 1]`
//! features, shared by base and correction contexts.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{LabError, Result};
use crate::types::{Answer, Context};

/// Feature dimension for `prompts` prompts and `answers` answers.
pub fn feature_dim(prompts: usize, answers: usize) -> usize {
    prompts + answers + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
    // indices of nonzero entries, ascending
    active: Vec<usize>,
}

impl FeatureVector {
    pub fn from_dense(values: Vec<f64>) -> Self {
        let active = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        FeatureVector { values, active }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.active.iter().map(|&i| (i, self.values[i]))
    }
}

/// Builds the feature vector of a context. Depends only on the prompt and
/// the candidate answer.
pub fn featurize(context: Context, prompts: usize, answers: usize) -> Result<FeatureVector> {
    let prompt = context.prompt.checked(prompts)?;
    let dim = feature_dim(prompts, answers);
    let mut values = vec![0.0; dim];
    let mut active = Vec::with_capacity(3);
    values[prompt.index()] = 1.0;
    active.push(prompt.index());
    if let Some(candidate) = context.candidate {
        let c = candidate.checked(answers)?;
        values[prompts + c.index()] = 1.0;
        active.push(prompts + c.index());
    }
    values[dim - 1] = 1.0;
    active.push(dim - 1);
    Ok(FeatureVector { values, active })
}

/// Row-major `answers x dim` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    answers: usize,
    dim: usize,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(prompts: usize, answers: usize) -> Self {
        let dim = feature_dim(prompts, answers);
        PolicyParams {
            answers,
            dim,
            weights: vec![0.0; answers * dim],
        }
    }

    pub fn from_rows(answers: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != answers * dim {
            return Err(LabError::DimensionMismatch {
                expected: answers * dim,
                actual: weights.len(),
            });
        }
        if dim < answers + 2 {
            return Err(LabError::InvalidArgument(format!(
                "dimension {dim} too small for {answers} answers"
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(LabError::NonFinite(format!("weight {w}")));
        }
        Ok(PolicyParams {
            answers,
            dim,
            weights,
        })
    }

    pub fn answers(&self) -> usize {
        self.answers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompts(&self) -> usize {
        self.dim - self.answers - 1
    }

    pub fn get(&self, answer: usize, col: usize) -> f64 {
        self.weights[answer * self.dim + col]
    }

    pub fn set(&mut self, answer: usize, col: usize, value: f64) {
        self.weights[answer * self.dim + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    fn logits(&self, features: &FeatureVector) -> Result<Vec<f64>> {
        if features.dim() != self.dim {
            return Err(LabError::DimensionMismatch {
                expected: self.dim,
                actual: features.dim(),
            });
        }
        let logits: Vec<f64> = (0..self.answers)
            .map(|a| {
                let row = &self.weights[a * self.dim..(a + 1) * self.dim];
                features.nonzeros().map(|(j, v)| row[j] * v).sum()
            })
            .collect();
        if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
            return Err(LabError::NonFinite(format!("logit {z}")));
        }
        Ok(logits)
    }

    /// Text checkpoint: an `A D` header, then one row of weights per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} {}", self.answers, self.dim).unwrap();
        for row in self.weights.chunks(self.dim) {
            let line: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<params>"))
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
        let mut tokens = text.split_whitespace();
        let mut header = |what: &str| -> Result<usize> {
            tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| LabError::parse(path, format!("missing or bad {what}")))
        };
        let answers = header("A")?;
        let dim = header("D")?;
        let weights = tokens
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| LabError::parse(path, format!("bad weight `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(answers, dim, weights).map_err(|e| LabError::parse(path, e.to_string()))
    }
}

/// Softmax of `weights . features`.
pub fn action_distribution(params: &PolicyParams, features: &FeatureVector) -> Result<Vec<f64>> {
    let logits = params.logits(features)?;
    Ok(softmax(&logits))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Inverse-CDF draw over the fixed answer order from one uniform variate.
pub fn sample_action<R: Rng + ?Sized>(distribution: &[f64], rng: &mut R) -> (Answer, f64) {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut chosen = None;
    for (i, &p) in distribution.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            chosen = Some(i);
            break;
        }
    }
    // rounding can leave the total just below u; take the last positive entry
    let index = chosen.unwrap_or_else(|| {
        distribution
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("distribution has positive mass")
    });
    (Answer(index), distribution[index].ln())
}

/// Dense `answers x dim` gradient buffer with the same layout as
/// [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    answers: usize,
    dim: usize,
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Gradient {
            answers: params.answers,
            dim: params.dim,
            values: vec![0.0; params.weights.len()],
        }
    }

    pub fn get(&self, answer: usize, col: usize) -> f64 {
        self.values[answer * self.dim + col]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn answers(&self) -> usize {
        self.answers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Gradient, factor: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    /// `self += outer(row_coeffs, features)`, touching only active columns.
    fn add_outer(&mut self, row_coeffs: &[f64], features: &FeatureVector) {
        for (a, &c) in row_coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let row = &mut self.values[a * self.dim..(a + 1) * self.dim];
            for (j, v) in features.nonzeros() {
                row[j] += c * v;
            }
        }
    }

    /// Accumulates `scale * grad log pi(answer | features)`.
    pub fn add_log_prob(
        &mut self,
        params: &PolicyParams,
        features: &FeatureVector,
        answer: Answer,
        scale: f64,
    ) -> Result<()> {
        answer.checked(params.answers)?;
        let dist = action_distribution(params, features)?;
        let coeffs: Vec<f64> = dist
            .iter()
            .enumerate()
            .map(|(a, p)| scale * ((a == answer.index()) as u8 as f64 - p))
            .collect();
        self.add_outer(&coeffs, features);
        Ok(())
    }

    /// Accumulates `scale * grad KL(pi_params || pi_reference)`.
    pub fn add_kl(
        &mut self,
        params: &PolicyParams,
        reference: &PolicyParams,
        features: &FeatureVector,
        scale: f64,
    ) -> Result<()> {
        let p = action_distribution(params, features)?;
        let q = action_distribution(reference, features)?;
        let log_ratio: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| (pi / qi).ln()).collect();
        let kl: f64 = p.iter().zip(&log_ratio).map(|(pi, r)| pi * r).sum();
        let coeffs: Vec<f64> = p
            .iter()
            .zip(&log_ratio)
            .map(|(pi, r)| scale * pi * (r - kl))
            .collect();
        self.add_outer(&coeffs, features);
        Ok(())
    }
}

/// `(onehot(answer) - pi) outer features`.
pub fn log_prob_gradient(
    params: &PolicyParams,
    features: &FeatureVector,
    answer: Answer,
) -> Result<Gradient> {
    let mut g = Gradient::zeros_like(params);
    g.add_log_prob(params, features, answer, 1.0)?;
    Ok(g)
}

/// Exact KL divergence between the two categorical distributions at `features`.
pub fn kl_to_reference(
    params: &PolicyParams,
    reference: &PolicyParams,
    features: &FeatureVector,
) -> Result<f64> {
    let p = action_distribution(params, features)?;
    let q = action_distribution(reference, features)?;
    Ok(categorical_kl(&p, &q))
}

pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

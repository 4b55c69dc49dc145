use ndgrad::{Real, Tape, Tensor, Var};

use crate::{Error, Result};

/// Probabilities below this are raised to it inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// `l_ori − α·ReLU(l_str − l_ori)`, elementwise in the storage precision.
/// Coordinates where the strengthened logit does not exceed the original are
/// copied unchanged.
pub fn build_teacher_logits<T: Real>(
    l_ori: &Tensor<T>,
    l_str: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    if l_ori.shape() != l_str.shape() {
        return Err(ndgrad::NdError::Shape {
            op: "build_teacher_logits",
            lhs: l_ori.shape().to_vec(),
            rhs: l_str.shape().to_vec(),
        }
        .into());
    }
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let data = teacher_row(l_ori.data(), l_str.data(), alpha);
    Ok(Tensor::new(l_ori.shape().to_vec(), data)?)
}

pub(crate) fn teacher_row<T: Real>(l_ori: &[T], l_str: &[T], alpha: f64) -> Vec<T> {
    let a = T::from_f64(alpha);
    l_ori
        .iter()
        .zip(l_str)
        .map(|(&o, &s)| {
            let diff = s - o;
            if diff > T::ZERO {
                o - a * diff
            } else {
                o
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
    Original,
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub probs: Vec<f64>,
    pub role: Role,
}

impl Distribution {
    pub fn new(probs: Vec<f64>, role: Role) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "not a probability vector (sum {total})"
            )));
        }
        Ok(Self { probs, role })
    }

    pub fn from_logits(logits: &[f64], role: Role) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        Self {
            probs: exps.into_iter().map(|e| e / total).collect(),
            role,
        }
    }
}

/// `Σ p·ln(p / max(q, floor))` with `0·ln 0 = 0`, clamped at 0.
///
/// For nearly equal inputs the sum can round to about `-1e-17`, and the
/// floor adds mass to `q`; neither reflects a real divergence.
pub fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum();
    sum.max(0.0)
}

/// Forward KL `Σ π_tea·ln(π_tea/π_θ)`: the teacher weighs the terms.
pub fn fkl_loss(teacher: &Distribution, student: &Distribution) -> f64 {
    kl_floored(&teacher.probs, &student.probs)
}

/// Reverse KL `Σ π_θ·ln(π_θ/π_tea)`: the student weighs the terms.
pub fn rkl_loss(teacher: &Distribution, student: &Distribution) -> f64 {
    kl_floored(&student.probs, &teacher.probs)
}

/// Row-wise `Σ exp(a)·(a − max(b, ln floor))` for log-probability matrices
/// `a` and `b` of equal shape; returns the `[rows]` vector of divergences.
/// Gradients flow into whichever arguments require them.
pub fn kl_rows<T: Real>(tape: &mut Tape<T>, first_logp: Var, second_logp: Var) -> Result<Var> {
    let p = tape.exp(first_logp);
    let floored = tape.clamp_min(second_logp, PROB_FLOOR.ln());
    let diff = tape.sub(first_logp, floored)?;
    let terms = tape.mul(p, diff)?;
    Ok(tape.sum_rows(terms)?)
}

/// Constant log-softmax rows of `logits` (`cols` wide), computed off-tape.
pub fn log_softmax_rows(logits: &[f32], cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(cols) {
        let max = row
            .iter()
            .map(|&v| v as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = row
            .iter()
            .map(|&v| (v as f64 - max).exp())
            .sum::<f64>()
            .ln();
        out.extend(row.iter().map(|&v| (v as f64 - max - lse) as f32));
    }
    out
}

//! Selection and estimation metrics.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{PwgeeError, Result};

/// True coefficients and their support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTruth {
    beta_star: Vec<f64>,
    support: Vec<usize>,
}

impl SelectionTruth {
    pub fn new(beta_star: Vec<f64>) -> Self {
        let support = beta_star
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0.0)
            .map(|(j, _)| j)
            .collect();
        Self { beta_star, support }
    }

    pub fn beta_star(&self) -> &[f64] {
        &self.beta_star
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn p(&self) -> usize {
        self.beta_star.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub tp: usize,
    pub fp: usize,
    /// 1 when every true coordinate is selected.
    pub cr: u8,
}

fn check_len(got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(PwgeeError::DimensionMismatch(format!(
            "coefficient vector has length {got}, truth has length {want}"
        )));
    }
    Ok(())
}

pub fn selection_metrics(beta_hat: &[f64], truth: &SelectionTruth) -> Result<SelectionMetrics> {
    check_len(beta_hat.len(), truth.p())?;
    let (mut tp, mut fp) = (0, 0);
    for (j, &b) in beta_hat.iter().enumerate() {
        if b != 0.0 {
            if truth.beta_star[j] != 0.0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(SelectionMetrics {
        tp,
        fp,
        cr: u8::from(tp == truth.support.len()),
    })
}

/// Squared Euclidean distance to `beta_star`.
pub fn squared_error(beta_hat: &[f64], beta_star: &[f64]) -> Result<f64> {
    check_len(beta_hat.len(), beta_star.len())?;
    Ok(beta_hat
        .iter()
        .zip(beta_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Mean over replicates of the squared distance to `beta_star`.
pub fn mse(beta_hats: &[DVector<f64>], beta_star: &[f64]) -> Result<f64> {
    if beta_hats.is_empty() {
        return Err(PwgeeError::EmptyInput("no replicates".into()));
    }
    let mut errs = beta_hats
        .iter()
        .map(|b| squared_error(b.as_slice(), beta_star))
        .collect::<Result<Vec<_>>>()?;
    // summing in sorted order makes the mean independent of replicate order
    errs.sort_by(f64::total_cmp);
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Class 1 when the probability is at least `cutoff`.
pub fn classify(prob: f64, cutoff: f64) -> u8 {
    u8::from(prob >= cutoff)
}

/// Fraction of misclassified observations.
pub fn classification_error(probs: &[f64], labels: &[u8], cutoff: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(PwgeeError::EmptyInput("no observations to classify".into()));
    }
    if probs.len() != labels.len() {
        return Err(PwgeeError::DimensionMismatch(format!(
            "{} probabilities but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let wrong = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| classify(p, cutoff) != l)
        .count();
    Ok(wrong as f64 / probs.len() as f64)
}

/// Mean and sample standard deviation; the sd of a single value is 0.
pub fn mean_sd(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}
